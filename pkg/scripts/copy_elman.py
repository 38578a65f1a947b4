"""Activation-based recurrence baseline: Elman cell on the copy task.

    python scripts/copy_elman.py --steps 1500 --out runs/copy
    fastweights plot --metrics runs/copy/metrics.jsonl --out runs/copy/curves.svg
"""

import argparse
from pathlib import Path

from fastweights import train
from fastweights.tasks import TaskSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--payload", type=int, default=4)
    ap.add_argument("--blank", type=int, default=4)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    spec = TaskSpec("copy", 16, payload_len=args.payload, blank_len=args.blank, seed=args.seed)
    cfg = train.TrainConfig(steps=args.steps, lr=args.lr, d_hidden=args.hidden, sigma="tanh",
                            log_every=100, eval_every=250, target_acc=1.0)
    rep = train.train_run("elman", spec, cfg, args.seed, out_dir=args.out)
    for m in rep.metrics:
        print(f"step {m['step']:5d}  loss {m['loss']:.4f}  acc {m['acc']:.3f}")
    print(f"held-out acc {rep.final_eval_acc:.3f} after {rep.steps_run} steps")


if __name__ == "__main__":
    main()
