"""Delta vs additive fast weights on associative recall with rebound keys.

Each sequence binds ``n_pairs`` keys, then rebinds ``n_repeats`` of them to a
new value before the query. The additive rule superimposes both bindings;
the delta rule replaces the old one.

    python scripts/recall_delta_vs_additive.py --steps 2000 --repeats 3 --out runs/recall
"""

import argparse
import json
from pathlib import Path

import numpy as np

from fastweights import train
from fastweights.tasks import TaskSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--pairs", type=int, default=4)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    cfg = train.TrainConfig(steps=args.steps, lr=args.lr, log_every=100, eval_every=max(args.steps // 4, 1))
    results = {}
    for kind in ("delta", "additive"):
        accs = []
        for seed in range(args.seeds):
            spec = TaskSpec("assoc_recall", 16, n_pairs=args.pairs, n_queries=args.pairs,
                            n_repeats=args.repeats, seed=seed)
            out_dir = args.out / f"{kind}_seed{seed}" if args.out else None
            rep = train.train_run(kind, spec, cfg, seed, out_dir=out_dir)
            accs.append(rep.final_eval_acc)
            print(f"{kind:9s} seed {seed}  held-out acc {rep.final_eval_acc:.3f}  final loss {rep.losses[-1]:.4f}")
        results[kind] = {"accs": accs, "mean": float(np.mean(accs))}
    print()
    for kind, r in results.items():
        print(f"{kind:9s} mean acc {r['mean']:.3f}")
    if args.out:
        (args.out / "summary.json").write_text(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
