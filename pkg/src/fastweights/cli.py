"""``fastweights`` command line.

Every subcommand prints one JSON object on stdout and logs diagnostics to
stderr. Exit codes: 0 success, 1 a check failed, 2 bad configuration.

Config files for ``train`` are flat ``key = value`` text; ``#`` starts a
comment. Recognised keys are the fields of :class:`TrainConfig` and
:class:`TaskSpec` plus ``cell``, ``task``, ``seed``, ``task_seed`` and
``out``. Command-line flags override the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from pathlib import Path

import numpy as np

from . import attention, bptt, tasks, tem, train
from .cells import CellConfig, CellKind, init_params
from .errors import EmptySequence, FastWeightsError

log = logging.getLogger("fastweights")

GRADCHECK_TOL = 1e-5
MEMCHECK_TOL = 1e-8


class ConfigError(ValueError):
    pass


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def _positive(name: str, value: int) -> None:
    if value < 1:
        raise ConfigError(f"--{name} must be at least 1, got {value}")


# -- checks ---------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    if args.T < 1:
        raise EmptySequence("--T must be at least 1")
    for name in ("din", "dout", "seeds"):
        _positive(name, getattr(args, name))
    kind = CellKind.parse(args.cell)
    strategy = bptt.Strategy.parse(args.strategy) if args.strategy else None
    worst = 0.0
    for seed in range(args.seeds):
        res = bptt.gradcheck(kind, args.din, args.dout, args.T, seed, args.h, strategy)
        log.debug("seed %d rel err %.3e", seed, res.max_rel_err)
        worst = max(worst, res.max_rel_err)
    ok = worst <= GRADCHECK_TOL
    _emit({"cell_kind": kind.value, "seeds": args.seeds, "T": args.T, "d_in": args.din,
           "d_out": args.dout, "h": args.h, "max_rel_err": worst, "pass": ok})
    return 0 if ok else 1


def cmd_dualcheck(args) -> int:
    if args.T < 1:
        raise EmptySequence("--T must be at least 1")
    _positive("d", args.d)
    _positive("seeds", args.seeds)
    if args.tol < 0:
        raise ConfigError("--tol must be non-negative")
    worst, rep = 0.0, None
    for seed in range(args.seeds):
        A, Q, xs = attention.random_instance(seed, args.T, args.d, with_query=not args.no_query)
        rep = attention.dual_form_check(A, Q, xs, args.tol)
        worst = max(worst, rep.max_abs_diff)
    ok = worst <= args.tol
    _emit({"seeds": args.seeds, "T": args.T, "d": args.d, "max_abs_diff": worst,
           "flops_attn": rep.flops_attn, "flops_fwp": rep.flops_fwp, "pass": ok})
    return 0 if ok else 1


def cmd_memcheck(args) -> int:
    if args.T < 1:
        raise EmptySequence("--T must be at least 1")
    _positive("d", args.d)
    rng = np.random.default_rng(args.seed)
    params = init_params(CellConfig("additive", args.d, args.d), rng)
    xs = rng.uniform(-1.0, 1.0, size=(args.T, args.d))
    probe = rng.normal(size=(args.T, args.d))
    peaks, grads = {}, {}
    for strat in (bptt.FULL_CACHE, bptt.REVERSIBLE):
        _, tape = bptt.run_forward(params, xs, strat)
        grads[strat.name] = bptt.run_backward(params, tape, probe).d_params
        peaks[strat.name] = bptt.peak_weight_buffers(tape)
    diff = bptt.max_rel_err(grads["reversible"], grads["full_cache"])
    ok = (peaks["reversible"] <= 2 and peaks["full_cache"] == args.T + 1 and diff <= MEMCHECK_TOL)
    _emit({"T": args.T, "d": args.d, "buffers_fullcache": peaks["full_cache"],
           "buffers_reversible": peaks["reversible"], "grads_rel_diff": diff, "pass": ok})
    return 0 if ok else 1


def cmd_temcheck(args) -> int:
    _positive("seeds", args.seeds)
    if args.tol < 0:
        raise ConfigError("--tol must be non-negative")
    if args.trajectory:
        traj = tem.read_trajectory(args.trajectory)
        params, _ = tem.random_tem(0, traj.observations.shape[1], args.dpos, 1,
                                   n_actions=int(traj.actions.max()) + 1, sigma=args.sigma)
        runs = [(params, traj)]
    else:
        if args.T < 1:
            raise EmptySequence("--T must be at least 1")
        _positive("din", args.din)
        _positive("dpos", args.dpos)
        runs = [tem.random_tem(s, args.din, args.dpos, args.T, sigma=args.sigma) for s in range(args.seeds)]
    worst = max(tem.equivalence_max_diff(p, t) for p, t in runs)
    first = tem.rollout_report(*runs[0])
    ok = worst <= args.tol
    _emit({"seeds": len(runs), "T": first["T"], "d_in": first["d_in"], "d_pos": first["d_pos"],
           "mse_per_step": first["mse_per_step"], "equivalence_max_diff": worst, "pass": ok})
    return 0 if ok else 1


# -- data and training ----------------------------------------------------------

_TASK_ALIASES = {"assoc": "assoc_recall", "assoc_recall": "assoc_recall", "recall": "assoc_recall",
                 "copy": "copy"}


def _task_kind(name: str) -> str:
    try:
        return _TASK_ALIASES[name]
    except KeyError:
        raise ConfigError(f"unknown task {name!r}") from None


def cmd_gen(args) -> int:
    _positive("n", args.n)
    spec = tasks.TaskSpec(_task_kind(args.task), args.vocab, n_pairs=args.n_pairs,
                          n_queries=args.n_queries, n_repeats=args.n_repeats,
                          payload_len=args.payload_len, blank_len=args.blank_len, seed=args.seed)
    data = tasks.generate(spec.validate(), args.n)
    tasks.write_dataset(args.out, data)
    _emit({"task": spec.kind, "n": args.n, "seq_len": spec.seq_len, "seed": spec.seed, "out": str(args.out)})
    return 0


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(value: str, hint):
    if value.lower() in ("none", "null", ""):
        if type(None) in typing.get_args(hint):
            return None
        raise ConfigError("value may not be empty")
    base = next((a for a in typing.get_args(hint) if a is not type(None)), hint)
    try:
        return base(value)
    except ValueError:
        raise ConfigError(f"cannot parse {value!r} as {base.__name__}") from None


_TRAIN_HINTS = typing.get_type_hints(train.TrainConfig)
_TASK_FIELDS = {"vocab_size": int, "n_pairs": int, "n_queries": int, "n_repeats": int,
                "payload_len": int, "blank_len": int, "task_seed": int}
_RUN_FIELDS = {"cell": str, "task": str, "seed": int, "out": str}


def build_run(settings: dict[str, str]):
    """Turn flat string settings into ``(cell, TaskSpec, TrainConfig, seed, out)``."""
    known = set(_TRAIN_HINTS) | set(_TASK_FIELDS) | set(_RUN_FIELDS)
    unknown = sorted(set(settings) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    typed = {}
    for key, value in settings.items():
        hint = _TRAIN_HINTS.get(key) or _TASK_FIELDS.get(key) or _RUN_FIELDS[key]
        try:
            typed[key] = _coerce(value, hint)
        except ConfigError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    cfg = train.TrainConfig(**{k: v for k, v in typed.items() if k in _TRAIN_HINTS})
    if cfg.steps < 0:
        raise ConfigError("steps must be non-negative")
    for name in ("batch_size", "d_hidden", "log_every", "eval_every", "eval_size"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be at least 1")
    task_kw = {k: v for k, v in typed.items() if k in _TASK_FIELDS and k != "task_seed"}
    spec = tasks.TaskSpec(_task_kind(typed.get("task", "assoc_recall")),
                          seed=typed.get("task_seed", 0), **task_kw).validate()
    cell = CellKind.parse(typed.get("cell", "delta"))
    return cell, spec, cfg, typed.get("seed", 0), typed.get("out")


def cmd_train(args) -> int:
    settings = read_config(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        settings[key.strip().replace("-", "_")] = value.strip()
    for key in ("cell", "task", "seed", "steps", "lr", "out"):
        value = getattr(args, key)
        if value is not None:
            settings[key] = str(value)
    cell, spec, cfg, seed, out = build_run(settings)
    # validate the optimizer settings before any compute
    train.OptimState(cfg.optimizer, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip_norm)
    if cfg.strategy:
        bptt.Strategy.parse(cfg.strategy)
    rep = train.train_run(cell, spec, cfg, seed, out_dir=out)
    _emit({"cell": rep.cell, "task": rep.task, "seed": rep.seed, "steps_run": rep.steps_run,
           "final_loss": rep.losses[-1], "final_eval_acc": rep.final_eval_acc,
           "reached_target_at": rep.reached_target_at, "checksum": rep.checksum, "out": out})
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [json.loads(l) for l in Path(args.metrics).read_text().splitlines() if l.strip()]
    if not rows:
        raise ConfigError(f"{args.metrics} holds no metrics")
    steps = [r["step"] for r in rows]
    plt.rcParams["svg.hashsalt"] = "fastweights"
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(steps, [r["loss"] for r in rows])
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_acc.plot(steps, [r["acc"] for r in rows])
    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("masked accuracy")
    ax_acc.set_ylim(0.0, 1.02)
    if args.title:
        fig.suptitle(args.title)
    fig.tight_layout()
    fig.savefig(args.out, format="svg", metadata={"Date": None})
    plt.close(fig)
    _emit({"out": str(args.out), "points": len(rows)})
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fastweights", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more stderr logging")
    sub = p.add_subparsers(dest="command", required=True)
    kinds = [k.value for k in CellKind]

    g = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    g.add_argument("--cell", choices=kinds, required=True)
    g.add_argument("--din", type=int, default=3)
    g.add_argument("--dout", type=int, default=3)
    g.add_argument("--T", type=int, default=8)
    g.add_argument("--seeds", type=int, default=5)
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--strategy", help="full_cache | reversible | checkpoint[:interval]")
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("dualcheck", help="attention form vs fast-weight form")
    d.add_argument("--T", type=int, default=16)
    d.add_argument("--d", type=int, default=4)
    d.add_argument("--seeds", type=int, default=10)
    d.add_argument("--tol", type=float, default=1e-10)
    d.add_argument("--no-query", action="store_true", help="use the key as the query")
    d.set_defaults(func=cmd_dualcheck)

    m = sub.add_parser("memcheck", help="reversible vs full-cache backward")
    m.add_argument("--T", type=int, default=32)
    m.add_argument("--d", type=int, default=4)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_memcheck)

    t = sub.add_parser("temcheck", help="incremental vs concatenated TEM readout")
    t.add_argument("--T", type=int, default=64)
    t.add_argument("--din", type=int, default=4)
    t.add_argument("--dpos", type=int, default=4)
    t.add_argument("--seeds", type=int, default=10)
    t.add_argument("--tol", type=float, default=1e-10)
    t.add_argument("--sigma", default="tanh", choices=["identity", "tanh", "relu"])
    t.add_argument("--trajectory", help="JSONL file of {x, a} steps instead of random ones")
    t.set_defaults(func=cmd_temcheck)

    gen = sub.add_parser("gen", help="write a synthetic dataset as JSONL")
    gen.add_argument("--task", required=True)
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--n", type=int, default=100)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--vocab", type=int, default=16)
    gen.add_argument("--n-pairs", type=int, default=4)
    gen.add_argument("--n-queries", type=int, default=1)
    gen.add_argument("--n-repeats", type=int, default=0)
    gen.add_argument("--payload-len", type=int, default=4)
    gen.add_argument("--blank-len", type=int, default=4)
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train a cell on a synthetic task")
    tr.add_argument("--config", type=Path, help="key = value file")
    tr.add_argument("--cell", choices=kinds)
    tr.add_argument("--task")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--steps", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--out", help="directory for metrics.jsonl, report.json, model.ckpt")
    tr.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    tr.set_defaults(func=cmd_train)

    pl = sub.add_parser("plot", help="loss and accuracy curves as SVG")
    pl.add_argument("--metrics", type=Path, required=True)
    pl.add_argument("--out", type=Path, required=True)
    pl.add_argument("--title")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FastWeightsError, ValueError, OSError, KeyError) as exc:
        print(f"fastweights {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
