"""Sequence-level forward/backward over any cell.

Three tape strategies trade memory for recompute:

``full_cache``   every record keeps its ``W_{t-1}`` snapshot (T+1 weight
                 matrices alive when backward starts).
``reversible``   additive cells only. Records keep the per-step vectors;
                 one live weight matrix is walked backwards with
                 ``W_{t-1} = W_t - v_t k_t^T``.
``checkpoint``   states are saved every ``interval`` steps; each segment is
                 recomputed from its checkpoint during backward. Default
                 interval is ceil(sqrt(T)).

Weight-buffer accounting counts fast-weight *state* matrices; cotangent
accumulators are not counted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .cells import CellKind, CellParams, CellState, StepRecord, forward_step, initial_state, step_backward
from .errors import EmptySequence, ShapeMismatch, StrategyUnsupported


@dataclass(frozen=True)
class Strategy:
    name: str
    interval: Optional[int] = None

    def __post_init__(self):
        if self.name not in ("full_cache", "reversible", "checkpoint"):
            raise ValueError(f"unknown strategy {self.name!r}")
        if self.interval is not None and self.interval < 1:
            raise ValueError("checkpoint interval must be positive")

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        name, _, interval = text.partition(":")
        return cls(name, int(interval) if interval else None)


FULL_CACHE = Strategy("full_cache")
REVERSIBLE = Strategy("reversible")


def checkpoint(interval: Optional[int] = None) -> Strategy:
    return Strategy("checkpoint", interval)


def default_strategy(kind: CellKind) -> Strategy:
    kind = CellKind.parse(kind)
    if kind is CellKind.ADDITIVE:
        return REVERSIBLE
    if kind.uses_beta:
        return checkpoint()
    return FULL_CACHE


class BufferMeter:
    """Counts simultaneously alive fast-weight buffers."""

    def __init__(self, alive: int = 0):
        self.alive = alive
        self.peak = alive

    def acquire(self, n: int = 1):
        self.alive += n
        self.peak = max(self.peak, self.alive)

    def release(self, n: int = 1):
        self.alive -= n
        assert self.alive >= 0, "buffer released twice"


@dataclass
class Tape:
    strategy: Strategy
    params: CellParams
    xs: np.ndarray
    ys: np.ndarray
    records: list[StepRecord]
    checkpoints: dict[int, CellState]
    final_state: CellState
    beta: Optional[object] = None
    interval: Optional[int] = None
    consumed: bool = False
    peak_buffers: Optional[int] = None
    reconstructed_W0: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return len(self.xs)

    def stored_weight_snapshots(self) -> int:
        """Weight matrices held by the tape, excluding the live final state."""
        n = sum(r.W_prev is not None for r in self.records)
        return n + sum(c.W is not None for c in self.checkpoints.values())


@dataclass
class GradBundle:
    d_params: CellParams
    loss: float = 0.0
    d_xs: Optional[np.ndarray] = None
    d_state0: Optional[CellState] = None
    inner: Optional[list[dict]] = None

    def __add__(self, other: "GradBundle") -> "GradBundle":
        return GradBundle(self.d_params + other.d_params, self.loss + other.loss)


def _as_sequence(params: CellParams, xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim < 2 or xs.shape[0] == 0:
        raise EmptySequence("input sequence must contain at least one step")
    if xs.shape[-1] != params.config.d_in:
        raise ShapeMismatch(f"inputs must end in dimension {params.config.d_in}, got {xs.shape}")
    return xs


def run_forward(params: CellParams, xs, strategy: Optional[Strategy] = None, *,
                state0: Optional[CellState] = None, beta=None) -> tuple[np.ndarray, Tape]:
    """Unroll the cell over ``xs`` (shape ``(T, ..., d_in)``)."""
    kind = params.kind
    strategy = strategy or default_strategy(kind)
    xs = _as_sequence(params, xs)
    T = xs.shape[0]
    if strategy.name == "reversible" and kind is not CellKind.ADDITIVE:
        raise StrategyUnsupported(f"reversible backprop needs the additive rule, not {kind.value}")
    state = state0 if state0 is not None else initial_state(params.config, xs.shape[1:-1])

    interval = None
    if strategy.name == "checkpoint":
        interval = strategy.interval or max(1, math.ceil(math.sqrt(T)))
    keep = strategy.name == "full_cache"
    records, checkpoints, ys = [], {}, []
    for t in range(T):
        if interval is not None and t % interval == 0:
            checkpoints[t] = state
        state, y, rec = forward_step(params, state, xs[t], beta=beta, keep_prev=keep)
        ys.append(y)
        if strategy.name != "checkpoint":
            records.append(rec)
    ys = np.stack(ys)
    tape = Tape(strategy, params, xs, ys, records, checkpoints, state, beta=beta, interval=interval)
    return ys, tape


def run_backward(params: CellParams, tape: Tape, d_ys, *, d_final_state: Optional[CellState] = None,
                 collect_inner: bool = False) -> GradBundle:
    """Exact gradient of ``sum_t d_ys[t] . y_t`` with respect to params and inputs.

    A tape can be walked backwards once; the reversible strategy rebuilds
    the fast weights in place and leaves the reconstructed ``W_0`` on
    ``tape.reconstructed_W0``.
    """
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    if tape.params.config != params.config:
        raise StrategyUnsupported("tape was recorded with a different cell configuration")
    d_ys = np.asarray(d_ys, dtype=np.float64)
    if d_ys.shape != tape.ys.shape:
        raise ShapeMismatch(f"cotangents must have shape {tape.ys.shape}, got {d_ys.shape}")
    tape.consumed = True
    grads = params.zeros_like()
    T = tape.T
    d_xs = np.zeros_like(tape.xs)
    inner = [None] * T if collect_inner else None
    d_state = d_final_state or CellState()
    fast = params.kind.has_fast_weights

    if tape.strategy.name == "checkpoint":
        d_state, meter = _backward_checkpointed(params, tape, d_ys, d_state, grads, d_xs, inner)
    else:
        reversible = tape.strategy.name == "reversible"
        n_snap = sum(r.W_prev is not None for r in tape.records)
        meter = BufferMeter(n_snap + 1 if fast else 0)
        W_cur = tape.final_state.W
        for t in range(T - 1, -1, -1):
            rec = tape.records[t]
            info = {} if collect_inner else None
            d_state, d_xs[t] = step_backward(params, rec, d_ys[t], d_state, grads, W=W_cur, inner=info)
            if collect_inner:
                inner[t] = info
            if not fast:
                continue
            if reversible:
                meter.acquire()          # temporary v k^T
                W_cur -= rec.v[..., :, None] * rec.k[..., None, :]
                meter.release()
            else:
                W_cur = rec.W_prev
                rec.W_prev = None
                meter.release()          # W_t no longer needed
        if reversible:
            tape.reconstructed_W0 = W_cur
    tape.peak_buffers = meter.peak
    loss = float(np.sum(d_ys * tape.ys))
    return GradBundle(grads, loss=loss, d_xs=d_xs, d_state0=d_state, inner=inner)


def _backward_checkpointed(params, tape, d_ys, d_state, grads, d_xs, inner):
    fast = params.kind.has_fast_weights
    starts = sorted(tape.checkpoints)
    n_ckpt = sum(tape.checkpoints[s].W is not None for s in starts)
    meter = BufferMeter(n_ckpt)
    # the final state is recomputed with the last segment
    tape.final_state = CellState()
    T = tape.T
    for i in range(len(starts) - 1, -1, -1):
        start = starts[i]
        stop = starts[i + 1] if i + 1 < len(starts) else T
        state = tape.checkpoints.pop(start)
        local = []
        for t in range(start, stop):
            state, _, rec = forward_step(params, state, tape.xs[t], beta=tape.beta, keep_prev=True)
            local.append(rec)
            if fast:
                meter.acquire()
        W_cur = state.W
        for j in range(len(local) - 1, -1, -1):
            rec = local[j]
            t = start + j
            info = {} if inner is not None else None
            d_state, d_xs[t] = step_backward(params, rec, d_ys[t], d_state, grads, W=W_cur, inner=info)
            if inner is not None:
                inner[t] = info
            W_cur = rec.W_prev
            if fast:
                meter.release()
        if fast:
            meter.release()              # the segment's checkpoint
    return d_state, meter


def peak_weight_buffers(tape: Tape) -> int:
    """Peak number of fast-weight buffers alive during the backward walk."""
    if tape.peak_buffers is None:
        raise RuntimeError("run the backward pass before asking for its peak buffer count")
    return tape.peak_buffers


# -- oracles -----------------------------------------------------------------

def sequence_outputs(params: CellParams, xs, *, beta=None) -> np.ndarray:
    """Forward-only rollout, no tape."""
    xs = _as_sequence(params, xs)
    state = initial_state(params.config, xs.shape[1:-1])
    ys = []
    for x in xs:
        state, y, _ = forward_step(params, state, x, beta=beta, keep_prev=False)
        ys.append(y)
    return np.stack(ys)


def finite_diff_grad(params: CellParams, xs, loss_fn: Callable[[np.ndarray], float],
                     h: float = 1e-5, *, beta=None) -> GradBundle:
    """Central differences of ``loss_fn(ys)`` for every parameter coordinate."""
    if h <= 0:
        raise ValueError("step h must be positive")
    grads = params.zeros_like()
    probe = params.copy()
    for name, arr in probe.named().items():
        g = getattr(grads, name)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_fn(sequence_outputs(probe, xs, beta=beta))
            arr[idx] = orig - h
            down = loss_fn(sequence_outputs(probe, xs, beta=beta))
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
    return GradBundle(grads, loss=float(loss_fn(sequence_outputs(params, xs, beta=beta))))


def max_rel_err(a: CellParams, b: CellParams) -> float:
    """max_i |a_i - b_i| / max(max|a|, max|b|, 1e-8) over all parameter coordinates."""
    fa, fb = a.flat(), b.flat()
    scale = max(np.max(np.abs(fa)), np.max(np.abs(fb)), 1e-8)
    return float(np.max(np.abs(fa - fb)) / scale)


@dataclass
class GradcheckResult:
    kind: CellKind
    seed: int
    T: int
    max_rel_err: float


def gradcheck(kind, d_in: int, d_out: int, T: int, seed: int, h: float = 1e-5,
              strategy: Optional[Strategy] = None) -> GradcheckResult:
    """Analytic backward vs central differences on a random linear probe of the outputs."""
    from .cells import CellConfig, init_params

    if T < 1:
        raise EmptySequence("T must be at least 1")
    rng = np.random.default_rng(seed)
    params = init_params(CellConfig(kind, d_in, d_out), rng)
    xs = rng.uniform(-1.0, 1.0, size=(T, d_in))
    probe = rng.normal(size=(T, d_out))
    _, tape = run_forward(params, xs, strategy)
    analytic = run_backward(params, tape, probe).d_params
    numeric = finite_diff_grad(params, xs, lambda ys: float(np.sum(probe * ys)), h).d_params
    return GradcheckResult(CellKind.parse(kind), seed, T, max_rel_err(analytic, numeric))
