"""Unnormalised linear attention and its fast-weight dual.

Both forms share the slow projection ``A`` (keys in the first ``d_in`` rows,
values in the next ``d_out``) and an optional query projection ``Q``.

* attention form: y_t = sigma( sum_{tau<=t} (k_tau . q_t) v_tau ),  O(t) per step
* fast-weight form: W_t = W_{t-1} + v_t k_t^T,  y_t = sigma(W_t q_t),  O(d^2) per step

Flop counts are analytic tallies kept per call site (a multiply-add is two
flops), not hardware counters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import linalg
from .errors import ShapeMismatch
from .linalg import Activation


@dataclass
class AttnParams:
    A: np.ndarray
    Q: Optional[np.ndarray] = None
    sigma: Activation = Activation.IDENTITY

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.sigma = Activation.parse(self.sigma)
        rows, d_in = self.A.shape
        if rows <= d_in:
            raise ShapeMismatch(f"A must have more than d_in={d_in} rows, got {rows}")
        if self.Q is not None:
            self.Q = np.asarray(self.Q, dtype=np.float64)
            if self.Q.shape != (d_in, d_in):
                raise ShapeMismatch(f"Q must be {(d_in, d_in)}, got {self.Q.shape}")

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.A.shape[0] - self.A.shape[1]


@dataclass
class KVCache:
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.keys)


@dataclass
class FlopCounter:
    flops: int = 0

    def add(self, n: int):
        self.flops += int(n)


def _project(params: AttnParams, x: np.ndarray, counter: Optional[FlopCounter]):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.d_in,):
        raise ShapeMismatch(f"x must have shape {(params.d_in,)}, got {x.shape}")
    out = linalg.matvec(params.A, x)
    k, v = out[:params.d_in], out[params.d_in:]
    q = x if params.Q is None else linalg.matvec(params.Q, x)
    if counter is not None:
        counter.add(2 * params.A.size + (0 if params.Q is None else 2 * params.Q.size))
    return k, v, q


def attn_form_step(params: AttnParams, cache: KVCache, x, counter: Optional[FlopCounter] = None):
    """Append this step's key/value to ``cache`` and read out with the query.

    The cache is owned by the caller and is extended in place.
    """
    k, v, q = _project(params, x, counter)
    cache.keys.append(k)
    cache.values.append(v)
    keys = np.stack(cache.keys)
    values = np.stack(cache.values)
    scores = keys @ q
    z = scores @ values
    if counter is not None:
        t = len(cache)
        counter.add(2 * t * params.d_in + 2 * t * params.d_out)
    return cache, linalg.activate(params.sigma, z)


def fwp_form_step(params: AttnParams, W_prev: np.ndarray, x, counter: Optional[FlopCounter] = None):
    """Fast-weight form of the same layer, with ``W_t q_t`` readout."""
    k, v, q = _project(params, x, counter)
    W = W_prev + linalg.outer(v, k)
    z = linalg.matvec(W, q)
    if counter is not None:
        counter.add(2 * W.size + 2 * W.size)   # rank-1 write, then readout
    return W, linalg.activate(params.sigma, z)


def attn_form(params: AttnParams, xs, counter: Optional[FlopCounter] = None) -> np.ndarray:
    cache = KVCache()
    ys = []
    for x in xs:
        cache, y = attn_form_step(params, cache, x, counter)
        ys.append(y)
    return np.stack(ys)


def fwp_form(params: AttnParams, xs, counter: Optional[FlopCounter] = None) -> np.ndarray:
    W = np.zeros((params.d_out, params.d_in))
    ys = []
    for x in xs:
        W, y = fwp_form_step(params, W, x, counter)
        ys.append(y)
    return np.stack(ys)


@dataclass
class DualReport:
    max_abs_diff: float
    passed: bool
    flops_attn: int
    flops_fwp: int
    T: int


def dual_form_check(A, Q, xs, tol: float, sigma: Activation | str = Activation.IDENTITY) -> DualReport:
    """Run both forms on ``xs`` and compare outputs in the max norm."""
    params = AttnParams(A, Q, sigma)
    xs = np.asarray(xs, dtype=np.float64)
    c_attn, c_fwp = FlopCounter(), FlopCounter()
    y_attn = attn_form(params, xs, c_attn)
    y_fwp = fwp_form(params, xs, c_fwp)
    diff = float(np.max(np.abs(y_attn - y_fwp))) if len(xs) else 0.0
    return DualReport(diff, diff <= tol, c_attn.flops, c_fwp.flops, len(xs))


def random_instance(seed: int, T: int, d: int, with_query: bool = True):
    """Seeded (A, Q, xs) with d_in = d_out = d and inputs uniform in [-1, 1]."""
    rng = np.random.default_rng(seed)
    A = rng.uniform(-1.0, 1.0, size=(2 * d, d)) / np.sqrt(d)
    Q = rng.uniform(-1.0, 1.0, size=(d, d)) / np.sqrt(d) if with_query else None
    xs = rng.uniform(-1.0, 1.0, size=(T, d))
    return A, Q, xs
