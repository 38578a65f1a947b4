"""Sequence cells as pure step functions with exact reverse-mode steps.

Each cell maps ``(params, state, x_t) -> (state', y_t)``. Five kinds:

* ``feedforward``  y = sigma(W x)
* ``elman``        h = sigma(W x + R h_prev), y = h
* ``additive``     [k, v] = A x;  W_t = W_{t-1} + v k^T;  y = sigma(W_t x)
* ``delta``        as additive, with a gated error-correcting write
                   W_t = W_{t-1} + beta (v - W_{t-1} k) k^T, unit-norm k
* ``hybrid``       delta whose slow net reads [x_t, y_{t-1}]

Rows of the slow weight matrix ``A`` are laid out as ``[key | value | beta]``:
the first ``d_in`` rows produce the key, the next ``d_out`` the value, and
(delta/hybrid only) the final row the pre-sigmoid write strength.

Every function broadcasts over leading batch dimensions of ``x`` and the
state. Parameter gradients are summed over those dimensions.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace
from typing import BinaryIO, Optional

import numpy as np

from . import linalg
from .errors import RecordMismatch, ShapeMismatch
from .linalg import Activation

NORM_EPS = 1e-8
KEYMAP_EPS = 1e-6


class CellKind(str, enum.Enum):
    FEEDFORWARD = "feedforward"
    ELMAN = "elman"
    ADDITIVE = "additive"
    DELTA = "delta"
    HYBRID = "hybrid"

    @classmethod
    def parse(cls, value: "CellKind | str") -> "CellKind":
        if isinstance(value, CellKind):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"unknown cell kind {value!r}") from None

    @property
    def has_fast_weights(self) -> bool:
        return self in (CellKind.ADDITIVE, CellKind.DELTA, CellKind.HYBRID)

    @property
    def has_hidden(self) -> bool:
        return self in (CellKind.ELMAN, CellKind.HYBRID)

    @property
    def uses_beta(self) -> bool:
        return self in (CellKind.DELTA, CellKind.HYBRID)


class KeyMap(str, enum.Enum):
    """Feature map applied to keys and fast-net queries of FWP cells."""

    IDENTITY = "identity"
    RELU_L1 = "relu_l1"  # relu, then divide by the l1 norm


@dataclass(frozen=True)
class CellConfig:
    kind: CellKind
    d_in: int
    d_out: int
    sigma: Activation = Activation.TANH
    key_map: KeyMap = KeyMap.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "kind", CellKind.parse(self.kind))
        object.__setattr__(self, "sigma", Activation.parse(self.sigma))
        object.__setattr__(self, "key_map", KeyMap(self.key_map))
        if self.d_in < 1 or self.d_out < 1:
            raise ShapeMismatch(f"dimensions must be positive, got d_in={self.d_in} d_out={self.d_out}")
        if self.sigma is Activation.SOFTMAX:
            raise ValueError("softmax is a head activation and cannot be used inside a cell")

    def param_shapes(self) -> dict[str, tuple[int, int]]:
        d_in, d_out = self.d_in, self.d_out
        kind = self.kind
        if kind is CellKind.FEEDFORWARD:
            return {"W": (d_out, d_in)}
        if kind is CellKind.ELMAN:
            return {"W": (d_out, d_in), "R": (d_out, d_out)}
        if kind is CellKind.ADDITIVE:
            return {"A": (d_in + d_out, d_in)}
        if kind is CellKind.DELTA:
            return {"A": (d_in + d_out + 1, d_in)}
        return {"A": (d_in + d_out + 1, d_in + d_out)}


@dataclass
class CellParams:
    config: CellConfig
    W: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None

    def __post_init__(self):
        shapes = self.config.param_shapes()
        for name in ("W", "R", "A"):
            value = getattr(self, name)
            if name not in shapes:
                if value is not None:
                    raise ShapeMismatch(f"{self.config.kind.value} cell takes no {name} matrix")
                continue
            if value is None:
                raise ShapeMismatch(f"{self.config.kind.value} cell needs a {name} matrix")
            value = np.asarray(value, dtype=np.float64)
            if value.shape != shapes[name]:
                raise ShapeMismatch(f"{name} must have shape {shapes[name]}, got {value.shape}")
            setattr(self, name, value)

    @property
    def kind(self) -> CellKind:
        return self.config.kind

    def named(self) -> dict[str, np.ndarray]:
        """Present parameter matrices in canonical (W, R, A) order."""
        return {n: getattr(self, n) for n in ("W", "R", "A") if getattr(self, n) is not None}

    def zeros_like(self) -> "CellParams":
        return replace(self, **{n: np.zeros_like(a) for n, a in self.named().items()})

    def copy(self) -> "CellParams":
        return replace(self, **{n: a.copy() for n, a in self.named().items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.named().values()])

    def __add__(self, other: "CellParams") -> "CellParams":
        return replace(self, **{n: a + getattr(other, n) for n, a in self.named().items()})


def init_params(config: CellConfig, rng: np.random.Generator) -> CellParams:
    """Uniform in +-1/sqrt(fan_in) for every matrix."""
    arrays = {}
    for name, (rows, cols) in config.param_shapes().items():
        bound = 1.0 / np.sqrt(cols)
        arrays[name] = rng.uniform(-bound, bound, size=(rows, cols))
    return CellParams(config, **arrays)


@dataclass
class CellState:
    h: Optional[np.ndarray] = None
    W: Optional[np.ndarray] = None

    def num_floats(self) -> int:
        return sum(a.size for a in (self.h, self.W) if a is not None)


def initial_state(config: CellConfig, batch_shape: tuple[int, ...] = ()) -> CellState:
    """Zero activations and zero fast weights."""
    kind = config.kind
    h = np.zeros(batch_shape + (config.d_out,)) if kind.has_hidden else None
    W = np.zeros(batch_shape + (config.d_out, config.d_in)) if kind.has_fast_weights else None
    return CellState(h=h, W=W)


@dataclass
class StepRecord:
    """Forward intermediates of one step, enough for its exact VJP."""

    kind: CellKind
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    h_prev: Optional[np.ndarray] = None
    W_prev: Optional[np.ndarray] = None
    k_pre: Optional[np.ndarray] = None
    k_phi: Optional[np.ndarray] = None
    k_norm: Optional[np.ndarray] = None
    k: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    beta_forced: bool = False
    q: Optional[np.ndarray] = None


# -- feature map ------------------------------------------------------------

def key_map_apply(kind: KeyMap, u: np.ndarray) -> np.ndarray:
    if kind is KeyMap.IDENTITY:
        return u
    r = np.maximum(u, 0.0)
    return r / (r.sum(axis=-1, keepdims=True) + KEYMAP_EPS)


def key_map_vjp(kind: KeyMap, u: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if kind is KeyMap.IDENTITY:
        return upstream
    r = np.maximum(u, 0.0)
    s = r.sum(axis=-1, keepdims=True) + KEYMAP_EPS
    phi = r / s
    dr = (upstream - np.sum(upstream * phi, axis=-1, keepdims=True)) / s
    return dr * (u > 0)


def _normalize(u: np.ndarray):
    n = np.maximum(np.linalg.norm(u, axis=-1, keepdims=True), NORM_EPS)
    return u / n, n


def _normalize_vjp(u: np.ndarray, n: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    unit = u / n
    proj = np.sum(unit * upstream, axis=-1, keepdims=True)
    # below the floor the norm is the constant eps
    active = n > NORM_EPS
    return np.where(active, (upstream - unit * proj) / n, upstream / n)


def _sum_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum over batch of a b^T."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _check_x(config: CellConfig, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 1 or x.shape[-1] != config.d_in:
        raise ShapeMismatch(f"input must end in dimension {config.d_in}, got shape {x.shape}")
    return x


# -- forward ----------------------------------------------------------------

def forward_step(params: CellParams, state: CellState, x: np.ndarray, *, beta=None,
                 keep_prev: bool = True) -> tuple[CellState, np.ndarray, StepRecord]:
    """One step of any cell kind.

    ``beta`` forces the write strength of delta/hybrid cells (test hook).
    With ``keep_prev=False`` the record does not reference ``W_{t-1}``;
    that is what lets reversible backprop drop the per-step snapshots.
    """
    cfg = params.config
    kind = cfg.kind
    x = _check_x(cfg, x)

    if kind is CellKind.FEEDFORWARD:
        z = linalg.matvec(params.W, x)
        y = linalg.activate(cfg.sigma, z)
        return CellState(), y, StepRecord(kind, x=x, z=z, y=y)

    if kind is CellKind.ELMAN:
        h_prev = _state_h(cfg, state)
        z = linalg.matvec(params.W, x) + linalg.matvec(params.R, h_prev)
        y = linalg.activate(cfg.sigma, z)
        return CellState(h=y), y, StepRecord(kind, x=x, z=z, y=y, h_prev=h_prev)

    W_prev = _state_W(cfg, state)
    d_in, d_out = cfg.d_in, cfg.d_out
    if kind is CellKind.HYBRID:
        h_prev = _state_h(cfg, state)
        h_b = np.broadcast_to(h_prev, x.shape[:-1] + (d_out,))
        slow_in = np.concatenate([x, h_b], axis=-1)
    else:
        h_prev = None
        slow_in = x
    out = linalg.matvec(params.A, slow_in)
    k_pre = out[..., :d_in]
    v = out[..., d_in:d_in + d_out]
    k_phi = key_map_apply(cfg.key_map, k_pre)
    q = key_map_apply(cfg.key_map, x)

    rec = StepRecord(kind, x=x, z=None, y=None, h_prev=h_prev, k_pre=k_pre, k_phi=k_phi, v=v, q=q)
    if kind is CellKind.ADDITIVE:
        k = k_phi
        W = W_prev + linalg.outer(v, k)
    else:
        k, k_norm = _normalize(k_phi)
        rec.k_norm = k_norm
        if beta is None:
            b = linalg.sigmoid(out[..., -1:])
        else:
            b = np.broadcast_to(np.asarray(beta, dtype=np.float64), x.shape[:-1] + (1,)).copy()
            rec.beta_forced = True
        rec.beta = b
        v_old = linalg.matvec(W_prev, k)
        W = W_prev + linalg.outer(b * (v - v_old), k)
    rec.k = k
    z = linalg.matvec(W, q)
    y = linalg.activate(cfg.sigma, z)
    rec.z, rec.y = z, y
    if keep_prev:
        rec.W_prev = W_prev
    new_state = CellState(h=y if kind is CellKind.HYBRID else None, W=W)
    return new_state, y, rec


def _state_h(cfg: CellConfig, state: CellState) -> np.ndarray:
    if state.h is None:
        raise ShapeMismatch(f"{cfg.kind.value} cell needs an activation state")
    if state.h.shape[-1] != cfg.d_out:
        raise ShapeMismatch(f"hidden state must end in {cfg.d_out}, got {state.h.shape}")
    return state.h


def _state_W(cfg: CellConfig, state: CellState) -> np.ndarray:
    if state.W is None:
        raise ShapeMismatch(f"{cfg.kind.value} cell needs a fast weight state")
    if state.W.shape[-2:] != (cfg.d_out, cfg.d_in):
        raise ShapeMismatch(f"fast weights must end in {(cfg.d_out, cfg.d_in)}, got {state.W.shape}")
    return state.W


def _require(params: CellParams, kind: CellKind):
    if params.kind is not kind:
        raise ShapeMismatch(f"expected {kind.value} params, got {params.kind.value}")


def step_feedforward(params: CellParams, x):
    _require(params, CellKind.FEEDFORWARD)
    return forward_step(params, CellState(), x)[1]


def step_elman(params: CellParams, h_prev, x):
    _require(params, CellKind.ELMAN)
    state, y, _ = forward_step(params, CellState(h=np.asarray(h_prev, dtype=np.float64)), x)
    return state.h, y


def step_additive_fwp(params: CellParams, W_prev, x):
    _require(params, CellKind.ADDITIVE)
    state, y, _ = forward_step(params, CellState(W=np.asarray(W_prev, dtype=np.float64)), x)
    return state.W, y


def step_delta_fwp(params: CellParams, W_prev, x, *, beta=None):
    _require(params, CellKind.DELTA)
    state, y, _ = forward_step(params, CellState(W=np.asarray(W_prev, dtype=np.float64)), x, beta=beta)
    return state.W, y


def step_hybrid_fwp(params: CellParams, state: CellState, x, *, beta=None):
    _require(params, CellKind.HYBRID)
    new_state, y, _ = forward_step(params, state, x, beta=beta)
    return new_state, y


# -- backward ---------------------------------------------------------------

def step_backward(params: CellParams, record: StepRecord, d_y: np.ndarray,
                  d_state_out: Optional[CellState], grads: CellParams, *,
                  W: Optional[np.ndarray] = None, W_prev: Optional[np.ndarray] = None,
                  inner: Optional[dict] = None) -> tuple[CellState, np.ndarray]:
    """Reverse-mode step: returns ``(d_state_in, d_x)`` and adds into ``grads``.

    ``W`` (the post-write fast weights) is needed whenever the readout
    gradient flows into the query; ``W_prev`` overrides the record's
    snapshot for strategies that reconstruct it; the additive rule never
    reads ``W_{t-1}`` here, so reversible backprop can rebuild it after
    this call. If ``inner`` is a dict it
    receives the cotangents of the key, value and write strength.
    """
    cfg = params.config
    kind = cfg.kind
    if record.kind is not kind:
        raise RecordMismatch(f"record is for a {record.kind.value} cell, params are {kind.value}")
    d_state_out = d_state_out or CellState()

    if kind is CellKind.FEEDFORWARD:
        dz = linalg.activate_vjp(cfg.sigma, record.z, d_y)
        grads.W += _sum_outer(dz, record.x)
        return CellState(), linalg.rmatvec(params.W, dz)

    if kind is CellKind.ELMAN:
        dh = d_y if d_state_out.h is None else d_y + d_state_out.h
        dz = linalg.activate_vjp(cfg.sigma, record.z, dh)
        grads.W += _sum_outer(dz, record.x)
        h_prev = np.broadcast_to(record.h_prev, dz.shape)
        grads.R += _sum_outer(dz, h_prev)
        d_h_prev = linalg.rmatvec(params.R, dz)
        if record.h_prev.ndim < d_h_prev.ndim:
            d_h_prev = d_h_prev.reshape(-1, cfg.d_out).sum(axis=0)
        return CellState(h=d_h_prev), linalg.rmatvec(params.W, dz)

    # fast-weight kinds
    if W_prev is None:
        W_prev = record.W_prev
    if W is None or (W_prev is None and kind is not CellKind.ADDITIVE):
        raise RecordMismatch("fast-weight backward needs W_t (and W_{t-1} for gated writes)")
    d_in, d_out = cfg.d_in, cfg.d_out
    dy = d_y
    if kind is CellKind.HYBRID and d_state_out.h is not None:
        dy = dy + d_state_out.h
    dz = linalg.activate_vjp(cfg.sigma, record.z, dy)
    dW = linalg.outer(dz, record.q)
    if d_state_out.W is not None:
        dW = dW + d_state_out.W
    dq = linalg.rmatvec(W, dz)
    d_x = key_map_vjp(cfg.key_map, record.x, dq)

    k, v = record.k, record.v
    if kind is CellKind.ADDITIVE:
        dk = linalg.rmatvec(dW, v)
        dv = linalg.matvec(dW, k)
        d_W_prev = dW
        d_k_phi = dk
        d_beta_pre = None
        if inner is not None:
            inner.update(k=dk, v=dv, beta=None)
    else:
        b = record.beta
        v_old = linalg.matvec(W_prev, k)
        u = b * (v - v_old)
        du = linalg.matvec(dW, k)
        dk = linalg.rmatvec(dW, u)
        dv = b * du
        d_v_old = -dv
        d_beta = np.sum(du * (v - v_old), axis=-1, keepdims=True)
        d_W_prev = dW + linalg.outer(d_v_old, k)
        dk = dk + linalg.rmatvec(W_prev, d_v_old)
        d_k_phi = _normalize_vjp(record.k_phi, record.k_norm, dk)
        d_beta_pre = None if record.beta_forced else d_beta * b * (1.0 - b)
        if inner is not None:
            inner.update(k=dk, v=dv, beta=d_beta)
    d_k_pre = key_map_vjp(cfg.key_map, record.k_pre, d_k_phi)

    parts = [d_k_pre, dv]
    if kind.uses_beta:
        parts.append(np.zeros_like(dv[..., :1]) if d_beta_pre is None else d_beta_pre)
    d_out_slow = np.concatenate(parts, axis=-1)
    if kind is CellKind.HYBRID:
        h_b = np.broadcast_to(record.h_prev, record.x.shape[:-1] + (d_out,))
        slow_in = np.concatenate([record.x, h_b], axis=-1)
    else:
        slow_in = record.x
    grads.A += _sum_outer(d_out_slow, slow_in)
    d_slow_in = linalg.rmatvec(params.A, d_out_slow)
    d_x = d_x + d_slow_in[..., :d_in]
    d_h_prev = None
    if kind is CellKind.HYBRID:
        d_h_prev = d_slow_in[..., d_in:]
        if record.h_prev.ndim < d_h_prev.ndim:
            d_h_prev = d_h_prev.reshape(-1, d_out).sum(axis=0)
    return CellState(h=d_h_prev, W=d_W_prev), d_x


# -- checkpoint files ---------------------------------------------------------
#
# magic "FWPC" | u8 kind | u8 sigma | u8 key map | u8 reserved | u64 d_in | u64 d_out
# followed by the present matrices in W, R, A order (linalg binary format).

_CKPT = struct.Struct("<4sBBBBQQ")
_KIND_TAGS = {k: i for i, k in enumerate(CellKind)}
_ACT_TAGS = {a: i for i, a in enumerate(Activation)}
_KEYMAP_TAGS = {m: i for i, m in enumerate(KeyMap)}


def save_params(fh: BinaryIO, params: CellParams) -> None:
    cfg = params.config
    fh.write(_CKPT.pack(b"FWPC", _KIND_TAGS[cfg.kind], _ACT_TAGS[cfg.sigma],
                        _KEYMAP_TAGS[cfg.key_map], 0, cfg.d_in, cfg.d_out))
    for arr in params.named().values():
        linalg.write_matrix(fh, arr)


def load_params(fh: BinaryIO) -> CellParams:
    head = fh.read(_CKPT.size)
    if len(head) != _CKPT.size:
        raise EOFError("truncated cell checkpoint header")
    magic, kind, act, kmap, _, d_in, d_out = _CKPT.unpack(head)
    if magic != b"FWPC":
        raise ValueError(f"not a cell checkpoint (magic {magic!r})")
    config = CellConfig(list(CellKind)[kind], d_in, d_out, list(Activation)[act], list(KeyMap)[kmap])
    arrays = {name: linalg.read_matrix(fh) for name in config.param_shapes()}
    return CellParams(config, **arrays)
