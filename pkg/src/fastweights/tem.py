"""Simplified Tolman-Eichenbaum Machine written as a fast weight programmer.

Grid-cell activity is driven only by actions::

    g_t = sigma(W[a_t] g_{t-1})

and the next observation is predicted from a sensory weight matrix that is
written once per step::

    S_t = S_{t-1} + alpha x_t g_t^T,   S_0 = 0
    y_t = S_t g_t

The oracle path never touches ``S``: it keeps the columns ``X_t = [x_1..x_t]``
and ``G_t = [g_1..g_t]`` and evaluates ``alpha X_t G_t^T g_t`` directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import linalg
from .errors import ActionOutOfRange, ShapeMismatch
from .linalg import Activation


@dataclass
class TemParams:
    action_weights: np.ndarray          # (n_actions, d_pos, d_pos)
    alpha: float
    g0: np.ndarray
    sigma: Activation = Activation.TANH

    def __post_init__(self):
        self.action_weights = np.asarray(self.action_weights, dtype=np.float64)
        self.g0 = np.asarray(self.g0, dtype=np.float64)
        self.sigma = Activation.parse(self.sigma)
        if self.action_weights.ndim != 3 or self.action_weights.shape[1] != self.action_weights.shape[2]:
            raise ShapeMismatch(f"action weights must be (n_actions, d_pos, d_pos), got {self.action_weights.shape}")
        if self.action_weights.shape[0] < 1:
            raise ShapeMismatch("need at least one action")
        if self.g0.shape != (self.d_pos,):
            raise ShapeMismatch(f"g0 must have shape {(self.d_pos,)}, got {self.g0.shape}")

    @property
    def n_actions(self) -> int:
        return self.action_weights.shape[0]

    @property
    def d_pos(self) -> int:
        return self.action_weights.shape[1]


def default_alpha(d_pos: int) -> float:
    return 1.0 / np.sqrt(d_pos)


@dataclass
class TemState:
    g: np.ndarray
    S: np.ndarray                       # (d_in, d_pos) sensory fast weights
    X: Optional[list] = None            # oracle mode only
    G: Optional[list] = None

    @property
    def keeps_history(self) -> bool:
        return self.X is not None


def initial_tem_state(params: TemParams, d_in: int, history: bool = False) -> TemState:
    return TemState(g=params.g0.copy(), S=np.zeros((d_in, params.d_pos)),
                    X=[] if history else None, G=[] if history else None)


@dataclass
class Trajectory:
    observations: np.ndarray            # (T, d_in)
    actions: np.ndarray                 # (T,) ints

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.observations.ndim != 2:
            raise ShapeMismatch(f"observations must be (T, d_in), got {self.observations.shape}")
        if len(self.actions) != len(self.observations):
            raise ShapeMismatch("observations and actions must have equal length")

    def __len__(self) -> int:
        return len(self.actions)


def _grid_step(params: TemParams, g_prev: np.ndarray, a: int):
    if not 0 <= int(a) < params.n_actions:
        raise ActionOutOfRange(f"action {a} outside [0, {params.n_actions})")
    u = linalg.matvec(params.action_weights[int(a)], g_prev)
    return u, linalg.activate(params.sigma, u)


def _check_obs(state: TemState, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (state.S.shape[0],):
        raise ShapeMismatch(f"observation must have shape {(state.S.shape[0],)}, got {x.shape}")
    return x


def tem_step(params: TemParams, state: TemState, x, a: int) -> tuple[TemState, np.ndarray]:
    x = _check_obs(state, x)
    _, g = _grid_step(params, state.g, a)
    S = state.S + params.alpha * linalg.outer(x, g)
    y = linalg.matvec(S, g)
    new = TemState(g=g, S=S, X=state.X, G=state.G)
    if state.keeps_history:
        new.X = state.X + [x]
        new.G = state.G + [g]
    return new, y


def tem_oracle_step(params: TemParams, state: TemState, x, a: int) -> tuple[TemState, np.ndarray]:
    """Readout ``alpha X_t G_t^T g_t`` from the explicit column matrices."""
    if not state.keeps_history:
        raise ValueError("oracle step needs a state created with history=True")
    x = _check_obs(state, x)
    _, g = _grid_step(params, state.g, a)
    X = np.stack(state.X + [x], axis=1)      # (d_in, t)
    G = np.stack(state.G + [g], axis=1)      # (d_pos, t)
    y = params.alpha * (X @ (G.T @ g))
    return TemState(g=g, S=state.S, X=state.X + [x], G=state.G + [g]), y


@dataclass
class Rollout:
    predictions: np.ndarray             # (T, d_in)
    errors: np.ndarray                  # (T-1,)  ||y_t - x_{t+1}||^2
    grid: np.ndarray                    # (T, d_pos)
    final_state: TemState


def tem_rollout(params: TemParams, traj: Trajectory, *, oracle: bool = False) -> Rollout:
    d_in = traj.observations.shape[1]
    state = initial_tem_state(params, d_in, history=oracle)
    step = tem_oracle_step if oracle else tem_step
    ys, gs = [], []
    for x, a in zip(traj.observations, traj.actions):
        state, y = step(params, state, x, a)
        ys.append(y)
        gs.append(state.g)
    ys = np.stack(ys)
    errors = np.sum((ys[:-1] - traj.observations[1:]) ** 2, axis=1)
    return Rollout(ys, errors, np.stack(gs), state)


def equivalence_max_diff(params: TemParams, traj: Trajectory) -> float:
    fast = tem_rollout(params, traj).predictions
    concat = tem_rollout(params, traj, oracle=True).predictions
    return float(np.max(np.abs(fast - concat)))


def rollout_grad(params: TemParams, traj: Trajectory) -> tuple[float, np.ndarray, float]:
    """Gradient of the summed next-step squared error.

    Returns ``(loss, d_action_weights, d_alpha)``. Every step is cached
    (TEM tapes are tiny), then walked backwards.
    """
    xs, acts = traj.observations, traj.actions
    T, d_in = xs.shape
    g_prev, S = params.g0, np.zeros((d_in, params.d_pos))
    us, gs, Ss, gps = [], [], [], []
    for t in range(T):
        u, g = _grid_step(params, g_prev, acts[t])
        S = S + params.alpha * np.outer(xs[t], g)
        us.append(u); gs.append(g); Ss.append(S); gps.append(g_prev)
        g_prev = g
    ys = np.stack([Ss[t] @ gs[t] for t in range(T)])
    resid = ys[:-1] - xs[1:]
    loss = float(np.sum(resid ** 2))

    dWa = np.zeros_like(params.action_weights)
    d_alpha = 0.0
    dS = np.zeros((d_in, params.d_pos))
    dg_next = np.zeros(params.d_pos)
    for t in range(T - 1, -1, -1):
        dy = 2 * resid[t] if t < T - 1 else np.zeros(d_in)
        dS = dS + np.outer(dy, gs[t])
        dg = Ss[t].T @ dy + params.alpha * (dS.T @ xs[t]) + dg_next
        d_alpha += float(xs[t] @ dS @ gs[t])
        du = linalg.activate_vjp(params.sigma, us[t], dg)
        dWa[acts[t]] += np.outer(du, gps[t])
        dg_next = params.action_weights[acts[t]].T @ du
    return loss, dWa, d_alpha


def random_tem(seed: int, d_in: int, d_pos: int, T: int, n_actions: int = 4,
               sigma: Activation | str = Activation.TANH, alpha: Optional[float] = None):
    """Seeded parameters (orthogonal action matrices, unit g0) and a random trajectory."""
    rng = np.random.default_rng(seed)
    mats = []
    for _ in range(n_actions):
        q, r = np.linalg.qr(rng.normal(size=(d_pos, d_pos)))
        mats.append(q * np.sign(np.diag(r)))
    g0 = rng.normal(size=d_pos)
    g0 /= np.linalg.norm(g0)
    params = TemParams(np.stack(mats), default_alpha(d_pos) if alpha is None else alpha, g0, sigma)
    traj = Trajectory(rng.uniform(-1.0, 1.0, size=(T, d_in)), rng.integers(0, n_actions, size=T))
    return params, traj


# -- files --------------------------------------------------------------------

def write_trajectory(path, traj: Trajectory) -> None:
    with open(path, "w") as fh:
        for x, a in zip(traj.observations, traj.actions):
            fh.write(json.dumps({"x": [float(v) for v in x], "a": int(a)}) + "\n")


def read_trajectory(path) -> Trajectory:
    xs, acts = [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        xs.append(obj["x"])
        acts.append(obj["a"])
    if not xs:
        raise ShapeMismatch(f"trajectory file {path} is empty")
    return Trajectory(np.array(xs, dtype=np.float64), np.array(acts))


def rollout_report(params: TemParams, traj: Trajectory) -> dict:
    ro = tem_rollout(params, traj)
    return {
        "T": len(traj),
        "d_in": int(traj.observations.shape[1]),
        "d_pos": params.d_pos,
        "mse_per_step": [float(e) / traj.observations.shape[1] for e in ro.errors],
        "equivalence_max_diff": equivalence_max_diff(params, traj),
    }
