"""Minimal training loop for cells on the synthetic tasks.

Model: token features ``[one_hot(tok_t), one_hot(tok_{t-1})]`` -> cell ->
linear head -> softmax cross-entropy on the masked positions. Minibatches are
stepped together through the batched cell functions.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import bptt, cells, linalg, tasks
from .cells import CellConfig, CellKind, CellParams
from .errors import EmptyMask, NonFiniteGradient, ShapeMismatch

log = logging.getLogger(__name__)


# -- loss ----------------------------------------------------------------------

def loss_ce_masked(logits, targets, mask) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over masked positions and its cotangent.

    ``logits`` is ``(..., V)``; ``targets`` and ``mask`` match its leading
    shape.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ShapeMismatch(f"logits {logits.shape}, targets {targets.shape}, mask {mask.shape} do not align")
    n = int(mask.sum())
    if n == 0:
        raise EmptyMask("no scored positions in mask")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-np.sum(picked[mask]) / n)
    d = np.exp(logp)
    np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], axis=-1) - 1.0, axis=-1)
    d *= mask[..., None] / n
    return loss, d


def masked_accuracy(logits, targets, mask) -> float:
    pred = np.argmax(logits, axis=-1)
    mask = np.asarray(mask, dtype=bool)
    return float(np.mean(pred[mask] == np.asarray(targets)[mask]))


# -- optimizers ------------------------------------------------------------------

@dataclass
class OptimState:
    kind: str = "adam"           # "sgd" or "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = 1.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))


def clip_grads(grads: dict, clip_norm: Optional[float]) -> tuple[dict, float]:
    """Rescale to ``clip_norm`` when the global norm exceeds it. Returns the pre-clip norm."""
    norm = global_norm(grads)
    if clip_norm and norm > clip_norm:
        scale = clip_norm / norm
        grads = {n: g * scale for n, g in grads.items()}
    return grads, norm


def opt_step(optim: OptimState, params: dict, grads: dict) -> dict:
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise ShapeMismatch(f"gradient {name} does not match any parameter")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    grads, _ = clip_grads(grads, optim.clip_norm)
    optim.step += 1
    new = {}
    for name, p in params.items():
        g = grads[name]
        if optim.kind == "sgd":
            new[name] = p - optim.lr * g
            continue
        m = optim.m.get(name, np.zeros_like(p))
        v = optim.v.get(name, np.zeros_like(p))
        m = optim.beta1 * m + (1 - optim.beta1) * g
        v = optim.beta2 * v + (1 - optim.beta2) * g * g
        optim.m[name], optim.v[name] = m, v
        m_hat = m / (1 - optim.beta1 ** optim.step)
        v_hat = v / (1 - optim.beta2 ** optim.step)
        new[name] = p - optim.lr * m_hat / (np.sqrt(v_hat) + optim.eps)
    return new


# -- model -------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 1000
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 32
    d_hidden: int = 32
    sigma: str = "identity"
    key_map: str = "identity"
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 100
    eval_every: int = 500
    eval_size: int = 256
    target_acc: Optional[float] = None   # stop once held-out accuracy reaches this
    strategy: Optional[str] = None


class SequenceModel:
    """Cell plus linear readout head over the token features."""

    def __init__(self, cell: CellParams, head: np.ndarray, vocab_size: int):
        self.cell = cell
        self.head = np.asarray(head, dtype=np.float64)
        self.vocab_size = vocab_size

    @classmethod
    def init(cls, kind, vocab_size: int, d_hidden: int, rng: np.random.Generator,
             sigma="identity", key_map="identity") -> "SequenceModel":
        config = CellConfig(kind, 2 * vocab_size, d_hidden, sigma, key_map)
        cell = cells.init_params(config, rng)
        bound = 1.0 / np.sqrt(d_hidden)
        head = rng.uniform(-bound, bound, size=(vocab_size, d_hidden))
        return cls(cell, head, vocab_size)

    def param_dict(self) -> dict:
        out = {f"cell.{n}": a for n, a in self.cell.named().items()}
        out["head"] = self.head
        return out

    def load_dict(self, params: dict):
        for n in self.cell.named():
            setattr(self.cell, n, params[f"cell.{n}"])
        self.head = params["head"]

    def logits(self, inputs) -> np.ndarray:
        xs = tasks.encode_inputs(inputs, self.vocab_size)
        ys = bptt.sequence_outputs(self.cell, xs)
        return ys @ self.head.T

    def loss_and_grads(self, inputs, targets, mask, strategy=None):
        """Returns ``(loss, acc, grads)``; arrays are batch-major ``(B, T)``."""
        xs = tasks.encode_inputs(inputs, self.vocab_size)
        ys, tape = bptt.run_forward(self.cell, xs, strategy)
        logits = ys @ self.head.T
        t_major = np.swapaxes(targets, 0, -1), np.swapaxes(mask, 0, -1)
        loss, d_logits = loss_ce_masked(logits, *t_major)
        acc = masked_accuracy(logits, *t_major)
        d_head = d_logits.reshape(-1, self.vocab_size).T @ ys.reshape(-1, ys.shape[-1])
        d_ys = d_logits @ self.head
        bundle = bptt.run_backward(self.cell, tape, d_ys)
        grads = {f"cell.{n}": g for n, g in bundle.d_params.named().items()}
        grads["head"] = d_head
        return loss, acc, grads

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in self.param_dict().values():
            h.update(linalg.matrix_to_bytes(a))
        return h.hexdigest()

    def save(self, path):
        path = Path(path)
        with open(path, "wb") as fh:
            cells.save_params(fh, self.cell)
            linalg.write_matrix(fh, self.head)


def load_model(path, vocab_size: int) -> SequenceModel:
    with open(path, "rb") as fh:
        cell = cells.load_params(fh)
        head = linalg.read_matrix(fh)
    return SequenceModel(cell, head, vocab_size)


@dataclass
class TrainReport:
    cell: str
    task: str
    seed: int
    metrics: list = field(default_factory=list)   # {step, loss, acc, grad_norm, secs}
    evals: list = field(default_factory=list)     # {step, acc}
    steps_run: int = 0
    final_eval_acc: Optional[float] = None
    reached_target_at: Optional[int] = None
    checksum: str = ""

    @property
    def losses(self) -> list[float]:
        return [m["loss"] for m in self.metrics]

    def to_dict(self) -> dict:
        return asdict(self)


def _eval_set(spec: tasks.TaskSpec, n: int):
    # held-out stream: a different seed than training batches
    rng = tasks.SplitMix64(spec.seed ^ 0x5EED5EED5EED5EED)
    return tasks.batch_arrays(tasks.generate(spec, n, rng))


def evaluate(model: SequenceModel, data) -> float:
    inputs, targets, mask = data
    logits = model.logits(inputs)
    return masked_accuracy(logits, targets.T, mask.T)


def train_run(kind, spec: tasks.TaskSpec, cfg: TrainConfig, seed: int, *,
              out_dir=None) -> TrainReport:
    """Train from a seeded initialisation; deterministic given (spec, cfg, seed).

    Step 0 is logged before the first update, so ``steps=0`` reports the
    initial loss only. When ``out_dir`` is given, writes ``metrics.jsonl``,
    ``report.json`` and ``model.ckpt`` there.
    """
    kind = CellKind.parse(kind)
    spec = spec.validate()
    rng = np.random.default_rng(seed)
    model = SequenceModel.init(kind, spec.vocab_size, cfg.d_hidden, rng, cfg.sigma, cfg.key_map)
    optim = OptimState(cfg.optimizer, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip_norm)
    strategy = bptt.Strategy.parse(cfg.strategy) if cfg.strategy else None
    data_rng = tasks.SplitMix64((spec.seed << 20) ^ seed)
    eval_data = _eval_set(spec, cfg.eval_size)
    report = TrainReport(kind.value, spec.kind, seed)
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "w")
    t0 = time.perf_counter()
    params = model.param_dict()
    try:
        step = 0
        while True:
            batch = tasks.batch_arrays(tasks.generate(spec, cfg.batch_size, data_rng))
            loss, acc, grads = model.loss_and_grads(*batch, strategy=strategy)
            if not np.isfinite(loss):
                raise NonFiniteGradient(f"loss became {loss} at step {step}")
            norm = global_norm(grads)
            if step % cfg.log_every == 0 or step == cfg.steps:
                entry = {"step": step, "loss": loss, "acc": acc, "grad_norm": norm,
                         "secs": time.perf_counter() - t0}
                report.metrics.append(entry)
                if metrics_fh:
                    metrics_fh.write(json.dumps(entry) + "\n")
            if step >= cfg.steps:
                break
            params = opt_step(optim, params, grads)
            model.load_dict(params)
            step += 1
            if step % cfg.eval_every == 0:
                ev = evaluate(model, eval_data)
                report.evals.append({"step": step, "acc": ev})
                log.info("step %d loss %.4f eval acc %.3f", step, loss, ev)
                if cfg.target_acc is not None and ev >= cfg.target_acc:
                    report.reached_target_at = step
                    break
    finally:
        if metrics_fh:
            metrics_fh.close()
    report.steps_run = step
    report.final_eval_acc = evaluate(model, eval_data)
    report.checksum = model.checksum()
    if out_dir is not None:
        (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
        model.save(out_dir / "model.ckpt")
    report.model = model
    return report
