"""Seeded synthetic sequence tasks: associative recall and copy.

Token layout, shared by both tasks::

    0            separator; also the ignore-token at unscored target positions
    1            blank
    2 ..         content tokens

Associative recall splits the content tokens into a key half and a value
half, ``inputs = k1 v1 k2 v2 ... 0 q1 q2 ...``; each query is scored against
the value most recently bound to that key.

Randomness comes from SplitMix64 so that a seed produces the same instance
in any language.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import SpecInvalid, TokenOutOfRange

SEP = 0
IGNORE = SEP
BLANK = 1
FIRST_CONTENT = 2

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """Steele, Lea & Flood's splitmix64 generator."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n), by rejection (no modulo bias)."""
        if n < 1:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def sample(self, population: list, k: int) -> list:
        """k distinct items, partial Fisher-Yates."""
        pool = list(population)
        for i in range(k):
            j = i + self.below(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


@dataclass(frozen=True)
class TaskSpec:
    kind: str                    # "assoc_recall" or "copy"
    vocab_size: int = 16
    n_pairs: int = 4
    n_queries: int = 1
    n_repeats: int = 0           # extra writes that rebind an earlier key
    payload_len: int = 4
    blank_len: int = 4
    seed: int = 0

    def validate(self) -> "TaskSpec":
        if self.kind not in ("assoc_recall", "copy"):
            raise SpecInvalid(f"unknown task kind {self.kind!r}")
        if self.vocab_size < 3:
            raise SpecInvalid("vocab_size must be at least 3")
        if self.kind == "assoc_recall":
            n_keys, n_vals = assoc_split(self.vocab_size)
            if min(self.n_pairs, self.n_queries) < 1 or self.n_repeats < 0:
                raise SpecInvalid("n_pairs and n_queries must be >= 1, n_repeats >= 0")
            if n_vals < 1 or self.n_pairs > n_keys:
                raise SpecInvalid(f"vocab {self.vocab_size} offers {n_keys} keys, {self.n_pairs} pairs requested")
            if self.n_repeats and n_vals < 2:
                raise SpecInvalid("rebinding a key needs at least two value tokens")
        else:
            if min(self.payload_len, self.blank_len) < 1:
                raise SpecInvalid("payload_len and blank_len must be >= 1")
        return self

    @property
    def seq_len(self) -> int:
        if self.kind == "assoc_recall":
            return 2 * (self.n_pairs + self.n_repeats) + 1 + self.n_queries
        return self.payload_len + self.blank_len


@dataclass
class TaskInstance:
    inputs: list[int]
    targets: list[int]
    mask: list[bool]

    def to_json(self) -> str:
        return json.dumps({"inputs": self.inputs, "targets": self.targets, "mask": self.mask})

    @classmethod
    def from_json(cls, line: str) -> "TaskInstance":
        obj = json.loads(line)
        return cls(list(obj["inputs"]), list(obj["targets"]), [bool(m) for m in obj["mask"]])


def assoc_split(vocab_size: int) -> tuple[int, int]:
    content = vocab_size - FIRST_CONTENT
    n_keys = content // 2
    return n_keys, content - n_keys


def gen_assoc_recall(spec: TaskSpec, rng: Optional[SplitMix64] = None) -> TaskInstance:
    spec.validate()
    if spec.kind != "assoc_recall":
        raise SpecInvalid(f"expected an assoc_recall spec, got {spec.kind!r}")
    rng = rng or SplitMix64(spec.seed)
    n_keys, n_vals = assoc_split(spec.vocab_size)
    key_tokens = list(range(FIRST_CONTENT, FIRST_CONTENT + n_keys))
    val_tokens = list(range(FIRST_CONTENT + n_keys, spec.vocab_size))

    keys = rng.sample(key_tokens, spec.n_pairs)
    binding = {}
    inputs = []
    for k in keys:
        v = val_tokens[rng.below(n_vals)]
        binding[k] = v
        inputs += [k, v]
    for _ in range(spec.n_repeats):
        k = keys[rng.below(len(keys))]
        # pick a value different from the current binding
        v = val_tokens[rng.below(n_vals - 1)]
        if v >= binding[k]:
            v += 1
        binding[k] = v
        inputs += [k, v]
    if spec.n_queries <= len(keys):
        queries = rng.sample(keys, spec.n_queries)
    else:
        queries = [keys[rng.below(len(keys))] for _ in range(spec.n_queries)]
    prefix = len(inputs) + 1
    inputs += [SEP] + queries
    targets = [IGNORE] * prefix + [binding[q] for q in queries]
    mask = [False] * prefix + [True] * len(queries)
    return TaskInstance(inputs, targets, mask)


def gen_copy(spec: TaskSpec, rng: Optional[SplitMix64] = None) -> TaskInstance:
    spec.validate()
    if spec.kind != "copy":
        raise SpecInvalid(f"expected a copy spec, got {spec.kind!r}")
    rng = rng or SplitMix64(spec.seed)
    n_content = spec.vocab_size - FIRST_CONTENT
    if n_content < 1:
        raise SpecInvalid("vocab has no content tokens for the payload")
    payload = [FIRST_CONTENT + rng.below(n_content) for _ in range(spec.payload_len)]
    inputs = payload + [BLANK] * spec.blank_len
    targets = [IGNORE] * spec.blank_len + payload
    mask = [False] * spec.blank_len + [True] * spec.payload_len
    return TaskInstance(inputs, targets, mask)


def generate(spec: TaskSpec, n: int, rng: Optional[SplitMix64] = None) -> list[TaskInstance]:
    """n instances drawn from one generator stream seeded by ``spec.seed``."""
    rng = rng or SplitMix64(spec.seed)
    gen = gen_assoc_recall if spec.kind == "assoc_recall" else gen_copy
    return [gen(spec, rng) for _ in range(n)]


def one_hot(token: int, vocab_size: int) -> np.ndarray:
    if not 0 <= token < vocab_size:
        raise TokenOutOfRange(f"token {token} outside vocabulary of size {vocab_size}")
    v = np.zeros(vocab_size)
    v[token] = 1.0
    return v


def encode_inputs(tokens, vocab_size: int) -> np.ndarray:
    """Features ``[one_hot(tok_t), one_hot(tok_{t-1})]`` for (..., T) token ids.

    Returns time-major ``(T, ..., 2 * vocab_size)``; the previous-token half is
    zero at t = 0.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise TokenOutOfRange(f"token ids must lie in [0, {vocab_size})")
    eye = np.eye(vocab_size)
    cur = eye[tokens]
    prev = np.zeros_like(cur)
    prev[..., 1:, :] = cur[..., :-1, :]
    feats = np.concatenate([cur, prev], axis=-1)
    return np.moveaxis(feats, -2, 0)


def write_dataset(path, instances: Iterable[TaskInstance]) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(inst.to_json() + "\n")


def read_dataset(path) -> list[TaskInstance]:
    return [TaskInstance.from_json(l) for l in Path(path).read_text().splitlines() if l.strip()]


def batch_arrays(instances: list[TaskInstance]):
    """Stack equal-length instances into (B, T) int/bool arrays."""
    inputs = np.array([i.inputs for i in instances], dtype=np.int64)
    targets = np.array([i.targets for i in instances], dtype=np.int64)
    mask = np.array([i.mask for i in instances], dtype=bool)
    return inputs, targets, mask
