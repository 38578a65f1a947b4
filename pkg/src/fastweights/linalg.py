"""Dense f64 linear algebra used by every cell.

Vectors and matrices are plain ``numpy.float64`` arrays. Every function
accepts optional leading batch dimensions (``(..., n)`` for vectors,
``(..., m, n)`` for matrices) so that a whole minibatch of sequences can be
stepped at once; the unbatched case is the contract the rest of the
library is written against.

Matrices are stored row-major (C order). The binary format is::

    u64 rows | u64 cols | rows*cols f64      (all little-endian)
"""

from __future__ import annotations

import enum
import io
import struct
from typing import BinaryIO

import numpy as np

from .errors import ShapeMismatch

__all__ = [
    "Activation",
    "vector",
    "matrix",
    "outer",
    "matvec",
    "rmatvec",
    "activate",
    "activate_vjp",
    "sigmoid",
    "write_matrix",
    "read_matrix",
    "matrix_to_bytes",
    "matrix_from_bytes",
]


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    TANH = "tanh"
    RELU = "relu"
    SOFTMAX = "softmax"  # over the last axis; classification heads only

    @classmethod
    def parse(cls, value: "Activation | str") -> "Activation":
        if isinstance(value, Activation):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"unknown activation {value!r}") from None


def vector(data) -> np.ndarray:
    v = np.array(data, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeMismatch(f"expected a nonempty rank-1 array, got shape {v.shape}")
    return v


def matrix(data) -> np.ndarray:
    m = np.array(data, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ShapeMismatch(f"expected a nonempty rank-2 array, got shape {m.shape}")
    return np.ascontiguousarray(m)


def outer(v: np.ndarray, k: np.ndarray) -> np.ndarray:
    """``result[..., i, j] = v[..., i] * k[..., j]``."""
    if v.ndim == 1 and k.ndim == 1:
        return np.outer(v, k)
    return np.einsum("...i,...j->...ij", v, k)


def matvec(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``result[..., i] = sum_j M[..., i, j] * x[..., j]``."""
    if M.shape[-1] != x.shape[-1]:
        raise ShapeMismatch(f"matvec: M has {M.shape[-1]} columns, x has length {x.shape[-1]}")
    if M.ndim == 2:
        return x @ M.T
    return np.einsum("...ij,...j->...i", M, x)


def rmatvec(M: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Transposed product ``M^T y``."""
    if M.shape[-2] != y.shape[-1]:
        raise ShapeMismatch(f"rmatvec: M has {M.shape[-2]} rows, y has length {y.shape[-1]}")
    if M.ndim == 2:
        return y @ M
    return np.einsum("...ij,...i->...j", M, y)


def sigmoid(z):
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def activate(kind: Activation | str, z: np.ndarray) -> np.ndarray:
    kind = Activation.parse(kind)
    if kind is Activation.IDENTITY:
        return z.copy()
    if kind is Activation.TANH:
        return np.tanh(z)
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    return _softmax(z)


def activate_vjp(kind: Activation | str, z: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Return ``upstream^T (d sigma / d z)`` evaluated at the pre-activation ``z``."""
    kind = Activation.parse(kind)
    if kind is Activation.IDENTITY:
        return upstream.copy()
    if kind is Activation.TANH:
        t = np.tanh(z)
        return upstream * (1.0 - t * t)
    if kind is Activation.RELU:
        return upstream * (z > 0)
    s = _softmax(z)
    return s * (upstream - np.sum(upstream * s, axis=-1, keepdims=True))


# -- serialization ---------------------------------------------------------

_HEADER = struct.Struct("<QQ")


def write_matrix(fh: BinaryIO, M: np.ndarray) -> None:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        M = M[None, :]
    if M.ndim != 2:
        raise ShapeMismatch(f"can only serialize rank-1/2 arrays, got shape {M.shape}")
    fh.write(_HEADER.pack(*M.shape))
    fh.write(np.ascontiguousarray(M, dtype="<f8").tobytes())


def read_matrix(fh: BinaryIO) -> np.ndarray:
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise EOFError("truncated matrix header")
    rows, cols = _HEADER.unpack(head)
    nbytes = 8 * rows * cols
    body = fh.read(nbytes)
    if len(body) != nbytes:
        raise EOFError(f"expected {nbytes} bytes of matrix data, got {len(body)}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(rows, cols)


def matrix_to_bytes(M: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_matrix(buf, M)
    return buf.getvalue()


def matrix_from_bytes(data: bytes) -> np.ndarray:
    return read_matrix(io.BytesIO(data))
