"""Fast weight programmers, their linear-attention dual form, and exact BPTT."""

from .linalg import Activation
from .cells import CellConfig, CellKind, CellParams, CellState, KeyMap, init_params, initial_state

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "CellConfig",
    "CellKind",
    "CellParams",
    "CellState",
    "KeyMap",
    "init_params",
    "initial_state",
]
