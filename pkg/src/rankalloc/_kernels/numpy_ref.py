"""Reference (pure numpy) implementations of the inference kernels.

Semantics match rankalloc._kernels._fastcore; the dispatcher in __init__
selects whichever backend is importable.  Weight matrices arrive transposed
(out, in) and C-contiguous so both backends walk memory the same way.
"""

import numpy as np

IDENTITY = 0
TANH = 1
SILU = 2


def _activate(y: np.ndarray, act: int) -> np.ndarray:
    if act == IDENTITY:
        return y
    if act == TANH:
        return np.tanh(y)
    if act == SILU:
        return y / (1.0 + np.exp(-y))
    raise ValueError(f"unknown activation code {act}")


def affine_act(x: np.ndarray, wt: np.ndarray, b: np.ndarray, act: int) -> np.ndarray:
    """act(x @ wt.T + b) for a (batch, n_in) input and (n_out, n_in) weight."""
    return _activate(x @ wt.T + b, act)


def residual_block(
    x: np.ndarray,
    wt1: np.ndarray,
    b1: np.ndarray,
    wt2: np.ndarray,
    b2: np.ndarray,
    act: int,
) -> np.ndarray:
    """x + act(x @ wt1.T + b1) @ wt2.T + b2 (pre-activation residual block)."""
    h = _activate(x @ wt1.T + b1, act)
    return x + h @ wt2.T + b2
