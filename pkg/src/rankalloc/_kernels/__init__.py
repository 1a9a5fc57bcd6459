"""Kernel backend dispatch.

The compiled core (_fastcore, Cython) is preferred; the numpy reference
implementation is the fallback.  Set RANKALLOC_BACKEND=numpy or =compiled to
force a backend (the latter raises if the extension is missing).  Both
backends implement the identical contracts; see numpy_ref for the reference
semantics and benchmarks/bench_backends.py for a speed comparison.
"""

import os

import numpy as np

from rankalloc._kernels.numpy_ref import IDENTITY, SILU, TANH

_forced = os.environ.get("RANKALLOC_BACKEND", "")
if _forced not in ("", "numpy", "compiled"):
    raise ValueError(
        f"RANKALLOC_BACKEND must be 'numpy' or 'compiled', got {_forced!r}"
    )

if _forced == "numpy":
    from rankalloc._kernels import numpy_ref as _impl

    BACKEND = "numpy"
else:
    try:
        from rankalloc._kernels import _fastcore as _impl

        BACKEND = "compiled"
    except ImportError:
        if _forced == "compiled":
            raise
        from rankalloc._kernels import numpy_ref as _impl

        BACKEND = "numpy"

affine_act = _impl.affine_act
residual_block = _impl.residual_block


class PackCache:
    """Version-keyed cache of kernel-ready weight arrays.

    Training updates bump each parameter's version; the cache rebuilds its
    transposed, C-contiguous copies only when some version changed, so the
    inference hot path never re-packs unchanged weights.
    """

    def __init__(self):
        self._key = None
        self._packed = None

    def get(self, params, build):
        key = tuple(p.version for p in params)
        if key != self._key:
            self._packed = build([p.data for p in params])
            self._key = key
        return self._packed


def pack_transposed(w) -> np.ndarray:
    """(in, out) weight -> (out, in) C-contiguous, the kernels' layout."""
    return np.ascontiguousarray(w.T)


__all__ = [
    "BACKEND",
    "IDENTITY",
    "TANH",
    "SILU",
    "affine_act",
    "residual_block",
    "PackCache",
    "pack_transposed",
]
