"""Backend selection for the selective-scan hot loop.

The compiled extension is used when it was built; otherwise, or when
``VSSBD_PURE_PYTHON=1`` is set, the numpy implementation is used.
"""

import os

import numpy as np

from . import _scan_py
from .errors import DimensionError

try:
    from . import _scan_ext
except ImportError:  # extension not built
    _scan_ext = None

_BACKENDS = {"numpy": _scan_py}
if _scan_ext is not None:
    _BACKENDS["cython"] = _scan_ext

if _scan_ext is not None and os.environ.get("VSSBD_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "cython"
else:
    BACKEND = "numpy"


def available_backends():
    return sorted(_BACKENDS)


def _module(backend):
    name = backend or BACKEND
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown or unavailable scan backend {name!r}") from None


def _check_shapes(u, delta, A, Bm, Cm):
    if u.ndim != 3 or delta.shape != u.shape:
        raise DimensionError(f"u {u.shape} and delta {delta.shape} must match as (batch, length, channels)")
    bt, L, E = u.shape
    if A.ndim != 2 or A.shape[0] != E:
        raise DimensionError(f"A must be (channels={E}, state), got {A.shape}")
    N = A.shape[1]
    for name, arr in (("B", Bm), ("C", Cm)):
        if arr.shape != (bt, L, N):
            raise DimensionError(f"{name} must be {(bt, L, N)}, got {arr.shape}")


def _prep(dtype, *arrays):
    return [np.ascontiguousarray(a, dtype=dtype) for a in arrays]


def scan_forward(u, delta, A, Bm, Cm, backend=None):
    """Run the batched selective scan; returns ``(y, hidden_states)``."""
    _check_shapes(u, delta, A, Bm, Cm)
    dtype = np.float32 if u.dtype == np.float32 else np.float64
    return _module(backend).selective_scan_fwd(*_prep(dtype, u, delta, A, Bm, Cm))


def scan_backward(u, delta, A, Bm, Cm, hs, dy, backend=None):
    """Gradients ``(du, ddelta, dA, dB, dC)`` given the upstream gradient ``dy``."""
    _check_shapes(u, delta, A, Bm, Cm)
    dtype = np.float32 if u.dtype == np.float32 else np.float64
    return _module(backend).selective_scan_bwd(*_prep(dtype, u, delta, A, Bm, Cm, hs, dy))
