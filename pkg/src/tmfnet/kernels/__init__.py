"""Hot numeric kernels with selectable backends.

Two interchangeable implementations exist for every kernel:

* ``_numba`` — ``@njit``-compiled loops (default when numba imports)
* ``_numpy`` — pure-numpy fallback

Selection is controlled by the ``TMF_BACKEND`` environment variable
(``auto`` | ``numba`` | ``numpy``) read at first use, or programmatically
via :func:`use_backend`. Both backends satisfy the same contracts to
floating tolerance; ``benchmarks/bench_kernels.py`` compares throughput.
"""

from __future__ import annotations

import os
import warnings

_requested = os.environ.get("TMF_BACKEND", "auto").strip().lower()
_impl = None
_impl_name = None


class BackendError(RuntimeError):
    pass


def _load(name: str):
    if name == "numpy":
        from . import _numpy
        return _numpy
    if name == "numba":
        from . import _numba
        return _numba
    raise BackendError(f"unknown kernel backend {name!r} (use 'auto', 'numba' or 'numpy')")


def use_backend(name: str) -> str:
    """Force a kernel backend; returns the active backend name."""
    global _impl, _impl_name
    name = name.strip().lower()
    if name == "auto":
        try:
            _impl = _load("numba")
            _impl_name = "numba"
        except ImportError:
            warnings.warn("numba unavailable; falling back to numpy kernels")
            _impl = _load("numpy")
            _impl_name = "numpy"
    else:
        _impl = _load(name)
        _impl_name = name
    return _impl_name


def current_backend() -> str:
    if _impl is None:
        use_backend(_requested)
    return _impl_name


def _active():
    if _impl is None:
        use_backend(_requested)
    return _impl


def box_sum(x, k: int):
    """Stride-1 windowed sum with zero padding, same output size.

    ``x`` is (N, C, H, W); the k×k window is centered (k odd). Windows are
    clipped at image borders, which is numerically identical to summing
    over zero padding. Accumulation is float64 internally regardless of
    input dtype.
    """
    if k % 2 == 0 or k < 1:
        raise ValueError(f"window size must be odd and >= 1, got {k}")
    if k == 1:
        return x.copy()
    return _active().box_sum(x, k)


def group_fusion_forward(xg, kg):
    """Per-pixel grouped 3x3 spatial fusion.

    xg: (N, G, Cg, H, W) features split into G groups.
    kg: (N, G, 3, 3, H, W) one 3x3 kernel per group and pixel.
    Returns y with xg's shape; out-of-bounds neighbors contribute zero.
    """
    return _active().group_fusion_forward(xg, kg)


def group_fusion_backward(xg, kg, gy):
    """Gradients of group_fusion_forward w.r.t. (xg, kg)."""
    return _active().group_fusion_backward(xg, kg, gy)
