"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy implementations in ``_pykernels`` are used. Setting the environment
variable ``GDSLAB_PURE_PYTHON=1`` forces the fallback.
"""
import os

import numpy as np

from . import _pykernels

if os.environ.get("GDSLAB_PURE_PYTHON", "") not in ("", "0"):
    _ext = None
else:
    try:
        from . import _ckernels as _ext
    except ImportError:
        _ext = None

BACKEND = "cython" if _ext is not None else "python"
_impl = _ext if _ext is not None else _pykernels


def _rows(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _idx(i):
    return np.ascontiguousarray(i, dtype=np.int64)


def half_distances(x, ia, ib, impl=None):
    return (impl or _impl).half_distances(_rows(x), _idx(ia), _idx(ib))


def pairwise_half_distances(q, g, impl=None):
    return (impl or _impl).pairwise_half_distances(_rows(q), _rows(g))


def scatter_pair_grad(x, ia, ib, d, coef, impl=None):
    return (impl or _impl).scatter_pair_grad(
        _rows(x), _idx(ia), _idx(ib), _rows(d), _rows(coef)
    )


def dbscan_labels(x, eps, min_pts, impl=None):
    return (impl or _impl).dbscan_labels(_rows(x), float(eps), int(min_pts))


def available_backends():
    """Mapping of backend name to kernel module, for benchmarks and tests."""
    out = {"python": _pykernels}
    if _ext is not None:
        out["cython"] = _ext
    return out
