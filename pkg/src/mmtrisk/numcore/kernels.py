"""Backend selection for the row-wise kernels.

The compiled extension is used when it was built; otherwise the NumPy
implementations are used. Setting ``MMTRISK_PURE_PYTHON=1`` forces the
fallback, which is how the test suite exercises both paths.
"""

import os

import numpy as np

from . import _kernels_py

try:
    from . import _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

BACKENDS = {"python": _kernels_py}
if _kernels_c is not None:
    BACKENDS["compiled"] = _kernels_c

if os.environ.get("MMTRISK_PURE_PYTHON", "") not in ("", "0") or _kernels_c is None:
    BACKEND = "python"
else:
    BACKEND = "compiled"

_impl = BACKENDS[BACKEND]


def use_backend(name):
    """Switch the active kernel backend at runtime ("python" or "compiled")."""
    global _impl, BACKEND
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}")
    _impl = BACKENDS[name]
    BACKEND = name


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]), dtype=np.float64)


def softmax_rows_fwd(x):
    return _impl.softmax_rows_fwd(_rows(x)).reshape(x.shape)


def softmax_rows_bwd(y, g):
    return _impl.softmax_rows_bwd(_rows(y), _rows(g)).reshape(y.shape)


def layer_norm_fwd(x, gain, bias, eps):
    y, xhat, rstd = _impl.layer_norm_fwd(
        _rows(x), np.ascontiguousarray(gain), np.ascontiguousarray(bias), float(eps)
    )
    return y.reshape(x.shape), xhat, rstd


def layer_norm_bwd(g, xhat, rstd, gain):
    dx, dgain, dbias = _impl.layer_norm_bwd(_rows(g), xhat, rstd, np.ascontiguousarray(gain))
    return dx.reshape(g.shape), dgain, dbias


def average_ranks(values):
    return _impl.average_ranks(np.ascontiguousarray(values, dtype=np.float64))
