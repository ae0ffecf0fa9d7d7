"""Hot loops with a compiled fast path: IDW fill, im2col/col2im, GELU,
row layer norm and row softmax.

The Cython extension ``_ckernels`` is used when it was built; otherwise, or
when ``SPECTRACAST_PURE_PYTHON=1`` is set, the NumPy versions in
``_pykernels`` are used. ``BACKEND`` names the active one.
"""
import os

import numpy as np

from . import _pykernels as python_backend

try:
    if os.environ.get("SPECTRACAST_PURE_PYTHON", "") == "1":
        raise ImportError("pure-python backend forced")
    from . import _ckernels as compiled_backend
except ImportError:
    compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"



def idw_grid(rows, cols, values, m, n, power):
    as64 = lambda a: np.ascontiguousarray(a, dtype=np.float64)
    return _active.idw_grid(as64(rows), as64(cols), as64(values), int(m), int(n), float(power))


def im2col(x, k):
    return _active.im2col(np.ascontiguousarray(x), int(k))


def gelu_fwd(x):
    """Return ``(gelu(x), gelu'(x))`` for an array of any shape."""
    flat = np.ascontiguousarray(x).reshape(-1)
    out, der = _active.gelu_fwd(flat)
    return out.reshape(x.shape), der.reshape(x.shape)


def col2im(cols, c, m, n, k):
    return _active.col2im(np.ascontiguousarray(cols), int(c), int(m), int(n), int(k))


def _rows(x):
    return np.ascontiguousarray(x).reshape(-1, x.shape[-1])


def layer_norm_rows(x, eps):
    """Normalize over the last axis; return ``(xhat, inv)`` with ``inv`` shaped ``x.shape[:-1] + (1,)``."""
    xhat, inv = _active.layer_norm_rows(_rows(x), float(eps))
    return xhat.reshape(x.shape), inv.reshape(x.shape[:-1] + (1,))


def layer_norm_rows_backward(dxhat, xhat, inv):
    dx = _active.layer_norm_rows_backward(_rows(dxhat), _rows(xhat), np.ascontiguousarray(inv).reshape(-1))
    return dx.reshape(xhat.shape)


def softmax_rows(x):
    """Softmax over the last axis; return ``(out, finite)``."""
    out, finite = _active.softmax_rows(_rows(x))
    return out.reshape(x.shape), finite


def softmax_rows_backward(out, g):
    return _active.softmax_rows_backward(_rows(out), _rows(g)).reshape(out.shape)


__all__ = ["BACKEND", "idw_grid", "im2col", "col2im", "gelu_fwd", "layer_norm_rows",
           "layer_norm_rows_backward", "softmax_rows", "softmax_rows_backward",
           "python_backend", "compiled_backend"]
