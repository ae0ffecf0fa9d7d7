"""Differentiable kernels used by the network components."""
import numpy as np

from .. import _kernels
from ..errors import ConfigError, DimensionError, NumericError
from .tensor import Tensor, as_tensor, make_result, unbroadcast

def sigmoid(x):
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x):
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written via erf."""
    out, der = _kernels.gelu_fwd(x.data)
    return make_result(out, (x,), lambda g: (g * der,), "gelu")


def softmax_lastdim(x):
    xd = x.data
    if xd.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    out, finite = _kernels.softmax_rows(xd)
    if not finite:
        raise NumericError("softmax input contains non-finite values")
    return make_result(out, (x,), lambda g: (_kernels.softmax_rows_backward(out, g),), "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift.

    ``gamma`` and ``beta`` must broadcast against ``x`` and end in the
    normalized extent; grouped parameters come in as e.g. ``[G, 1, 1, D]``.
    """
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over a zero-length axis")
    if gamma.shape[-1] != d or beta.shape[-1] != d:
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not end in {d}")
    xd, gd, bd = x.data, gamma.data, beta.data
    xhat, inv = _kernels.layer_norm_rows(xd, eps)
    out = xhat * gd + bd
    rx = x.requires_grad

    def backward(g):
        dx = None
        if rx:
            dxhat = unbroadcast(g * gd, xd.shape)
            dx = _kernels.layer_norm_rows_backward(dxhat, xhat, inv)
        return (dx, unbroadcast(g * xhat, gd.shape), unbroadcast(g, bd.shape))

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


def glinear(x, w, b=None):
    """Grouped affine map on the last axis.

    ``x`` is ``[G or 1, ..., Din]``, ``w`` is ``[G, Din, Dout]`` and ``b`` is
    ``[G, Dout]``. A leading extent of 1 on ``x`` is shared by every group.
    """
    g_count, din, dout = w.shape
    if x.shape[-1] != din or x.shape[0] not in (1, g_count):
        raise DimensionError(f"glinear shape mismatch: x {x.shape}, w {w.shape}")
    xd, wd = x.data, w.data
    lead = x.shape[0]
    xr = xd.reshape(lead, -1, din)
    out = xr @ wd
    if b is not None:
        out = out + b.data[:, None, :]
    out_shape = (g_count,) + x.shape[1:-1] + (dout,)
    rx = x.requires_grad

    def backward(gr):
        gr = gr.reshape(g_count, -1, dout)
        gx = None
        if rx:
            gx = gr @ np.swapaxes(wd, 1, 2)
            if lead == 1 and g_count > 1:
                gx = gx.sum(axis=0, keepdims=True)
            gx = gx.reshape(xd.shape)
        gw = np.swapaxes(xr, 1, 2) @ gr
        grads = (gx, gw)
        if b is not None:
            grads = grads + (gr.sum(axis=1),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out.reshape(out_shape), parents, backward, "glinear")


def conv2d(x, w, b=None):
    """Same-padded 2-D cross-correlation, ``[B,Cin,M,N] * [Cout,Cin,k,k] -> [B,Cout,M,N]``."""
    x, w = as_tensor(x), as_tensor(w)
    bsz, cin, m, n = x.shape
    cout, wcin, kh, kw = w.shape
    if kh != kw:
        raise ConfigError(f"conv2d needs a square kernel, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ConfigError(f"same padding needs an odd kernel extent, got {kh}")
    if wcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    k = kh
    xd, wd = x.data, w.data
    cols = _kernels.im2col(xd, k) if k > 1 else xd.reshape(bsz, cin, m * n)
    wr = wd.reshape(cout, cin * k * k)
    out = wr @ cols
    if b is not None:
        if b.shape != (cout,):
            raise DimensionError(f"conv2d bias shape {b.shape} != ({cout},)")
        out = out + b.data[:, None]
    rx = x.requires_grad

    def backward(g):
        g = g.reshape(bsz, cout, m * n)
        gw = (g @ np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(wd.shape)
        gx = None
        if rx:
            gcols = wr.T @ g
            gx = _kernels.col2im(gcols, cin, m, n, k) if k > 1 else gcols.reshape(xd.shape)
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g.sum(axis=(0, 2)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out.reshape(bsz, cout, m, n), parents, backward, "conv2d")


def mse(pred, target):
    """Mean squared error as a scalar tensor; ``target`` may be a plain array."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    pd = pred.data
    diff = pd - target.astype(pd.dtype, copy=False)
    scale = 2.0 / diff.size
    return make_result(np.asarray((diff * diff).mean(), dtype=pd.dtype), (pred,),
                       lambda g: (g * scale * diff,), "mse")
