"""Pure-NumPy versions of the compiled kernels (same signatures, same results)."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def idw_grid(rows, cols, values, m, n, power):
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    ii, jj = np.meshgrid(np.arange(m, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    d2 = (ii[..., None] - rows) ** 2 + (jj[..., None] - cols) ** 2
    hit = d2 == 0.0
    with np.errstate(divide="ignore"):
        w = np.where(hit, 0.0, np.power(np.where(hit, 1.0, d2), -power / 2.0))
    out = (w * values).sum(-1) / np.where(hit.any(-1), 1.0, w.sum(-1))
    nhits = hit.sum(-1)
    exact = (hit * values).sum(-1) / np.maximum(nhits, 1)
    return np.where(nhits > 0, exact, out)


def im2col(x, k):
    b, c, m, n = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # b, c, m, n, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * k * k, m * n)


def col2im(cols, c, m, n, k):
    b = cols.shape[0]
    p = k // 2
    cols = cols.reshape(b, c, k, k, m, n)
    xp = np.zeros((b, c, m + 2 * p, n + 2 * p), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki:ki + m, kj:kj + n] += cols[:, :, ki, kj]
    return xp[:, :, p:p + m, p:p + n].copy()


def gelu_fwd(x):
    from scipy.special import erf

    cdf = 0.5 * (1.0 + erf(x * 0.7071067811865476))
    pdf = 0.3989422804014327 * np.exp(-0.5 * x * x)
    return (x * cdf).astype(x.dtype, copy=False), (cdf + x * pdf).astype(x.dtype, copy=False)


def layer_norm_rows(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (xc * inv).astype(x.dtype, copy=False), inv[:, 0].astype(x.dtype, copy=False)


def layer_norm_rows_backward(dxhat, xhat, inv):
    return inv[:, None] * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                           - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def softmax_rows(x):
    if not np.isfinite(x).all():
        return np.full_like(x, np.nan), False
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True), True


def softmax_rows_backward(out, g):
    return out * (g - (g * out).sum(axis=-1, keepdims=True))
