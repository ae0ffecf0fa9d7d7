"""Dense tensor with tape-based reverse-mode differentiation.

A ``Tensor`` wraps a NumPy array. Operations on tensors that require gradients
record their parents and a backward closure; ``Tensor.backward`` walks that
graph once in reverse topological order and accumulates into the ``grad`` of
every leaf that requires it.

Numeric precision is global: float32 by default, float64 for gradient checks.
It is read from ``SPECTRACAST_PRECISION`` (``f32``/``f64``) at import and can
be switched with :func:`set_precision` or the :func:`precision` context.
"""
from __future__ import annotations

import contextlib
import os

import numpy as np

from ..errors import ConfigError, ContractError, DimensionError, NumericError

_DTYPES = {"f32": np.float32, "f64": np.float64}

_state = {
    "dtype": _DTYPES.get(os.environ.get("SPECTRACAST_PRECISION", "f32"), None),
    "grad": True,
    "check_finite": os.environ.get("SPECTRACAST_DEBUG", "") == "1",
}
if _state["dtype"] is None:
    raise ConfigError(
        f"SPECTRACAST_PRECISION must be one of {sorted(_DTYPES)}, "
        f"got {os.environ.get('SPECTRACAST_PRECISION')!r}"
    )


def get_dtype():
    return _state["dtype"]


def set_precision(mode: str) -> None:
    if mode not in _DTYPES:
        raise ConfigError(f"precision must be one of {sorted(_DTYPES)}, got {mode!r}")
    _state["dtype"] = _DTYPES[mode]


@contextlib.contextmanager
def precision(mode: str):
    old = _state["dtype"]
    set_precision(mode)
    try:
        yield
    finally:
        _state["dtype"] = old


def set_debug(enabled: bool) -> None:
    """Turn the non-finite check at every op boundary on or off."""
    _state["check_finite"] = bool(enabled)


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def is_grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        want = dtype if dtype is not None else _state["dtype"]
        if arr.dtype != want:
            arr = arr.astype(want)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        if _state["check_finite"] and not np.isfinite(arr).all():
            raise NumericError("tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # -- reverse mode --------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological_order(root):
    """Nodes reachable from ``root``, each exactly once, consumers before producers."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data, parents, backward, op):
    """Wrap an op's output, recording it on the tape when any parent needs grad."""
    if _state["check_finite"] and not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of NumPy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _operand(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


# -- elementwise arithmetic ------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = _operand(b, a)
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    return make_result(a.data + b.data, (a, b),
                       lambda g: (unbroadcast(g, sa) if ra else None,
                                  unbroadcast(g, sb) if rb else None), "add")


def sub(a, b):
    if not isinstance(a, Tensor):
        a = _operand(a, b)
    b = _operand(b, a)
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    return make_result(a.data - b.data, (a, b),
                       lambda g: (unbroadcast(g, sa) if ra else None,
                                  unbroadcast(-g, sb) if rb else None), "sub")


def mul(a, b):
    a = as_tensor(a)
    b = _operand(b, a)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return make_result(ad * bd, (a, b),
                       lambda g: (unbroadcast(g * bd, ad.shape) if ra else None,
                                  unbroadcast(g * ad, bd.shape) if rb else None),
                       "mul")


def div(a, b):
    if not isinstance(a, Tensor):
        a = _operand(a, b)
    b = _operand(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    ra, rb = a.requires_grad, b.requires_grad
    return make_result(out, (a, b),
                       lambda g: (unbroadcast(g / bd, ad.shape) if ra else None,
                                  unbroadcast(-g * out / bd, bd.shape) if rb else None),
                       "div")


def exp(x):
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x):
    xd = x.data
    return make_result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def clamp(x, lo, hi):
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return make_result(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clamp")


# -- reductions ------------------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / n)


# -- shape manipulation ---------------------------------------------------------

def reshape(x, shape):
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x, idx):
    shape = x.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result(np.asarray(x.data[idx]), (x,), backward, "getitem")


def take(x, indices, axis):
    """Gather along ``axis``; repeated indices accumulate in backward."""
    indices = np.asarray(indices)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)),
                         list(range(indices.ndim)))
        fm = np.moveaxis(full, axis, 0)
        np.add.at(fm, indices, gm)
        return (full,)

    return make_result(np.take(x.data, indices, axis=axis), (x,), backward, "take")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                       lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return make_result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                       lambda g: tuple(np.squeeze(p, axis) for p in np.split(g, n, axis=axis)),
                       "stack")


def roll(x, shifts, axes):
    back = tuple(-s for s in shifts)
    return make_result(np.roll(x.data, shifts, axis=axes), (x,),
                       lambda g: (np.roll(g, back, axis=axes),), "roll")


# -- linear algebra --------------------------------------------------------------

def matmul(a, b):
    """Batched matrix product ``[.., m, k] @ [.., k, n]`` with broadcast batch extents."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents do not broadcast: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if ra else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if rb else None
        return ga, gb

    return make_result(ad @ bd, (a, b), backward, "matmul")
