"""Recurrent cells: ViT-LSTM and its convolutional ST-LSTM / ConvLSTM baselines.

ViT-LSTM and ST-LSTM share one gate skeleton (``st_cell``) and differ only in
the spatial transform plugged into each gate: a windowed-attention stack or
a same-padded convolution. Transforms are grouped by the tensor they read:

==========  ==============================  =====
reads       gates (in group order)          count
==========  ==============================  =====
x           g, i, f, g', i', f', o          7
h (prev)    g, i, f, o                      4
m (in)      g', i', f'                      3
c (new)     o                               1
m (new)     o                               1
==========  ==============================  =====

so every one of the 16 transform occurrences has its own parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, conv2d, reshape, sigmoid, tanh, transpose
from .swin import init_swin_params, swin_param_shapes, vit

X_GATES = ("g", "i", "f", "g2", "i2", "f2", "o")
H_GATES = ("g", "i", "f", "o")
M_GATES = ("g2", "i2", "f2")
BIASES = ("b_g", "b_i", "b_f", "b_g2", "b_i2", "b_f2", "b_o")
_GROUPS = {"x": len(X_GATES), "h": len(H_GATES), "m": len(M_GATES), "c": 1, "mem": 1}


@dataclass
class CellState:
    h: Tensor
    c: Tensor
    m: Tensor | None = None


def _sub(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _uniform_fan_in(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _bias(p, name):
    b = p[name]
    return reshape(b, (1, b.shape[0], 1, 1))


class ViTTransforms:
    """Gate transforms backed by grouped attention stacks ``vit_{x,h,m,c,mem}``."""

    def __init__(self, params, swin_cfg, hidden):
        self.p = params
        self.cfg = swin_cfg
        self.hidden = hidden

    def __call__(self, which, t):
        return vit(t, _sub(self.p, f"vit_{which}."), self.cfg, self.hidden)


class ConvTransforms:
    """Gate transforms backed by grouped convolutions ``conv_{x,h,m,c,mem}.w``."""

    def __init__(self, params, hidden):
        self.p = params
        self.hidden = hidden

    def __call__(self, which, t):
        y = conv2d(t, self.p[f"conv_{which}.w"])
        bsz, _, m, n = y.shape
        y = reshape(y, (bsz, _GROUPS[which], self.hidden, m, n))
        return transpose(y, (1, 0, 2, 3, 4))


def st_cell(x, prev, m_in, transform, p, record=None):
    """Shared gate skeleton of ViT-LSTM / ST-LSTM.

    ``transform(which, tensor)`` returns ``[groups, B, hidden, M, N]``.
    ``record``, when a dict, receives the gate activations.
    """
    vx = transform("x", x)
    vh = transform("h", prev.h)
    vm = transform("m", m_in)

    g = tanh(vx[0] + vh[0] + _bias(p, "b_g"))
    i = sigmoid(vx[1] + vh[1] + _bias(p, "b_i"))
    f = sigmoid(vx[2] + vh[2] + _bias(p, "b_f"))
    c = f * prev.c + i * g

    g2 = tanh(vx[3] + vm[0] + _bias(p, "b_g2"))
    i2 = sigmoid(vx[4] + vm[1] + _bias(p, "b_i2"))
    f2 = sigmoid(vx[5] + vm[2] + _bias(p, "b_f2"))
    m = f2 * m_in + i2 * g2

    o = sigmoid(vx[6] + vh[3] + transform("c", c)[0] + transform("mem", m)[0] + _bias(p, "b_o"))
    h = o * tanh(conv2d(concat([c, m], axis=1), p["fuse.w"]))
    if record is not None:
        record.update(g=g, i=i, f=f, g2=g2, i2=i2, f2=f2, o=o)
    return CellState(h=h, c=c, m=m)


def vitlstm_cell(x, prev, m_in, params, swin_cfg, record=None):
    hidden = prev.h.shape[1]
    return st_cell(x, prev, m_in, ViTTransforms(params, swin_cfg, hidden), params, record)


def stlstm_cell(x, prev, m_in, params, record=None):
    hidden = prev.h.shape[1]
    return st_cell(x, prev, m_in, ConvTransforms(params, hidden), params, record)


def convlstm_cell(x, h_prev, c_prev, params, record=None):
    """Standard convolutional LSTM: one convolution over ``[x, h]`` yields i, f, g, o."""
    hidden = h_prev.shape[1]
    z = conv2d(concat([x, h_prev], axis=1), params["conv.w"], params["conv.b"])
    bsz, _, m, n = z.shape
    z = transpose(reshape(z, (bsz, 4, hidden, m, n)), (1, 0, 2, 3, 4))
    i, f, g, o = sigmoid(z[0]), sigmoid(z[1]), tanh(z[2]), sigmoid(z[3])
    c = f * c_prev + i * g
    h = o * tanh(c)
    if record is not None:
        record.update(i=i, f=f, g=g, o=o)
    return CellState(h=h, c=c, m=None)


# -- parameter shapes and initialization ------------------------------------------

def cell_param_shapes(kind, in_ch, hidden, swin_cfg=None, kernel=5):
    shapes = {}
    if kind == "vitlstm":
        reads = {"x": in_ch, "h": hidden, "m": hidden, "c": hidden, "mem": hidden}
        for which, ch in reads.items():
            for name, shp in swin_param_shapes(swin_cfg, _GROUPS[which], ch, hidden).items():
                shapes[f"vit_{which}.{name}"] = shp
    elif kind == "stlstm":
        reads = {"x": in_ch, "h": hidden, "m": hidden, "c": hidden, "mem": hidden}
        for which, ch in reads.items():
            shapes[f"conv_{which}.w"] = (_GROUPS[which] * hidden, ch, kernel, kernel)
    elif kind == "convlstm":
        shapes["conv.w"] = (4 * hidden, in_ch + hidden, kernel, kernel)
        shapes["conv.b"] = (4 * hidden,)
        return shapes
    else:
        raise ValueError(f"unknown cell kind {kind!r}")
    for b in BIASES:
        shapes[b] = (hidden,)
    shapes["fuse.w"] = (hidden, 2 * hidden, 1, 1)
    return shapes


def init_cell_params(kind, rng, in_ch, hidden, swin_cfg=None, kernel=5):
    """Attention stacks per the swin initializer; convolutions uniform in +-1/sqrt(fan_in); biases zero."""
    shapes = cell_param_shapes(kind, in_ch, hidden, swin_cfg, kernel)
    params = {}
    if kind == "vitlstm":
        for which, ch in {"x": in_ch, "h": hidden, "m": hidden, "c": hidden, "mem": hidden}.items():
            for name, t in init_swin_params(rng, swin_cfg, _GROUPS[which], ch, hidden).items():
                params[f"vit_{which}.{name}"] = t
    for name, shape in shapes.items():
        if name in params:
            continue
        if name.endswith(".w"):
            arr = _uniform_fan_in(rng, shape, int(np.prod(shape[1:])))
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True)
    return {name: params[name] for name in shapes}
