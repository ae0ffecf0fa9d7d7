"""Shifted-window self-attention stack used inside every recurrent gate.

``vit`` maps a ``C x M x N`` map to a map of the same spatial size: patch
embedding, a W-MSA block, an SW-MSA block (each pre-norm with residual
attention and a GELU MLP), then a linear patch un-embedding.

Parameters are grouped: every tensor carries a leading extent ``G`` so that
several independent stacks reading the same input run as one batched pass.
Activations therefore have the layout ``[G, B, ...]``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .autodiff import (
    Tensor,
    gelu,
    glinear,
    layer_norm,
    matmul,
    reshape,
    roll,
    softmax_lastdim,
    swap_last,
    take,
    transpose,
)
from .errors import ConfigError, DimensionError

MASK_VALUE = -1e9


@dataclass(frozen=True)
class SwinConfig:
    patch: int = 4
    window: int = 4
    shift: int | None = None  # None means window // 2
    heads: int = 8
    embed_dim: int = 32
    mlp_ratio: int = 4
    ln_eps: float = 1e-5

    @property
    def shift_size(self):
        return self.window // 2 if self.shift is None else self.shift

    def validate(self, m, n):
        if min(self.patch, self.window, self.heads, self.embed_dim, self.mlp_ratio) < 1:
            raise ConfigError(f"swin sizes must be positive: {self}")
        if m % self.patch or n % self.patch:
            raise ConfigError(f"grid {m}x{n} is not divisible by patch {self.patch}")
        gh, gw = m // self.patch, n // self.patch
        if gh % self.window or gw % self.window:
            raise ConfigError(f"token grid {gh}x{gw} is not divisible by window {self.window}")
        if not 0 <= self.shift_size < self.window:
            raise ConfigError(f"shift {self.shift_size} must lie in [0, {self.window})")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown swin config keys: {sorted(unknown)}")
        return cls(**d)


# -- parameters --------------------------------------------------------------------

def trunc_normal(rng, shape, std=0.02):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def swin_param_shapes(cfg, groups, in_ch, out_ch):
    """Ordered ``name -> shape`` for one grouped stack."""
    d, p2, r = cfg.embed_dim, cfg.patch * cfg.patch, cfg.mlp_ratio
    shapes = {"embed.w": (groups, in_ch * p2, d), "embed.b": (groups, d)}
    for blk in ("block0", "block1"):
        shapes.update({
            f"{blk}.ln1.g": (groups, d),
            f"{blk}.ln1.b": (groups, d),
            f"{blk}.attn.qkv.w": (groups, d, 3 * d),
            f"{blk}.attn.qkv.b": (groups, 3 * d),
            f"{blk}.attn.rpb": (groups, (2 * cfg.window - 1) ** 2, cfg.heads),
            f"{blk}.attn.proj.w": (groups, d, d),
            f"{blk}.attn.proj.b": (groups, d),
            f"{blk}.ln2.g": (groups, d),
            f"{blk}.ln2.b": (groups, d),
            f"{blk}.mlp.fc1.w": (groups, d, r * d),
            f"{blk}.mlp.fc1.b": (groups, r * d),
            f"{blk}.mlp.fc2.w": (groups, r * d, d),
            f"{blk}.mlp.fc2.b": (groups, d),
        })
    shapes.update({"unembed.w": (groups, d, out_ch * p2), "unembed.b": (groups, out_ch * p2)})
    return shapes


def init_swin_params(rng, cfg, groups, in_ch, out_ch):
    """Weights from a truncated normal (std 0.02); biases and position tables zero; LN gains one."""
    params = {}
    for name, shape in swin_param_shapes(cfg, groups, in_ch, out_ch).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif leaf == "w":
            arr = trunc_normal(rng, shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True)
    return params


# -- geometry helpers ----------------------------------------------------------------

def patch_embed(x, w, b, patch):
    """``[B, C, M, N] -> [G, B, M/p, N/p, D]``; patches flatten in (channel, row, col) order."""
    bsz, c, m, n = x.shape
    if m % patch or n % patch:
        raise ConfigError(f"grid {m}x{n} is not divisible by patch {patch}")
    gh, gw = m // patch, n // patch
    t = reshape(x, (bsz, c, gh, patch, gw, patch))
    t = transpose(t, (0, 2, 4, 1, 3, 5))
    t = reshape(t, (1, bsz, gh, gw, c * patch * patch))
    return glinear(t, w, b)


def patch_unembed(t, w, b, patch, out_ch):
    """``[G, B, gh, gw, D] -> [G, B, out_ch, gh*p, gw*p]``, the inverse layout of ``patch_embed``."""
    g, bsz, gh, gw, _ = t.shape
    y = glinear(t, w, b)
    y = reshape(y, (g, bsz, gh, gw, out_ch, patch, patch))
    y = transpose(y, (0, 1, 4, 2, 5, 3, 6))
    return reshape(y, (g, bsz, out_ch, gh * patch, gw * patch))


def window_partition(x, w):
    """``[..., gh, gw, D] -> [..., nW, w*w, D]`` with windows in row-major order."""
    *lead, gh, gw, d = x.shape
    if gh % w or gw % w:
        raise ConfigError(f"token grid {gh}x{gw} is not divisible by window {w}")
    k = len(lead)
    y = reshape(x, (*lead, gh // w, w, gw // w, w, d))
    y = transpose(y, tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    return reshape(y, (*lead, (gh // w) * (gw // w), w * w, d))


def window_reverse(windows, w, gh, gw):
    """Inverse of :func:`window_partition`."""
    *lead, nw, ww, d = windows.shape
    if nw != (gh // w) * (gw // w) or ww != w * w:
        raise DimensionError(f"windows {windows.shape} do not tile a {gh}x{gw} grid with w={w}")
    k = len(lead)
    y = reshape(windows, (*lead, gh // w, gw // w, w, w, d))
    y = transpose(y, tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    return reshape(y, (*lead, gh, gw, d))


def cyclic_shift(x, s):
    """``out[i, j] = in[(i + s) % gh, (j + s) % gw]`` over the two grid axes before the last."""
    return roll(x, (-s, -s), (-3, -2)) if s else x


def inverse_cyclic_shift(x, s):
    return roll(x, (s, s), (-3, -2)) if s else x


def shift_region_labels(gh, gw, w, s):
    """Integer region id per token of the shifted grid (Swin's three-slice layout per axis)."""
    labels = np.zeros((gh, gw), dtype=np.int64)
    if s == 0:
        return labels
    cnt = 0
    for rs in (slice(0, gh - w), slice(gh - w, gh - s), slice(gh - s, gh)):
        for cs in (slice(0, gw - w), slice(gw - w, gw - s), slice(gw - s, gw)):
            labels[rs, cs] = cnt
            cnt += 1
    return labels


@lru_cache(maxsize=32)
def build_shift_mask(gh, gw, w, s):
    """Additive mask ``[nW, w*w, w*w]``: 0 within a region, a large negative across regions."""
    nw = (gh // w) * (gw // w)
    if s == 0:
        return np.zeros((nw, w * w, w * w))
    lab = shift_region_labels(gh, gw, w, s)
    win = lab.reshape(gh // w, w, gw // w, w).transpose(0, 2, 1, 3).reshape(nw, w * w)
    diff = win[:, :, None] != win[:, None, :]
    mask = np.where(diff, MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


@lru_cache(maxsize=32)
def relative_position_index(w):
    """``[w*w, w*w]`` index into the ``(2w-1)^2`` bias table for each query/key pair."""
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    idx = rel[0] * (2 * w - 1) + rel[1]
    idx.setflags(write=False)
    return idx


# -- attention and blocks ------------------------------------------------------------

def msa_window(windows, p, heads, mask=None, return_attn=False):
    """Multi-head attention inside each window.

    ``windows`` is ``[G, B, nW, T, D]``; ``p`` holds ``qkv.w/b``, ``proj.w/b``
    and ``rpb`` (``[G, (2w-1)^2, heads]``). ``mask`` is ``[nW, T, T]`` or None.
    """
    g, bsz, nw, tok, d = windows.shape
    if d % heads:
        raise DimensionError(f"embed dim {d} is not divisible by {heads} heads")
    hd = d // heads
    w = math.isqrt(tok)
    if w * w != tok:
        raise DimensionError(f"window token count {tok} is not a square")
    qkv = glinear(windows, p["qkv.w"], p["qkv.b"])
    qkv = transpose(reshape(qkv, (g, bsz, nw, tok, 3, heads, hd)), (4, 0, 1, 2, 5, 3, 6))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q * (1.0 / math.sqrt(hd)), swap_last(k))  # G, B, nW, h, T, T
    bias = take(p["rpb"], relative_position_index(w).reshape(-1), axis=1)  # G, T*T, h
    bias = reshape(transpose(reshape(bias, (g, tok, tok, heads)), (0, 3, 1, 2)),
                   (g, 1, 1, heads, tok, tok))
    scores = scores + bias
    if mask is not None:
        scores = scores + Tensor(np.asarray(mask).reshape(1, 1, nw, 1, tok, tok))
    attn = softmax_lastdim(scores)
    out = matmul(attn, v)
    out = reshape(transpose(out, (0, 1, 2, 4, 3, 5)), (g, bsz, nw, tok, d))
    out = glinear(out, p["proj.w"], p["proj.b"])
    return (out, attn) if return_attn else out


def _sub(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _ln(x, p, which, eps):
    g = p[f"{which}.g"]
    d = g.shape[-1]
    shape = (g.shape[0],) + (1,) * (x.ndim - 2) + (d,)
    return layer_norm(x, reshape(g, shape), reshape(p[f"{which}.b"], shape), eps)


def swin_block(t, p, cfg, shift):
    """One pre-norm block on a ``[G, B, gh, gw, D]`` token grid."""
    _, _, gh, gw, _ = t.shape
    w = cfg.window
    h = cyclic_shift(_ln(t, p, "ln1", cfg.ln_eps), shift)
    mask = build_shift_mask(gh, gw, w, shift) if shift else None
    a = msa_window(window_partition(h, w), _sub(p, "attn."), cfg.heads, mask)
    t = t + inverse_cyclic_shift(window_reverse(a, w, gh, gw), shift)
    h = _ln(t, p, "ln2", cfg.ln_eps)
    h = glinear(gelu(glinear(h, p["mlp.fc1.w"], p["mlp.fc1.b"])), p["mlp.fc2.w"], p["mlp.fc2.b"])
    return t + h


def vit(x, params, cfg, out_ch=None):
    """``[B, C, M, N] -> [G, B, out_ch, M, N]``: W-MSA block then SW-MSA block."""
    _, c, m, n = x.shape
    cfg.validate(m, n)
    out_ch = c if out_ch is None else out_ch
    t = patch_embed(x, params["embed.w"], params["embed.b"], cfg.patch)
    t = swin_block(t, _sub(params, "block0."), cfg, 0)
    t = swin_block(t, _sub(params, "block1."), cfg, cfg.shift_size)
    return patch_unembed(t, params["unembed.w"], params["unembed.b"], cfg.patch, out_ch)

