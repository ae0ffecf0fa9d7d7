"""Verification suites behind ``spectracast gradcheck`` and ``spectracast selftest``.

Each check returns a :class:`CheckResult`; a suite is a list of them. The
gradient suite runs in 64-bit mode on tiny configurations (3 x 8 x 8 grid,
patch 2, window 2, 2 heads, at most 2 layers).
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    conv2d,
    exp,
    gelu,
    glinear,
    grad_check,
    layer_norm,
    log,
    matmul,
    mse,
    precision,
    roll,
    sigmoid,
    softmax_lastdim,
    stack,
    take,
    tanh,
    transpose,
)
from .cells import CellState, cell_param_shapes, convlstm_cell, stlstm_cell, vitlstm_cell
from .forecaster import ModelConfig, model_forward, model_init
from .swin import (
    SwinConfig,
    build_shift_mask,
    cyclic_shift,
    inverse_cyclic_shift,
    msa_window,
    swin_param_shapes,
    vit,
    window_partition,
    window_reverse,
)

KERNEL_TOL = 1e-5
COMPONENT_TOL = 1e-4
TINY_SWIN = SwinConfig(patch=2, window=2, shift=1, heads=2, embed_dim=8)


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    seconds: float = 0.0

    @property
    def passed(self):
        return bool(self.value < self.tol)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (< {self.tol:g}) [{self.seconds:.1f}s]"


def _timed(name, tol, fn):
    t0 = time.perf_counter()
    value = float(fn())
    return CheckResult(name, value, tol, time.perf_counter() - t0)


# -- gradient suite ----------------------------------------------------------------

_KERNELS = {
    "add_mul_div": (lambda a, b: (a * b + a / (b * b + 1.0) - b).sum(), [(4, 3), (4, 3)]),
    "exp_log": (lambda a: (exp(a * 0.5) + log(a * a + 1.0)).sum(), [(6,)]),
    "matmul": (lambda a, b: (matmul(a, b) * matmul(a, b)).sum(), [(2, 3, 4), (1, 4, 2)]),
    "softmax": (lambda x, w: (softmax_lastdim(x) * w).sum(), [(3, 5), (3, 5)]),
    "layer_norm": (lambda x, g, b, w: (layer_norm(x, g, b) * w).sum(), [(4, 6), (6,), (6,), (4, 6)]),
    "sigmoid": (lambda x: (sigmoid(x) * sigmoid(x)).sum(), [(7,)]),
    "tanh": (lambda x: (tanh(x) * tanh(x)).sum(), [(7,)]),
    "gelu": (lambda x: (gelu(x) * gelu(x)).sum(), [(9,)]),
    "glinear": (lambda x, w, b, r: (glinear(x, w, b) * r).sum(), [(1, 2, 3, 4), (3, 4, 5), (3, 5), (3, 2, 3, 5)]),
    "conv2d": (lambda x, w, b, r: (conv2d(x, w, b) * r).sum(), [(2, 2, 5, 4), (3, 2, 3, 3), (3,), (2, 3, 5, 4)]),
    "mse": (lambda x: mse(x, np.linspace(0, 1, 6).reshape(2, 3)), [(2, 3)]),
    "shape_ops": (lambda x, y, r: (stack([transpose(roll(x, (1,), (1,)), (1, 0))[:2],
                                          concat([take(y, np.array([0, 2]), 1), y[:, :1]], 1)], 0) * r).sum(),
                  [(3, 2), (2, 3), (2, 2, 3)]),
}


def _random_inputs(shapes, rng):
    return [Tensor(rng.standard_normal(s)) for s in shapes]


def _random_params(shapes, rng, scale=0.3):
    return {k: Tensor((1.0 if k.endswith(".g") else 0.0) + scale * rng.standard_normal(s))
            for k, s in shapes.items()}


def kernel_checks(seeds=(0, 1, 2)):
    out = []
    for name, (f, shapes) in _KERNELS.items():
        def run(f=f, shapes=shapes):
            return max(grad_check(f, _random_inputs(shapes, np.random.default_rng(s))) for s in seeds)
        out.append(_timed(f"kernel:{name}", KERNEL_TOL, run))
    return out


def _vit_check():
    rng = np.random.default_rng(10)
    p = _random_params(swin_param_shapes(TINY_SWIN, 1, 3, 3), rng)
    x = Tensor(rng.random((1, 3, 8, 8)))
    r = Tensor(rng.standard_normal((1, 1, 3, 8, 8)))
    names = sorted(p)
    return grad_check(lambda x, *ps: (vit(x, dict(zip(names, ps)), TINY_SWIN) * r).sum(),
                      [x] + [p[k] for k in names], max_coords=8)


def _cell_check(kind):
    rng = np.random.default_rng(20)
    hidden = 3
    p = _random_params(cell_param_shapes(kind, 3, hidden, TINY_SWIN, 3), rng)
    x = Tensor(rng.standard_normal((1, 3, 8, 8)))
    h, c, m = (Tensor(0.5 * rng.standard_normal((1, hidden, 8, 8))) for _ in range(3))
    r = [Tensor(rng.standard_normal((1, hidden, 8, 8))) for _ in range(3)]
    names = sorted(p)

    def loss(x, h, c, m, *ps):
        q = dict(zip(names, ps))
        if kind == "convlstm":
            s = convlstm_cell(x, h, c, q)
            return (s.h * r[0] + s.c * r[1]).sum()
        s = vitlstm_cell(x, CellState(h, c), m, q, TINY_SWIN) if kind == "vitlstm" \
            else stlstm_cell(x, CellState(h, c), m, q)
        return (s.h * r[0] + s.c * r[1] + s.m * r[2]).sum()

    return grad_check(loss, [x, h, c, m] + [p[k] for k in names], max_coords=6)


_E2E_PERTURBED = ("embed.w", "qkv.w", "rpb", "fc2.w", "unembed.w", "b_o", "b_f", "fuse.w", "conv_m.w",
                  "conv.w", "conv.b", "head.w", "head.b")


def _e2e_check(kind):
    from .training import sequence_loss

    cfg = ModelConfig(cell=kind, layers=2, channels=3, height=8, width=8, input_len=2, pred_len=2,
                      swin=TINY_SWIN, kernel=3)
    rng = np.random.default_rng(30)
    params = {k: Tensor(v.data + 0.3 * rng.standard_normal(v.shape)) for k, v in model_init(cfg, 30).items()}
    windows = rng.random((1, 4, 3, 8, 8))
    names = sorted(params)
    # every gradient is computed; a representative subset is perturbed numerically
    chosen = [n for n in names if n.endswith(_E2E_PERTURBED)]
    fixed = {n: params[n] for n in names if n not in chosen}
    return grad_check(lambda *ps: sequence_loss({**fixed, **dict(zip(chosen, ps))}, cfg, windows),
                      [params[n] for n in chosen], max_coords=2)


def gradcheck_suite(include_kernels=True):
    """All gradient checks; kernels at 1e-5, composite components at 1e-4."""
    with precision("f64"):
        out = kernel_checks() if include_kernels else []
        out.append(_timed("vit", KERNEL_TOL, _vit_check))
        for kind in ("vitlstm", "stlstm", "convlstm"):
            out.append(_timed(f"cell:{kind}", KERNEL_TOL, lambda k=kind: _cell_check(k)))
        for kind in ("vitlstm", "stlstm", "convlstm"):
            out.append(_timed(f"loss:{kind}", COMPONENT_TOL, lambda k=kind: _e2e_check(k)))
    return out


# -- quick self test ---------------------------------------------------------------

def _idw_check():
    from .data import SensorReading, idw_interpolate

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(3):
        flat = rng.choice(64, size=4, replace=False)
        rd = [SensorReading(f"s{k}", 0, int(f // 8), int(f % 8), float(v))
              for k, (f, v) in enumerate(zip(flat, rng.uniform(-100, -20, 4)))]
        got = idw_interpolate(rd, (8, 8)).values
        for i in range(8):
            for j in range(8):
                hit = [r.power_dbm for r in rd if (r.row, r.col) == (i, j)]
                if hit:
                    ref = hit[0]
                else:
                    w = [math.hypot(i - r.row, j - r.col) ** -2 for r in rd]
                    ref = sum(a * r.power_dbm for a, r in zip(w, rd)) / sum(w)
                worst = max(worst, abs(got[i, j] - ref))
    return worst


def _attention_rows_check():
    rng = np.random.default_rng(1)
    p = _random_params({"qkv.w": (1, 8, 24), "qkv.b": (1, 24), "rpb": (1, 49, 2), "proj.w": (1, 8, 8),
                        "proj.b": (1, 8)}, rng, scale=1.0)
    mask = build_shift_mask(8, 8, 4, 2)
    _, attn = msa_window(Tensor(rng.standard_normal((1, 1, 4, 16, 8))), p, 2, mask, return_attn=True)
    cross = (attn.data * (mask < 0)[None, None, :, None]).sum(-1).max()
    return max(np.abs(attn.data.sum(-1) - 1).max(), cross)


def _round_trip_check():
    x = np.random.default_rng(2).standard_normal((2, 8, 8, 3)).astype(np.float32)
    t = Tensor(x)
    a = window_reverse(window_partition(t, 4), 4, 8, 8).data
    b = inverse_cyclic_shift(cyclic_shift(t, 2), 2).data
    return 0.0 if a.tobytes() == x.tobytes() and b.tobytes() == x.tobytes() else 1.0


def _determinism_check():
    cfg = ModelConfig(cell="vitlstm", layers=2, height=8, width=8, input_len=2, pred_len=2, swin=TINY_SWIN)
    frames = np.random.default_rng(3).random((1, 4, 3, 8, 8)).astype(np.float32)
    a = model_forward(frames, cfg, model_init(cfg, 4)).data
    b = model_forward(frames, cfg, model_init(cfg, 4)).data
    return 0.0 if a.tobytes() == b.tobytes() else 1.0


def _zigzag_check():
    cfg = ModelConfig(cell="vitlstm", layers=2, height=8, width=8, input_len=2, pred_len=2, swin=TINY_SWIN)
    trace = []
    model_forward(np.random.default_rng(5).random((1, 4, 3, 8, 8)), cfg, model_init(cfg, 5), trace=trace)
    flow = [(r["m_in"], prev["m_out"]) for prev, r in zip(trace, trace[1:])]
    return 0.0 if all(a.tobytes() == b.tobytes() for a, b in flow) else 1.0


def _causality_check():
    cfg = ModelConfig(cell="convlstm", layers=2, height=8, width=8, input_len=3, pred_len=3, kernel=3)
    p = model_init(cfg, 6)
    frames = np.random.default_rng(6).random((1, 6, 3, 8, 8)).astype(np.float32)
    poked = frames.copy()
    poked[:, 3:] += 0.5
    a = model_forward(frames, cfg, p).data
    b = model_forward(poked, cfg, p).data
    return 0.0 if a.tobytes() == b.tobytes() else 1.0


def _metric_check():
    from .training import psnr_from_mse

    return abs(psnr_from_mse(0.01) - 20.0)


def selftest_suite():
    checks = [
        ("idw_oracle", 1e-9, _idw_check),
        ("attention_rows_and_mask", 1e-6, _attention_rows_check),
        ("partition_shift_round_trip", 0.5, _round_trip_check),
        ("init_forward_determinism", 0.5, _determinism_check),
        ("zigzag_memory", 0.5, _zigzag_check),
        ("autoregressive_causality", 0.5, _causality_check),
        ("psnr_hand_value", 1e-9, _metric_check),
    ]
    out = [_timed(n, tol, f) for n, tol, f in checks]
    with precision("f64"):
        out += [_timed("grad:vit", KERNEL_TOL, _vit_check),
                _timed("grad:cell:convlstm", KERNEL_TOL, lambda: _cell_check("convlstm"))]
    return out
