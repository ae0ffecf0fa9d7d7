"""Stacked recurrent forecaster with PredRNN-style zigzag memory.

The spatiotemporal memory climbs the layer stack within a time step and
wraps from the top layer at step t to the bottom layer at step t+1. For the
first J steps the ground-truth frame is the input; afterwards the model's own
previous prediction is fed back. A 1x1 head turns the top hidden state into
the next frame.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import AdamState, Tensor, clamp, conv2d, get_dtype, read_blob, stack, write_blob
from .cells import CellState, cell_param_shapes, convlstm_cell, init_cell_params, stlstm_cell, vitlstm_cell
from .errors import CheckpointError, ConfigError, DimensionError, FormatError
from .swin import SwinConfig

CELL_KINDS = ("vitlstm", "stlstm", "convlstm")
CHECKPOINT_FORMAT = "spectracast-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    cell: str = "vitlstm"
    layers: int = 2
    channels: int = 3
    height: int = 64
    width: int = 64
    hidden_mult: int = 1
    input_len: int = 10
    pred_len: int = 10
    swin: SwinConfig = field(default_factory=SwinConfig)
    kernel: int = 5
    seed: int = 0

    @property
    def hidden(self):
        return self.channels * self.hidden_mult

    def validate(self):
        if self.cell not in CELL_KINDS:
            raise ConfigError(f"cell must be one of {CELL_KINDS}, got {self.cell!r}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.input_len < 1 or self.pred_len < 1:
            raise ConfigError("input_len and pred_len must be >= 1")
        if min(self.channels, self.height, self.width, self.hidden_mult) < 1:
            raise ConfigError("channels, grid extents and hidden_mult must be >= 1")
        if self.cell == "vitlstm":
            self.swin.validate(self.height, self.width)
        elif self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be a positive odd number, got {self.kernel}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["swin"] = self.swin.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if "swin" in d:
            d["swin"] = SwinConfig.from_dict(d["swin"])
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# -- parameters --------------------------------------------------------------------

def model_param_shapes(cfg):
    cfg.validate()
    shapes = {}
    for layer in range(cfg.layers):
        in_ch = cfg.channels if layer == 0 else cfg.hidden
        for name, shp in cell_param_shapes(cfg.cell, in_ch, cfg.hidden, cfg.swin, cfg.kernel).items():
            shapes[f"layer{layer}.{name}"] = shp
    shapes["head.w"] = (cfg.channels, cfg.hidden, 1, 1)
    shapes["head.b"] = (cfg.channels,)
    return shapes


def param_count(cfg):
    return int(sum(np.prod(s) for s in model_param_shapes(cfg).values()))


def model_init(cfg, seed=None):
    """Deterministic parameter set for ``cfg``; ``seed`` defaults to ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for layer in range(cfg.layers):
        in_ch = cfg.channels if layer == 0 else cfg.hidden
        for name, t in init_cell_params(cfg.cell, rng, in_ch, cfg.hidden, cfg.swin, cfg.kernel).items():
            params[f"layer{layer}.{name}"] = t
    bound = 1.0 / np.sqrt(cfg.hidden)
    params["head.w"] = Tensor(rng.uniform(-bound, bound, (cfg.channels, cfg.hidden, 1, 1)), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(cfg.channels), requires_grad=True)
    return params


def layer_params(params, layer):
    prefix = f"layer{layer}."
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


# -- forward -----------------------------------------------------------------------

def output_head(h, params, clamp_output=False):
    """1x1 projection of the top hidden state to frame channels; clamped to [0, 1] on request."""
    y = conv2d(h, params["head.w"], params["head.b"])
    return clamp(y, 0.0, 1.0) if clamp_output else y


def model_forward(frames, cfg, params, mode="infer", return_all=False, trace=None):
    """Roll the stack over ``frames[:, :J]`` and then ``K - 1`` autoregressive steps.

    ``frames`` is ``[B, T, C, M, N]`` with ``T >= J``; only the first J are read.
    Returns the K forecast frames ``[B, K, C, M, N]``, or all ``J + K - 1``
    next-frame predictions when ``return_all``. In ``"infer"`` mode the returned
    frames are clamped to [0, 1]; the fed-back predictions are never clamped.
    ``trace``, when a list, receives one dict per (step, layer) with the memory
    consumed and produced.
    """
    if mode not in ("infer", "train"):
        raise ConfigError(f"mode must be 'infer' or 'train', got {mode!r}")
    data = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    j, k = cfg.input_len, cfg.pred_len
    if data.ndim != 5 or data.shape[2:] != (cfg.channels, cfg.height, cfg.width) or data.shape[1] < j:
        raise DimensionError(
            f"frames must be [B, >={j}, {cfg.channels}, {cfg.height}, {cfg.width}], got {data.shape}"
        )
    dtype = get_dtype()
    bsz = data.shape[0]
    zeros = np.zeros((bsz, cfg.hidden, cfg.height, cfg.width), dtype=dtype)
    states = [CellState(h=Tensor(zeros), c=Tensor(zeros)) for _ in range(cfg.layers)]
    memory = Tensor(zeros)
    per_layer = [layer_params(params, layer) for layer in range(cfg.layers)]

    preds = []
    prev_pred = None
    for step in range(j + k - 1):
        inp = Tensor(data[:, step].astype(dtype, copy=False)) if step < j else prev_pred
        for layer in range(cfg.layers):
            p = per_layer[layer]
            prev = states[layer]
            if cfg.cell == "convlstm":
                new = convlstm_cell(inp, prev.h, prev.c, p)
            else:
                m_in = memory
                if cfg.cell == "vitlstm":
                    new = vitlstm_cell(inp, prev, m_in, p, cfg.swin)
                else:
                    new = stlstm_cell(inp, prev, m_in, p)
                memory = new.m
                if trace is not None:
                    trace.append({"step": step, "layer": layer, "m_in": m_in.data, "m_out": new.m.data})
            states[layer] = new
            inp = new.h
        prev_pred = output_head(states[-1].h, params)
        preds.append(prev_pred)

    out = stack(preds if return_all else preds[j - 1:], axis=1)
    return clamp(out, 0.0, 1.0) if mode == "infer" else out


# -- checkpoints -------------------------------------------------------------------

def checkpoint_save(path, cfg, params, opt_state=None, extra=None):
    """Write ``manifest.json``, ``params.bin`` and (optionally) ``optim.bin`` under ``path``."""
    os.makedirs(path, exist_ok=True)
    write_blob(os.path.join(path, "params.bin"), {k: v.data for k, v in params.items()})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "model_config": cfg.to_dict(),
        "params_file": "params.bin",
        "optimizer": None,
        "extra": extra or {},
    }
    if opt_state is not None:
        moments = {}
        for name in opt_state.m:
            moments[f"m.{name}"] = opt_state.m[name]
            moments[f"v.{name}"] = opt_state.v[name]
        write_blob(os.path.join(path, "optim.bin"), moments)
        manifest["optimizer"] = {
            "file": "optim.bin", "step": opt_state.step, "lr": opt_state.lr,
            "beta1": opt_state.beta1, "beta2": opt_state.beta2, "eps": opt_state.eps,
        }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def checkpoint_load(path, cfg=None):
    """Return ``(cfg, params, opt_state_or_None, extra)``.

    When ``cfg`` is given it must match the stored tensors name for name and
    shape for shape; the first offending tensor is named in the error.
    """
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {mpath}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    stored_cfg = ModelConfig.from_dict(manifest["model_config"])
    cfg = stored_cfg if cfg is None else cfg
    try:
        arrays = read_blob(os.path.join(path, manifest["params_file"]))
    except (FormatError, OSError) as exc:
        raise CheckpointError(f"cannot read parameters: {exc}") from None

    expected = model_param_shapes(cfg)
    for name, shape in expected.items():
        if name not in arrays:
            raise CheckpointError(f"tensor {name} missing from checkpoint")
        if tuple(arrays[name].shape) != tuple(shape):
            raise CheckpointError(
                f"tensor {name} has shape {tuple(arrays[name].shape)} in checkpoint, config expects {tuple(shape)}"
            )
    for name in arrays:
        if name not in expected:
            raise CheckpointError(f"tensor {name} in checkpoint is not part of the model config")
    dtype = get_dtype()
    params = {name: Tensor(arrays[name].astype(dtype), requires_grad=True) for name in expected}

    opt_state = None
    opt = manifest.get("optimizer")
    if opt:
        moments = read_blob(os.path.join(path, opt["file"]))
        opt_state = AdamState(lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"],
                              step=opt["step"])
        for name in expected:
            if f"m.{name}" in moments:
                opt_state.m[name] = moments[f"m.{name}"].astype(dtype)
                opt_state.v[name] = moments[f"v.{name}"].astype(dtype)
    return cfg, params, opt_state, manifest.get("extra", {})
