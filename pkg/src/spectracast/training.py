"""Training loop, metrics, evaluation and report emission."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Adam, AdamState, get_dtype, mse, no_grad
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DimensionError,
    NumericError,
    ReportError,
    TrainingDivergedError,
)
from .forecaster import checkpoint_load, checkpoint_save, model_forward, model_init

PSNR_INF = math.inf


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    iterations: int = 1000
    seed: int = 0
    patience: int | None = None
    checkpoint_every: int | None = None

    def validate(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.iterations < 1:
            raise ConfigError("batch_size and iterations must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1 when set")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1 when set")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# -- metrics -----------------------------------------------------------------------

def mse_value(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    return float(np.mean(d * d))


def rmse_value(pred, target):
    return math.sqrt(mse_value(pred, target))


def psnr_from_mse(value, max_val=1.0):
    if value == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(max_val * max_val / value)


def psnr(pred, target, max_val=1.0):
    return psnr_from_mse(mse_value(pred, target), max_val)


# -- training ----------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    opt_state: AdamState
    history: list  # (iteration, train_loss, val_loss or None)
    iterations_run: int
    stopped_early: bool = False


def batch_indices(train_idx, batch_size, iteration, seed):
    """Indices for ``iteration`` drawn from a stream of seeded per-epoch permutations."""
    n = len(train_idx)
    start = iteration * batch_size
    out = []
    pos = start
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset:offset + take].tolist())
        pos += take
    return np.asarray(train_idx)[out]


def sequence_loss(params, cfg, windows):
    """MSE over every next-frame prediction from step 2 through J+K."""
    preds = model_forward(windows, cfg, params, mode="train", return_all=True)
    return mse(preds, windows[:, 1:].astype(get_dtype(), copy=False))


def dataset_loss(params, cfg, dataset, indices, batch_size=4):
    """Mean ``sequence_loss`` over ``indices`` (every element weighted equally)."""
    indices = list(indices)
    if not indices:
        return None
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(indices), batch_size):
            chunk = indices[s:s + batch_size]
            loss = sequence_loss(params, cfg, dataset.window(chunk))
            total += float(loss.data) * len(chunk)
            count += len(chunk)
    return total / count


def constant_mean_mse(dataset, indices):
    """MSE of predicting every supervised frame with their global mean value."""
    w = dataset.window(list(indices))[:, 1:].astype(np.float64)
    return float(np.mean((w - w.mean()) ** 2))


def _check_geometry(cfg, dataset):
    if dataset.geometry != (cfg.channels, cfg.height, cfg.width):
        raise CheckpointError(
            f"dataset geometry {dataset.geometry} does not match model "
            f"{(cfg.channels, cfg.height, cfg.width)}"
        )
    if (dataset.input_len, dataset.pred_len) != (cfg.input_len, cfg.pred_len):
        raise ConfigError(
            f"dataset windows J={dataset.input_len},K={dataset.pred_len} do not match model "
            f"J={cfg.input_len},K={cfg.pred_len}"
        )


def train(dataset, model_cfg, train_cfg, out_dir=None, resume=None, train_indices=None, log=None):
    """Run Adam on mini-batches of the training split for ``train_cfg.iterations`` steps.

    ``resume`` is a checkpoint directory written by an earlier call; training
    continues from its iteration with identical batches. ``train_indices``
    overrides the split (e.g. a single repeated sample for an overfit probe).
    """
    model_cfg.validate()
    train_cfg.validate()
    _check_geometry(model_cfg, dataset)
    idx = list(dataset.split.train if train_indices is None else train_indices)
    if not idx:
        raise DataError("training split is empty")
    val_idx = list(dataset.split.val) if train_indices is None else []

    if resume is not None:
        _, params, opt_state, extra = checkpoint_load(resume, model_cfg)
        start = int(extra.get("iteration", 0))
        history = [tuple(h) for h in extra.get("history", [])]
        best = extra.get("best_val")
        stale = int(extra.get("stale_epochs", 0))
        opt = Adam(params, lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps)
        if opt_state is not None:
            opt.state.m, opt.state.v, opt.state.step = opt_state.m, opt_state.v, opt_state.step
    else:
        params = model_init(model_cfg)
        opt = Adam(params, lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps)
        start, history, best, stale = 0, [], None, 0

    def save(iteration):
        if out_dir is None:
            return
        checkpoint_save(out_dir, model_cfg, params, opt.state, extra={
            "iteration": iteration,
            "history": [list(h) for h in history],
            "train_config": train_cfg.to_dict(),
            "best_val": best,
            "stale_epochs": stale,
        })

    bsz = train_cfg.batch_size
    n = len(idx)
    stopped = False
    it = start
    for it in range(start, train_cfg.iterations):
        batch = batch_indices(idx, bsz, it, train_cfg.seed)
        opt.zero_grad()
        value = math.nan
        try:
            loss = sequence_loss(params, model_cfg, dataset.window(batch))
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(it + 1, value)
            loss.backward()
            opt.step()
        except TrainingDivergedError:
            raise
        except NumericError as exc:
            # debug builds trip the op-boundary check before the loss is formed
            raise TrainingDivergedError(it + 1, value, str(exc)) from exc

        val = None
        epoch_done = ((it + 1) * bsz) // n > (it * bsz) // n
        if epoch_done and val_idx:
            val = dataset_loss(params, model_cfg, dataset, val_idx, bsz)
            if best is None or val < best:
                best, stale = val, 0
            else:
                stale += 1
        history.append((it + 1, value, val))
        if log is not None:
            log(it + 1, value, val)
        if train_cfg.checkpoint_every and (it + 1) % train_cfg.checkpoint_every == 0:
            save(it + 1)
        if train_cfg.patience is not None and stale >= train_cfg.patience:
            stopped = True
            it += 1
            break
    else:
        it = train_cfg.iterations
    save(it)
    return TrainResult(params=params, opt_state=opt.state, history=history,
                       iterations_run=it - start, stopped_early=stopped)


def write_loss_history(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "train_loss", "val_loss"])
        for it, tl, vl in history:
            w.writerow([it, repr(float(tl)), "" if vl is None else repr(float(vl))])


# -- evaluation --------------------------------------------------------------------

@dataclass
class EvalReport:
    model: str
    mse: list
    rmse: list
    psnr: list
    metadata: dict = field(default_factory=dict)

    @property
    def horizons(self):
        return len(self.mse)

    @property
    def avg_mse(self):
        return float(np.mean(self.mse))

    @property
    def avg_rmse(self):
        return float(np.mean(self.rmse))

    @property
    def avg_psnr(self):
        return float(np.mean(self.psnr))

    @classmethod
    def from_mse(cls, model, per_horizon_mse, metadata=None):
        m = [float(v) for v in per_horizon_mse]
        return cls(model=model, mse=m, rmse=[math.sqrt(v) for v in m],
                   psnr=[psnr_from_mse(v) for v in m], metadata=dict(metadata or {}))


def evaluate_predictor(predict, dataset, indices, model="model", batch_size=4, metadata=None):
    """Per-horizon metrics of ``predict(inputs[B, J, ...]) -> [B, K, ...]`` over ``indices``.

    Averages run over samples and pixels within a horizon, then over horizons.
    """
    indices = list(indices)
    if not indices:
        raise DataError("no samples to evaluate")
    k = dataset.pred_len
    j = dataset.input_len
    sse = np.zeros(k)
    count = 0
    for s in range(0, len(indices), batch_size):
        w = dataset.window(indices[s:s + batch_size])
        pred = np.asarray(predict(w[:, :j]), dtype=np.float64)
        target = w[:, j:].astype(np.float64)
        if pred.shape != target.shape:
            raise DimensionError(f"predictor returned {pred.shape}, targets are {target.shape}")
        d = pred - target
        sse += (d * d).reshape(d.shape[0], k, -1).sum(axis=(0, 2))
        count += d.shape[0] * int(np.prod(d.shape[2:]))
    meta = {"samples": len(indices), "averaging": "per-horizon mean over samples and pixels; "
            "averages are the mean over horizons"}
    meta.update(metadata or {})
    return EvalReport.from_mse(model, sse / count, meta)


def model_predictor(cfg, params):
    def predict(inputs):
        with no_grad():
            return model_forward(inputs, cfg, params, mode="infer").data
    return predict


def evaluate(checkpoint, dataset, split="test", batch_size=4, model=None):
    """Evaluate a checkpoint directory (or a ``(cfg, params)`` pair) on a dataset split."""
    if isinstance(checkpoint, (str, os.PathLike)):
        cfg, params, _, _ = checkpoint_load(checkpoint)
    else:
        cfg, params = checkpoint
    _check_geometry(cfg, dataset)
    indices = getattr(dataset.split, split)
    return evaluate_predictor(model_predictor(cfg, params), dataset, indices,
                              model=model or cfg.cell, batch_size=batch_size,
                              metadata={"split": split})


# -- reports -----------------------------------------------------------------------

REPORT_HEADER = ["model", "horizon", "mse", "rmse", "psnr"]


def _fmt(v):
    return "inf" if v == math.inf else repr(float(v))


def report_csv(reports):
    reports = list(reports)
    if not reports:
        raise ReportError("no reports to emit")
    ks = {r.horizons for r in reports}
    if len(ks) != 1:
        raise ReportError(f"reports disagree on horizon count: {sorted(ks)}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in reports:
        for h in range(r.horizons):
            w.writerow([r.model, h + 1, _fmt(r.mse[h]), _fmt(r.rmse[h]), _fmt(r.psnr[h])])
        w.writerow([r.model, "avg", _fmt(r.avg_mse), _fmt(r.avg_rmse), _fmt(r.avg_psnr)])
    return buf.getvalue()


def parse_report_csv(text):
    """Inverse of :func:`report_csv`: ``{model: EvalReport}`` (average rows are checked, not stored)."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != REPORT_HEADER:
        raise ReportError(f"report header must be {','.join(REPORT_HEADER)}")
    per = {}
    for row in rows[1:]:
        model, horizon, m, r, p = row
        entry = per.setdefault(model, {"rows": [], "avg": None})
        vals = (float(m), float(r), float(p))
        if horizon == "avg":
            entry["avg"] = vals
        else:
            entry["rows"].append((int(horizon), vals))
    out = {}
    for model, entry in per.items():
        rows_ = sorted(entry["rows"])
        rep = EvalReport(model=model, mse=[v[0] for _, v in rows_],
                         rmse=[v[1] for _, v in rows_], psnr=[v[2] for _, v in rows_])
        if entry["avg"] is not None:
            for got, want in zip(entry["avg"], (rep.avg_mse, rep.avg_rmse, rep.avg_psnr)):
                if not (got == want or abs(got - want) <= 1e-9 * max(1.0, abs(want))):
                    raise ReportError(f"average row for {model} does not match its horizon rows")
        out[model] = rep
    return out


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


def line_chart_svg(series, title, ylabel, xlabel="horizon (steps ahead)", width=640, height=400):
    """Multi-series line chart; ``series`` maps a label to a list of y values (x = 1..K).

    Non-finite points are left out of their line.
    """
    ml, mr, mt, mb = 70, 150, 40, 50
    pw, ph = width - ml - mr, height - mt - mb
    finite = [v for ys in series.values() for v in ys if math.isfinite(v)]
    k = max((len(ys) for ys in series.values()), default=1)
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    def sx(x):
        return ml + (pw * (x - 1) / (k - 1) if k > 1 else pw / 2)

    def sy(y):
        return mt + ph * (1.0 - (y - lo) / (hi - lo))

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width), height=str(height),
                     viewBox=f"0 0 {width} {height}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")
    ET.SubElement(svg, "text", x=str(width / 2), y="22", **{"text-anchor": "middle", "font-size": "16"}).text = title
    ET.SubElement(svg, "line", x1=str(ml), y1=str(mt + ph), x2=str(ml + pw), y2=str(mt + ph), stroke="black")
    ET.SubElement(svg, "line", x1=str(ml), y1=str(mt), x2=str(ml), y2=str(mt + ph), stroke="black")
    for x in range(1, k + 1):
        ET.SubElement(svg, "text", x=f"{sx(x):.1f}", y=str(mt + ph + 18),
                      **{"text-anchor": "middle", "font-size": "11"}).text = str(x)
    for i in range(5):
        y = lo + (hi - lo) * i / 4
        ET.SubElement(svg, "text", x=str(ml - 6), y=f"{sy(y) + 4:.1f}",
                      **{"text-anchor": "end", "font-size": "11"}).text = f"{y:.4g}"
    ET.SubElement(svg, "text", x=str(ml + pw / 2), y=str(height - 10),
                  **{"text-anchor": "middle", "font-size": "12"}).text = xlabel
    ET.SubElement(svg, "text", x="16", y=str(mt + ph / 2), transform=f"rotate(-90 16 {mt + ph / 2})",
                  **{"text-anchor": "middle", "font-size": "12"}).text = ylabel
    for n, (label, ys) in enumerate(series.items()):
        color = _PALETTE[n % len(_PALETTE)]
        # exact values ride along so the chart can be read back without loss
        grp = ET.SubElement(svg, "g", **{"class": "series", "data-label": label,
                                          "data-values": " ".join(repr(float(v)) for v in ys)})
        pts = [f"{sx(i + 1):.1f},{sy(v):.1f}" for i, v in enumerate(ys) if math.isfinite(v)]
        if pts:
            ET.SubElement(grp, "polyline", points=" ".join(pts), fill="none", stroke=color,
                          **{"stroke-width": "2"})
        ly = mt + 10 + 20 * n
        ET.SubElement(svg, "line", x1=str(ml + pw + 15), y1=str(ly), x2=str(ml + pw + 40), y2=str(ly),
                      stroke=color, **{"stroke-width": "2"})
        ET.SubElement(svg, "text", x=str(ml + pw + 45), y=str(ly + 4), **{"font-size": "12"}).text = label
    return ET.tostring(svg, encoding="unicode")


def parse_chart_svg(text):
    """Series of a chart written by :func:`line_chart_svg`, as ``{label: [values]}``."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise ReportError(f"chart is not valid SVG: {exc}") from exc
    out = {}
    for g in root.iter("{http://www.w3.org/2000/svg}g"):
        if g.get("class") != "series":
            continue
        try:
            raw = g.get("data-values", "")
            out[g.get("data-label")] = [float(v) for v in raw.split()]
        except ValueError as exc:
            raise ReportError(f"bad series values in chart: {exc}") from exc
    return out


def report_emit(reports, csv_path, svg_prefix=None):
    """Write the comparison CSV and, when ``svg_prefix`` is set, ``<prefix>_mse.svg`` / ``_psnr.svg``."""
    reports = list(reports)
    text = report_csv(reports)
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    paths = [csv_path]
    if svg_prefix is not None:
        for metric, label in (("mse", "MSE"), ("psnr", "PSNR (dB)")):
            svg = line_chart_svg({r.model: getattr(r, metric) for r in reports},
                                 f"{label} vs prediction horizon", label)
            path = f"{svg_prefix}_{metric}.svg"
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(svg)
            paths.append(path)
    return paths
