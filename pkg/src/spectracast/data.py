"""Spectrum maps from sparse sensor readings.

Pipeline: readings CSV -> per-minute groups -> inverse-distance interpolation
onto an M x N grid (dBm) -> Jet false-color encoding (3 x M x N in [0, 1]) ->
sliding input/target windows. A seeded synthetic generator stands in for a
real sensor feed, and encoded frame stacks are stored in SPG files.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError, DataError, FormatError, ParseError, TruncationError, ValidationError

CSV_HEADER = ["sensor_id", "t_min", "row", "col", "power_dbm"]
DEFAULT_VMIN = -110.0
DEFAULT_VMAX = -10.0
SPG_MAGIC = b"SPG1"
_U32_MAX = 2**32 - 1


@dataclass(frozen=True)
class SensorReading:
    sensor_id: str
    t: int
    row: int
    col: int
    power_dbm: float


@dataclass
class SpectrumFrame:
    t: int
    values: np.ndarray  # M x N, dBm


@dataclass
class SequenceSample:
    start: int
    inputs: np.ndarray  # J x C x M x N
    targets: np.ndarray  # K x C x M x N


@dataclass(frozen=True)
class DatasetSplit:
    train: range
    val: range
    test: range


# -- ingestion -------------------------------------------------------------------

def ingest_readings_csv(path, grid):
    """Parse a readings CSV into ``{t_min: [SensorReading, ...]}`` sorted by time."""
    m, n = grid
    groups: dict[int, list[SensorReading]] = {}
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("missing header", line=1)
        if [h.strip() for h in header] != CSV_HEADER:
            raise ParseError(f"header must be {','.join(CSV_HEADER)}, got {','.join(header)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(CSV_HEADER):
                raise ParseError(f"expected {len(CSV_HEADER)} fields, got {len(row)}", line=lineno)
            sid = row[0].strip()
            try:
                t = int(row[1])
                r = int(row[2])
                c = int(row[3])
                p = float(row[4])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if not sid:
                raise ParseError("empty sensor_id", line=lineno)
            if not math.isfinite(p):
                raise ValidationError(f"line {lineno}: power_dbm is not finite")
            if not (0 <= r < m and 0 <= c < n):
                raise ValidationError(
                    f"line {lineno}: position ({r},{c}) out of range for {m}x{n} grid"
                )
            if (sid, t) in seen:
                raise ValidationError(f"line {lineno}: duplicate reading for sensor {sid} at t={t}")
            seen.add((sid, t))
            groups.setdefault(t, []).append(SensorReading(sid, t, r, c, p))
    return dict(sorted(groups.items()))


def write_readings_csv(path, readings):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rd in readings:
            w.writerow([rd.sensor_id, rd.t, rd.row, rd.col, repr(float(rd.power_dbm))])


# -- interpolation and encoding --------------------------------------------------

def idw_interpolate(readings, grid, power=2.0, t=None):
    """Inverse-distance-weighted field over the grid from one time step's readings.

    Weights are ``d ** -power`` in grid units; a cell holding a sensor takes
    that sensor's value (the mean, if several sensors share it).
    """
    if power <= 0:
        raise ConfigError(f"IDW power must be positive, got {power}")
    if not readings:
        raise DataError("IDW needs at least one reading")
    m, n = grid
    rows = [rd.row for rd in readings]
    cols = [rd.col for rd in readings]
    vals = [rd.power_dbm for rd in readings]
    values = _kernels.idw_grid(rows, cols, vals, m, n, power)
    return SpectrumFrame(t=readings[0].t if t is None else t, values=values)


def jet_encode(values, vmin=DEFAULT_VMIN, vmax=DEFAULT_VMAX):
    """Map dBm values to Jet RGB channels: ``[..., M, N] -> [..., 3, M, N]`` in [0, 1]."""
    if not vmin < vmax:
        raise ConfigError(f"jet_encode needs vmin < vmax, got {vmin} >= {vmax}")
    if isinstance(values, SpectrumFrame):
        values = values.values
    v = np.asarray(values, dtype=np.float64)
    u = np.clip((v - vmin) / (vmax - vmin), 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * u - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * u - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * u - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-3)


def encode_readings(groups, grid, power=2.0, vmin=DEFAULT_VMIN, vmax=DEFAULT_VMAX, interval=None):
    """Interpolate and encode every time group; returns ``(timestamps, frames[T,3,M,N])``.

    Timestamps must be evenly spaced (the sampling interval); gaps are rejected.
    """
    if not groups:
        raise DataError("no readings to encode")
    ts = sorted(groups)
    if interval is None:
        interval = min(np.diff(ts)) if len(ts) > 1 else 1
    for a, b in zip(ts, ts[1:]):
        if b - a != interval:
            raise DataError(f"timestamps not consecutive at interval {interval}: {a} -> {b}")
    frames = np.stack([
        jet_encode(idw_interpolate(groups[t], grid, power).values, vmin, vmax) for t in ts
    ]).astype(np.float32)
    return ts, frames, int(interval)


# -- sequences and splits --------------------------------------------------------

def make_sequences(frames, input_len, pred_len, stride=1):
    """Sliding ``(inputs, targets)`` windows over a ``[T, ...]`` frame stack, oldest first."""
    if input_len < 1 or pred_len < 1 or stride < 1:
        raise ConfigError("input_len, pred_len and stride must all be >= 1")
    total = len(frames)
    span = input_len + pred_len
    if total < span:
        raise DataError(f"need at least {span} frames for J={input_len}, K={pred_len}; got {total}")
    count = (total - span) // stride + 1
    return [
        SequenceSample(s, frames[s:s + input_len], frames[s + input_len:s + span])
        for s in range(0, count * stride, stride)
    ]


def chronological_split(n_samples, ratio=(4, 1, 1)):
    """Consecutive train/val/test index ranges in proportion ``ratio``."""
    if n_samples < len(ratio):
        raise DataError(f"cannot split {n_samples} samples {ratio[0]}:{ratio[1]}:{ratio[2]}")
    total = sum(ratio)
    n_train = n_samples * ratio[0] // total
    n_val = n_samples * ratio[1] // total
    if n_train == 0 or n_val == 0 or n_samples - n_train - n_val == 0:
        raise DataError(f"{n_samples} samples leave an empty split at ratio {ratio}")
    return DatasetSplit(
        train=range(0, n_train),
        val=range(n_train, n_train + n_val),
        test=range(n_train + n_val, n_samples),
    )


class SequenceDataset:
    """Encoded frames plus the windowing and 4:1:1 chronological split used for training."""

    def __init__(self, frames, input_len=10, pred_len=10, stride=1, meta=None):
        self.frames = np.ascontiguousarray(frames, dtype=np.float32)
        self.input_len = input_len
        self.pred_len = pred_len
        self.stride = stride
        self.meta = dict(meta or {})
        span = input_len + pred_len
        if len(self.frames) < span:
            raise DataError(f"need at least {span} frames for J={input_len}, K={pred_len}")
        self.starts = np.arange(0, (len(self.frames) - span) // stride * stride + 1, stride)
        self.split = chronological_split(len(self.starts))

    @classmethod
    def from_spg(cls, path, input_len=10, pred_len=10, stride=1):
        frames, meta = spg_read(path)
        return cls(frames, input_len, pred_len, stride, meta)

    @property
    def geometry(self):
        return tuple(self.frames.shape[1:])

    def __len__(self):
        return len(self.starts)

    def window(self, indices):
        """Stack full ``J + K`` windows for the given sample indices: ``[B, J+K, C, M, N]``."""
        span = self.input_len + self.pred_len
        return np.stack([self.frames[s:s + span] for s in self.starts[np.asarray(indices)]])


# -- synthetic data --------------------------------------------------------------

@dataclass
class SynthParams:
    baseline_dbm: float = -80.0
    diurnal_amp_db: float = 8.0
    period_min: float = 120.0
    n_emitters: int = 2
    emitter_amp_db: float = 30.0
    emitter_sigma: float = 3.0
    emitter_speed: float = 0.1
    noise_db: float = 0.5
    # explicit emitters as (row, col, v_row, v_col); overrides the random draw
    emitters: list = field(default_factory=list)
    sensor_positions: list = field(default_factory=list)


@dataclass
class SynthResult:
    readings: list
    truth: np.ndarray  # T x M x N, dBm
    sensors: list  # (sensor_id, row, col)
    emitter_paths: np.ndarray  # T x E x 2


def _reflect(p, hi):
    if hi <= 0:
        return np.zeros_like(p)
    y = np.mod(p, 2.0 * hi)
    return np.where(y <= hi, y, 2.0 * hi - y)


def synth_generate(seed, grid, n_sensors, minutes, params=None):
    """Seeded synthetic RSS field and the sensor readings sampled from it.

    Field = baseline + spatially uniform sinusoid in time + Gaussian emitters
    drifting with constant velocity (reflecting at the borders) + white noise.
    """
    p = params or SynthParams()
    m, n = grid
    if n_sensors < 1:
        raise ConfigError("n_sensors must be >= 1")
    if minutes < 1 or m < 1 or n < 1:
        raise ConfigError("grid extents and minutes must be >= 1")
    if p.period_min <= 0 or p.emitter_sigma <= 0 or p.noise_db < 0:
        raise ConfigError("period and emitter width must be positive, noise non-negative")
    rng = np.random.default_rng(seed)

    if p.sensor_positions:
        if len(p.sensor_positions) != n_sensors:
            raise ConfigError("sensor_positions length must equal n_sensors")
        cells = [tuple(rc) for rc in p.sensor_positions]
    else:
        if n_sensors > m * n:
            raise ConfigError(f"{n_sensors} sensors do not fit on a {m}x{n} grid")
        flat = rng.choice(m * n, size=n_sensors, replace=False)
        cells = [(int(f // n), int(f % n)) for f in flat]

    if p.emitters:
        em = np.asarray(p.emitters, dtype=np.float64).reshape(-1, 4)
    else:
        start = rng.uniform([0, 0], [m - 1, n - 1], size=(p.n_emitters, 2))
        angle = rng.uniform(0, 2 * np.pi, size=p.n_emitters)
        vel = p.emitter_speed * np.stack([np.sin(angle), np.cos(angle)], axis=-1)
        em = np.concatenate([start, vel], axis=-1).reshape(-1, 4)

    t = np.arange(minutes, dtype=np.float64)
    paths = np.stack([
        _reflect(em[:, 0][None] + t[:, None] * em[:, 2][None], m - 1),
        _reflect(em[:, 1][None] + t[:, None] * em[:, 3][None], n - 1),
    ], axis=-1)  # T x E x 2

    ii, jj = np.meshgrid(np.arange(m, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    field_ = p.baseline_dbm + p.diurnal_amp_db * np.sin(2 * np.pi * t / p.period_min)[:, None, None]
    field_ = np.broadcast_to(field_, (minutes, m, n)).copy()
    for e in range(paths.shape[1]):
        d2 = (ii[None] - paths[:, e, 0, None, None]) ** 2 + (jj[None] - paths[:, e, 1, None, None]) ** 2
        field_ += p.emitter_amp_db * np.exp(-d2 / (2.0 * p.emitter_sigma ** 2))
    if p.noise_db > 0:
        field_ += p.noise_db * rng.standard_normal(field_.shape)

    sensors = [(f"s{k}", r, c) for k, (r, c) in enumerate(cells)]
    readings = [
        SensorReading(sid, int(ti), r, c, float(field_[ti, r, c]))
        for ti in range(minutes) for sid, r, c in sensors
    ]
    return SynthResult(readings=readings, truth=field_, sensors=sensors, emitter_paths=paths)


def group_by_time(readings):
    groups: dict[int, list[SensorReading]] = {}
    for rd in readings:
        groups.setdefault(rd.t, []).append(rd)
    return dict(sorted(groups.items()))


# -- SPG frame files -------------------------------------------------------------

def spg_write(path, frames, meta=None):
    """Write a ``T x C x M x N`` stack as float32 with a JSON metadata block."""
    arr = np.asarray(frames)
    if arr.ndim != 4:
        raise FormatError(f"SPG frames must be 4-D (T, C, M, N), got shape {arr.shape}")
    if any(d > _U32_MAX for d in arr.shape):
        raise FormatError(f"extent overflow: {arr.shape} does not fit in unsigned 32-bit")
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SPG_MAGIC)
        fh.write(struct.pack("<5I", *arr.shape, 0))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def spg_read(path):
    """Return ``(frames float32[T, C, M, N], meta dict)``; raises FormatError on any defect."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SPG_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {SPG_MAGIC!r}")
    if len(raw) < 28:
        raise TruncationError(f"{path}: header truncated")
    t, c, m, n, reserved = struct.unpack_from("<5I", raw, 4)
    if reserved != 0:
        raise FormatError(f"{path}: reserved header field is {reserved}, expected 0")
    (mlen,) = struct.unpack_from("<I", raw, 24)
    if 28 + mlen > len(raw):
        raise TruncationError(f"{path}: metadata block runs past end of file")
    try:
        meta = json.loads(raw[28:28 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable metadata ({exc})") from None
    count = t * c * m * n
    start = 28 + mlen
    if len(raw) - start < 4 * count:
        raise TruncationError(
            f"{path}: header claims {4 * count} payload bytes, file has {len(raw) - start}"
        )
    if len(raw) - start > 4 * count:
        raise FormatError(f"{path}: {len(raw) - start - 4 * count} trailing bytes after payload")
    frames = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(t, c, m, n)
    return frames.astype(np.float32), meta


def synth_metadata(seed, interval=1, vmin=DEFAULT_VMIN, vmax=DEFAULT_VMAX, params=None, **extra):
    meta = {"sampling_interval_min": interval, "vmin_dbm": vmin, "vmax_dbm": vmax, "seed": seed}
    if params is not None:
        meta["synth"] = asdict(params)
    meta.update(extra)
    return meta
