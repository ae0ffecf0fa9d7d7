"""Command-line entry point: ``spectracast <command> [--flags]``.

Every command that writes artifacts also writes one run manifest (JSON)
next to them recording the command, argv, resolved configuration, seeds,
paths, tool version and wall-clock duration. Failures print a single line
``error: <category>: <message>`` and exit 1; usage errors exit 2.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time

import numpy as np

from . import __version__, _kernels
from .autodiff import get_dtype
from .errors import ConfigError, DataError, SpectracastError

DEFAULT_GRID = 64
MANIFEST_NAME = "run_manifest.json"


# -- manifest ------------------------------------------------------------------------

def _manifest_path(out):
    """Manifest location for an output directory or a single output file."""
    if os.path.isdir(out) or out.endswith(os.sep):
        return os.path.join(out, MANIFEST_NAME)
    return out + ".manifest.json"


def write_manifest(path, command, argv, config, seeds, inputs, outputs, started, extra=None):
    doc = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
        "precision": np.dtype(get_dtype()).name,
        "kernel_backend": _kernels.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "duration_s": round(time.time() - started, 3),
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path


def _json_default(o):
    if isinstance(o, range):
        return [o.start, o.stop]
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# -- helpers ---------------------------------------------------------------------------

def _grid(value):
    """``64`` or ``64x48`` -> (M, N)."""
    try:
        parts = [int(p) for p in value.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 64 or 64x48, got {value!r}") from None
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"grid must look like 64 or 64x48, got {value!r}")
    return tuple(parts)


def _load_dataset(path, input_len, pred_len, stride=1):
    from .data import SequenceDataset

    return SequenceDataset.from_spg(path, input_len, pred_len, stride)


def _model_config(args, geometry, base=None):
    """Resolve the model config: defaults < ``--config`` JSON < explicit flags."""
    from .forecaster import ModelConfig
    from .swin import SwinConfig

    d = ModelConfig().to_dict() if base is None else base.to_dict()
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            loaded = json.load(fh)
        swin = dict(d["swin"])
        swin.update(loaded.pop("swin", {}))
        d.update(loaded)
        d["swin"] = swin
    flag_map = {"model": "cell", "layers": "layers", "hidden_mult": "hidden_mult", "input_len": "input_len",
                "pred_len": "pred_len", "kernel": "kernel", "seed": "seed"}
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    for flag in ("patch", "window", "shift", "heads", "embed_dim", "mlp_ratio"):
        v = getattr(args, flag, None)
        if v is not None:
            d["swin"][flag] = v
    c, m, n = geometry
    d.update(channels=c, height=m, width=n)
    d["swin"] = SwinConfig.from_dict(d["swin"])
    return ModelConfig(**d).validate()


def _train_config(args):
    from .training import TrainConfig

    d = TrainConfig().to_dict()
    if getattr(args, "train", None):
        with open(args.train, encoding="utf-8") as fh:
            d.update(json.load(fh))
    for key in ("lr", "batch_size", "iterations", "seed", "patience", "checkpoint_every"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    return TrainConfig.from_dict(d).validate()


def _add_model_flags(p, with_model=True):
    g = p.add_argument_group("model (defaults: 2 layers, J=K=10, patch 4, window 4, 8 heads, D=32)")
    if with_model:
        g.add_argument("--model", choices=["vitlstm", "stlstm", "convlstm"], default=None,
                       help="cell type (default vitlstm)")
    g.add_argument("--config", help="model config JSON; explicit flags override it")
    g.add_argument("--layers", type=int)
    g.add_argument("--hidden-mult", type=int, dest="hidden_mult")
    g.add_argument("--input-len", type=int, dest="input_len")
    g.add_argument("--pred-len", type=int, dest="pred_len")
    g.add_argument("--patch", type=int)
    g.add_argument("--window", type=int)
    g.add_argument("--shift", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--embed-dim", type=int, dest="embed_dim")
    g.add_argument("--mlp-ratio", type=int, dest="mlp_ratio")
    g.add_argument("--kernel", type=int, help="convolution size for the baselines (default 5)")


def _add_train_flags(p):
    g = p.add_argument_group("training (defaults: Adam lr 0.001, batch 4, 1000 iterations)")
    g.add_argument("--train", help="training config JSON; explicit flags override it")
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int, dest="batch_size")
    g.add_argument("--iterations", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")


def _split_summary(ds):
    sp = ds.split
    return {"samples": len(ds), "ratio": [4, 1, 1], "train": sp.train, "val": sp.val, "test": sp.test,
            "input_len": ds.input_len, "pred_len": ds.pred_len, "stride": ds.stride}


def _window_lengths(args):
    """(J, K) from the flags, else the ``--config`` JSON, else the defaults."""
    from .forecaster import ModelConfig

    d = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            d = json.load(fh)
    j = args.input_len if args.input_len is not None else d.get("input_len", ModelConfig.input_len)
    k = args.pred_len if args.pred_len is not None else d.get("pred_len", ModelConfig.pred_len)
    return j, k


def _progress(every):
    def log(it, train_loss, val_loss):
        if every and it % every == 0:
            extra = "" if val_loss is None else f" val={val_loss:.6f}"
            print(f"iter {it} train={train_loss:.6f}{extra}", file=sys.stderr, flush=True)
    return log


# -- commands --------------------------------------------------------------------------

def cmd_synth(args, argv, started):
    from .data import SynthParams, encode_readings, group_by_time, spg_write, synth_generate, synth_metadata
    from .data import write_readings_csv

    params = SynthParams(noise_db=args.noise_db, n_emitters=args.emitters, period_min=args.period)
    res = synth_generate(args.seed, args.grid, args.sensors, args.minutes, params)
    ts, frames, interval = encode_readings(group_by_time(res.readings), args.grid, args.idw_power,
                                           args.vmin, args.vmax)
    meta = synth_metadata(args.seed, interval, args.vmin, args.vmax, params, idw_power=args.idw_power,
                          t0_min=ts[0], sensors=[list(s) for s in res.sensors])
    spg_write(args.out, frames, meta)
    outputs = [args.out]
    if args.readings_out:
        write_readings_csv(args.readings_out, res.readings)
        outputs.append(args.readings_out)
    config = {"grid": list(args.grid), "sensors": args.sensors, "minutes": args.minutes,
              "idw_power": args.idw_power, "vmin": args.vmin, "vmax": args.vmax, "synth": meta["synth"]}
    write_manifest(_manifest_path(args.out), "synth", argv, config, {"data": args.seed}, [], outputs, started)
    print(f"wrote {args.out}: T={frames.shape[0]} C={frames.shape[1]} M={frames.shape[2]} N={frames.shape[3]}")
    return 0


def cmd_ingest(args, argv, started):
    from .data import ingest_readings_csv

    groups = ingest_readings_csv(args.readings, args.grid)
    ts = list(groups)
    sensors = sorted({r.sensor_id for g in groups.values() for r in g})
    summary = {
        "readings": sum(len(g) for g in groups.values()),
        "timestamps": len(ts),
        "sensors": sensors,
        "t_first": ts[0] if ts else None,
        "t_last": ts[-1] if ts else None,
        "intervals": sorted({b - a for a, b in zip(ts, ts[1:])}),
        "grid": list(args.grid),
    }
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        write_manifest(_manifest_path(args.out), "ingest", argv, {"grid": list(args.grid)}, {},
                       [args.readings], [args.out], started)
    print(text)
    return 0


def cmd_interpolate(args, argv, started):
    from .data import encode_readings, ingest_readings_csv, spg_write

    groups = ingest_readings_csv(args.readings, args.grid)
    if not groups:
        raise DataError(f"{args.readings} holds no readings")
    ts, frames, interval = encode_readings(groups, args.grid, args.idw_power, args.vmin, args.vmax,
                                           interval=args.interval)
    meta = {"sampling_interval_min": interval, "vmin_dbm": args.vmin, "vmax_dbm": args.vmax, "seed": None,
            "idw_power": args.idw_power, "t0_min": ts[0], "source": os.path.basename(args.readings)}
    spg_write(args.out, frames, meta)
    config = {"grid": list(args.grid), "idw_power": args.idw_power, "vmin": args.vmin, "vmax": args.vmax,
              "interval": interval}
    write_manifest(_manifest_path(args.out), "interpolate", argv, config, {}, [args.readings], [args.out], started)
    print(f"wrote {args.out}: T={frames.shape[0]} frames of 3x{args.grid[0]}x{args.grid[1]}")
    return 0


def cmd_train(args, argv, started):
    from .forecaster import param_count
    from .training import train, write_loss_history

    jj, kk = _window_lengths(args)
    ds = _load_dataset(args.data, jj, kk)
    cfg = _model_config(args, ds.geometry)
    tcfg = _train_config(args)
    os.makedirs(args.out, exist_ok=True)
    result = train(ds, cfg, tcfg, out_dir=args.out, resume=args.resume, log=_progress(args.log_every))
    history_path = os.path.join(args.out, "loss_history.csv")
    write_loss_history(history_path, result.history)
    config = {"model": cfg.to_dict(), "train": tcfg.to_dict(), "data": _split_summary(ds),
              "param_count": param_count(cfg)}
    extra = {"iterations_run": result.iterations_run, "stopped_early": result.stopped_early,
             "final_train_loss": result.history[-1][1] if result.history else None}
    inputs = [args.data] + ([args.resume] if args.resume else [])
    outputs = [os.path.join(args.out, f) for f in ("manifest.json", "params.bin", "optim.bin")] + [history_path]
    write_manifest(os.path.join(args.out, MANIFEST_NAME), "train", argv, config,
                   {"model_init": cfg.seed, "batches": tcfg.seed}, inputs, outputs, started, extra)
    print(f"trained {cfg.cell}: {result.iterations_run} iterations, final train loss "
          f"{result.history[-1][1]:.6f}; checkpoint in {args.out}")
    return 0


def _load_for_data(ckpt, data):
    from .forecaster import checkpoint_load

    cfg, params, _, _ = checkpoint_load(ckpt)
    ds = _load_dataset(data, cfg.input_len, cfg.pred_len)
    return cfg, params, ds


def cmd_predict(args, argv, started):
    from .data import spg_write
    from .training import model_predictor

    cfg, params, ds = _load_for_data(args.ckpt, args.data)
    indices = getattr(ds.split, args.split)
    if not 0 <= args.index < len(indices):
        raise ConfigError(f"--index {args.index} outside the {args.split} split (size {len(indices)})")
    sample = indices[args.index]
    window = ds.window([sample])
    pred = model_predictor(cfg, params)(window[:, :cfg.input_len])[0]
    start = int(ds.starts[sample])
    spg_write(args.out, pred, {"checkpoint": os.path.abspath(args.ckpt), "source": os.path.abspath(args.data),
                               "first_frame": start + cfg.input_len, "sample": int(sample),
                               "sampling_interval_min": ds.meta.get("sampling_interval_min"),
                               "vmin_dbm": ds.meta.get("vmin_dbm"), "vmax_dbm": ds.meta.get("vmax_dbm")})
    write_manifest(_manifest_path(args.out), "predict", argv, {"model": cfg.to_dict(), "split": args.split,
                   "index": args.index}, {"model_init": cfg.seed}, [args.ckpt, args.data], [args.out], started)
    print(f"wrote {args.out}: {pred.shape[0]} predicted frames after frame {start + cfg.input_len - 1}")
    return 0


def cmd_eval(args, argv, started):
    from .training import evaluate, report_emit

    cfg, params, ds = _load_for_data(args.ckpt, args.data)
    rep = evaluate((cfg, params), ds, split=args.split, model=args.name or cfg.cell)
    outputs = report_emit([rep], args.report, args.svg_prefix)
    write_manifest(_manifest_path(args.report), "eval", argv, {"model": cfg.to_dict(), "split": args.split},
                   {"model_init": cfg.seed}, [args.ckpt, args.data], outputs, started,
                   {"avg_mse": rep.avg_mse, "avg_psnr": rep.avg_psnr})
    print(f"{rep.model}: avg MSE {rep.avg_mse:.6g}, avg RMSE {rep.avg_rmse:.6g}, avg PSNR {rep.avg_psnr:.4g} dB")
    return 0


def cmd_compare(args, argv, started):
    from .forecaster import param_count
    from .training import evaluate, report_emit, train, write_loss_history

    os.makedirs(args.out, exist_ok=True)
    tcfg = _train_config(args)
    reports, configs, outputs = [], {}, []
    ds = None
    for kind in args.models:
        args.model = kind
        if ds is None:
            ds = _load_dataset(args.data, *_window_lengths(args))
        cfg = _model_config(args, ds.geometry)
        sub = os.path.join(args.out, kind)
        result = train(ds, cfg, tcfg, out_dir=sub, log=_progress(args.log_every))
        write_loss_history(os.path.join(sub, "loss_history.csv"), result.history)
        reports.append(evaluate((cfg, result.params), ds, split="test", model=kind))
        configs[kind] = {"model": cfg.to_dict(), "param_count": param_count(cfg)}
        outputs.append(sub)
    outputs += report_emit(reports, os.path.join(args.out, "report.csv"), os.path.join(args.out, "report"))
    summary = {r.model: {"avg_mse": r.avg_mse, "avg_psnr": r.avg_psnr} for r in reports}
    write_manifest(os.path.join(args.out, MANIFEST_NAME), "compare", argv,
                   {"models": configs, "train": tcfg.to_dict(), "data": _split_summary(ds)},
                   {"batches": tcfg.seed}, [args.data], outputs, started, {"summary": summary})
    for r in reports:
        print(f"{r.model}: avg MSE {r.avg_mse:.6g}, avg PSNR {r.avg_psnr:.4g} dB")
    return 0


def _print_suite(results, tol_all=None):
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results) and (tol_all is None or all(r.value < tol_all for r in results))
    print("all passed" if ok else "FAILED")
    return 0 if ok else 1


def cmd_gradcheck(args, argv, started):
    from .verify import COMPONENT_TOL, gradcheck_suite

    # the tiny configurations are the only size this suite runs at
    return _print_suite(gradcheck_suite(), COMPONENT_TOL)


def cmd_selftest(args, argv, started):
    from .verify import selftest_suite

    print(f"spectracast {__version__}, kernels: {_kernels.BACKEND}")
    return _print_suite(selftest_suite())


# -- parser ----------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="spectracast", allow_abbrev=False,
                                     description="Spectrum-map forecasting with windowed-attention LSTMs.")
    parser.add_argument("--version", action="version", version=f"spectracast {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, help_):
        return sub.add_parser(name, help=help_, description=help_, allow_abbrev=False)

    def add_encoding(p):
        p.add_argument("--idw-power", type=float, default=2.0, dest="idw_power")
        p.add_argument("--vmin", type=float, default=-110.0, help="dBm mapped to the bottom of the colormap")
        p.add_argument("--vmax", type=float, default=-10.0, help="dBm mapped to the top of the colormap")

    p = add("synth", "generate a seeded synthetic sensor feed and encode it to an SPG file")
    p.add_argument("--grid", type=_grid, default=(DEFAULT_GRID, DEFAULT_GRID))
    p.add_argument("--sensors", type=int, default=16)
    p.add_argument("--minutes", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--emitters", type=int, default=2)
    p.add_argument("--period", type=float, default=120.0, help="diurnal period in minutes")
    p.add_argument("--noise-db", type=float, default=0.5, dest="noise_db")
    add_encoding(p)
    p.add_argument("--readings-out", dest="readings_out", help="also write the raw readings CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = add("ingest", "validate a readings CSV and summarize it")
    p.add_argument("--readings", required=True)
    p.add_argument("--grid", type=_grid, default=(DEFAULT_GRID, DEFAULT_GRID))
    p.add_argument("--out", help="write the summary JSON here")
    p.set_defaults(func=cmd_ingest)

    p = add("interpolate", "interpolate and colormap-encode a readings CSV into an SPG file")
    p.add_argument("--readings", required=True)
    p.add_argument("--grid", type=_grid, default=(DEFAULT_GRID, DEFAULT_GRID))
    p.add_argument("--interval", type=int, help="sampling interval in minutes (default: smallest gap)")
    add_encoding(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = add("train", "train a forecaster on an SPG dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", help="continue from this checkpoint directory")
    p.add_argument("--log-every", type=int, default=50, dest="log_every")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = add("predict", "forecast the K frames following one sample's inputs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--index", type=int, default=0, help="sample position within the split")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = add("eval", "per-horizon MSE/RMSE/PSNR of a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--report", required=True, help="CSV path")
    p.add_argument("--svg-prefix", dest="svg_prefix", help="also write <prefix>_mse.svg and <prefix>_psnr.svg")
    p.add_argument("--name", help="model label in the report (default: cell type)")
    p.set_defaults(func=cmd_eval)

    p = add("compare", "train and evaluate several cell types under one budget")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--models", nargs="+", choices=["vitlstm", "stlstm", "convlstm"],
                   default=["vitlstm", "stlstm", "convlstm"])
    p.add_argument("--log-every", type=int, default=50, dest="log_every")
    _add_model_flags(p, with_model=False)
    _add_train_flags(p)
    p.set_defaults(func=cmd_compare)

    p = add("gradcheck", "finite-difference gradient checks of every component")
    p.add_argument("--tiny", action="store_true", help="tiny 3x8x8 configurations (the only size offered)")
    p.set_defaults(func=cmd_gradcheck)

    p = add("selftest", "quick invariant and oracle checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    started = time.time()
    try:
        return args.func(args, argv, started)
    except SpectracastError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: config: invalid JSON ({exc})", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
