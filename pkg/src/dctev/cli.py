"""Command-line entry point.

Usage: ``dctev <command> [--config FILE] [--<key> VALUE ...] [command options]``

Every RunConfig key is accepted as ``--key VALUE`` and overrides the
configuration file. Exit status: 0 success, 1 runtime failure, 2 invalid
configuration or arguments.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import plotting
from .checks import full_suite, model_check
from .config import RunConfig, load_config, provenance, provenance_line, read_provenance
from .dataio import (
    Scaler,
    SchemaError,
    WindowSet,
    apply_scaler,
    build_windows,
    fit_scaler,
    format_timestamp,
    label_events,
    parse_meter_csv,
    unlabeled,
)
from .metrics import PredictionSet, default_threshold_grid, evaluate, threshold_sweep
from .model import ConfigError, attention_cost_report, load_checkpoint, save_checkpoint
from .pipeline import build_model, history_length_sweep, predictions, prepare, split_all, windows_for
from .synthgen import generate
from .train import TrainingError, train

log = logging.getLogger("dctev")

COMMANDS = ("synth", "train", "evaluate", "predict", "sweep-threshold", "sweep-history", "gradcheck", "bench-attention")
HORIZON_KEYS = ("auc", "ap", "f1", "precision", "recall", "acc", "mse")


class UsageError(Exception):
    pass


# -- helpers ------------------------------------------------------------------


def write_json(path, doc: dict) -> None:
    with open(_out_file(path), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_table(path, header: list[str], rows: list[list], cfg: RunConfig, command: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(provenance_line(cfg, command))
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])


def _out_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _out_file(path: str) -> str:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return path


def _load_series(path: str):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return parse_meter_csv(path)


def _resolve(args, base: RunConfig | None = None) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name, None) is not None}
    if args.config is not None and not os.path.exists(args.config):
        raise FileNotFoundError(args.config)
    cfg = load_config(args.config, None)
    if base is not None and args.config is None:
        cfg = base
    return cfg.with_overrides(overrides).validate()


def _checkpoint_config(args) -> RunConfig:
    """Protocol settings default to those recorded in the (first) checkpoint."""
    path = args.checkpoint[0]
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return _resolve(args, read_provenance(path))


def _require(args, name: str) -> str:
    value = getattr(args, name)
    if not value:
        raise UsageError(f"--{name.replace('_', '-')} is required for this command")
    return value


def _scaled(windows: WindowSet, scaler_doc: dict | None, normalize: bool, series_parts) -> WindowSet:
    if not normalize or len(windows) == 0:
        return windows
    scaler = Scaler.from_dict(scaler_doc) if scaler_doc else Scaler({}, {})
    missing = [s for s in series_parts if s.home_id not in scaler.mean]
    if missing:
        log.warning("no training statistics for %d home(s); using their own loads", len(missing))
        extra = fit_scaler(missing)
        scaler = Scaler({**scaler.mean, **extra.mean}, {**scaler.std, **extra.std})
    return apply_scaler(windows, scaler)


def _test_windows(cfg: RunConfig, series, model, meta) -> WindowSet:
    _, test_s = split_all(series, cfg)
    w = windows_for(test_s, model.config.T, model.config.M, cfg.test_window_stride)
    return _scaled(w, meta.get("scaler"), meta.get("normalize", cfg.normalize), test_s)


# -- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = _out_file(args.out or "meter.csv")
    table = generate(cfg.synth_config())
    table.write_csv(out, provenance_line(cfg, "synth"))
    print(f"wrote {len(table)} rows for {cfg.n_homes} homes to {out}")
    return 0


def cmd_train(args) -> int:
    data = _require(args, "data")
    cfg = _resolve(args)
    series = _load_series(data)
    out = _out_dir(args.out or "run")
    prepared = prepare(series, cfg)
    model = build_model(cfg)
    _, history = train(model, prepared.train, cfg.train_config(), log_every=args.log_every)
    prov = provenance(cfg, "train")
    extra = {
        "provenance": prov,
        "scaler": None if prepared.scaler is None else prepared.scaler.to_dict(),
        "normalize": cfg.normalize,
        "history": history.to_dict(),
    }
    ckpt = os.path.join(out, f"checkpoint_{model.kind}.npz")
    save_checkpoint(ckpt, model, extra)
    write_json(os.path.join(out, f"history_{model.kind}.json"), {"provenance": prov, **history.to_dict()})
    plotting.plot_training_history(history.to_dict(), os.path.join(out, f"history_{model.kind}.png"), prov)
    print(f"trained {model.kind} on {len(prepared.train)} windows; checkpoint {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    data = _require(args, "data")
    _require(args, "checkpoint")
    cfg = _checkpoint_config(args)
    series = _load_series(data)
    out = _out_dir(args.out or "run")
    prov = provenance(cfg, "evaluate")
    model_rows = []
    for path in args.checkpoint:
        model, meta = load_checkpoint(path)
        windows = _test_windows(cfg, series, model, meta)
        report = evaluate(predictions(model, windows), cfg.prob_threshold)
        doc = report.to_dict()
        doc["model"] = model.kind
        doc["checkpoint"] = os.path.basename(path)
        doc["provenance"] = prov
        write_json(os.path.join(out, f"report_{model.kind}.json"), doc)
        write_table(
            os.path.join(out, f"table_per_horizon_{model.kind}.csv"),
            ["m"] + list(HORIZON_KEYS),
            [[r["m"]] + [r[k] for k in HORIZON_KEYS] for r in report.per_horizon],
            cfg,
            "evaluate",
        )
        plotting.plot_per_horizon(report.per_horizon, os.path.join(out, f"per_horizon_{model.kind}.png"), prov)
        model_rows.append([model.kind, f"1-{model.config.M} minutes"] + [doc[k] for k in ("f1", "auc", "ap", "acc", "mse")])
        print(f"{model.kind}: f1={doc['f1']:.4f} acc={doc['acc']:.4f} auc={doc['auc']} ap={doc['ap']}")
    write_table(
        os.path.join(out, "table_models.csv"), ["model", "span", "f1", "auc", "ap", "acc", "mse"], model_rows, cfg, "evaluate"
    )
    return 0


def cmd_predict(args) -> int:
    data = _require(args, "data")
    _require(args, "checkpoint")
    cfg = _checkpoint_config(args)
    series = _load_series(data)
    model, meta = load_checkpoint(args.checkpoint[0])
    T, M = model.config.T, model.config.M
    parts = []
    for home in sorted(series):
        s = series[home]
        has_ev = s.ev_load_kw is not None and not np.isnan(s.ev_load_kw).any()
        parts.append(label_events(s, cfg.label_threshold_kw) if has_ev else unlabeled(s))
    labeled = all(p.labels is not None for p in parts)
    if not labeled:
        parts = [unlabeled(series[p.home_id]) for p in parts]
    by_home = {p.home_id: p for p in parts}
    windows = WindowSet.concat([build_windows(p, T, M, cfg.test_window_stride) for p in parts])
    windows = _scaled(windows, meta.get("scaler"), meta.get("normalize", cfg.normalize), parts)
    probs = model.predict_proba(windows.inputs)
    out = _out_file(args.out or "predictions.csv")
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(provenance_line(cfg, "predict"))
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["home_id", "window_start", "horizon_min", "probability"] + (["label"] if labeled else []))
        for i in range(len(windows)):
            home = windows.home_ids[i]
            start = format_timestamp(by_home[home].timestamps[windows.starts[i]])
            for m in range(M):
                row = [home, start, m + 1, repr(float(probs[i, m]))]
                if labeled:
                    row.append(int(windows.targets[i, m]))
                writer.writerow(row)
    print(f"wrote {len(windows) * M} predictions ({len(windows)} windows x {M} horizons) to {out}")
    return 0


def cmd_sweep_threshold(args) -> int:
    data = _require(args, "data")
    _require(args, "checkpoint")
    cfg = _checkpoint_config(args)
    series = _load_series(data)
    out = _out_dir(args.out or "run")
    grid = sorted(set(default_threshold_grid(cfg.threshold_step)) | {cfg.prob_threshold})
    curves, rows = {}, []
    for path in args.checkpoint:
        model, meta = load_checkpoint(path)
        preds = predictions(model, _test_windows(cfg, series, model, meta))
        sweep = threshold_sweep(preds, grid)
        curves[model.kind] = sweep.rows
        rows += [[model.kind, r["threshold"], r["f1"], r["precision"], r["recall"], r["acc"]] for r in sweep.rows]
        print(f"{model.kind}: best threshold {sweep.best_threshold} (F1 {sweep.best_f1:.4f})")
    write_table(
        os.path.join(out, "threshold_sweep.csv"),
        ["model", "threshold", "f1", "precision", "recall", "acc"],
        rows,
        cfg,
        "sweep-threshold",
    )
    plotting.plot_threshold_sweep(curves, os.path.join(out, "threshold_sweep.png"), provenance(cfg, "sweep-threshold"))
    return 0


def cmd_sweep_history(args) -> int:
    data = _require(args, "data")
    cfg = _resolve(args)
    series = _load_series(data)
    out = _out_dir(args.out or "run")
    rows = history_length_sweep(series, cfg)
    write_table(
        os.path.join(out, "history_sweep.csv"),
        ["T", "f1", "auc", "ap", "acc", "mse"],
        [[r[k] for k in ("T", "f1", "auc", "ap", "acc", "mse")] for r in rows],
        cfg,
        "sweep-history",
    )
    plotting.plot_history_sweep(rows, os.path.join(out, "history_sweep.png"), provenance(cfg, "sweep-history"))
    for r in rows:
        print(f"T={r['T']}: f1={r['f1']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args)
    rows = full_suite()
    # the configured model may be large: probe a sample of coordinates per parameter
    rows.append(model_check(cfg.model_config(), max_coords=args.max_coords, batch=1))
    ok = all(r.passed for r in rows)
    for r in rows:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} {r.shape:<22} max_rel_error={r.max_rel_error:.3e}")
    if args.out:
        write_json(
            args.out,
            {"provenance": provenance(cfg, "gradcheck"), "passed": ok,
             "checks": [{"name": r.name, "shape": r.shape, "max_rel_error": float(r.max_rel_error),
                         "passed": bool(r.passed)} for r in rows]},
        )
    return 0 if ok else 1


def cmd_bench_attention(args) -> int:
    cfg = _resolve(args)
    rep = attention_cost_report(cfg.T, cfg.L, cfg.patch_stride, D=cfg.D, H=cfg.H)
    doc = rep.to_dict()
    print(json.dumps(doc, indent=2))
    if args.out:
        write_json(args.out, {"provenance": provenance(cfg, "bench-attention"), **doc})
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "sweep-threshold": cmd_sweep_threshold,
    "sweep-history": cmd_sweep_history,
    "gradcheck": cmd_gradcheck,
    "bench-attention": cmd_bench_attention,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dctev", description="EV charging event prediction from smart-meter load")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--verbose", "-v", action="store_true")
        if name in ("train", "evaluate", "predict", "sweep-threshold", "sweep-history"):
            p.add_argument("--data", help="meter CSV file")
        if name in ("evaluate", "predict", "sweep-threshold"):
            p.add_argument("--checkpoint", nargs="+", help="checkpoint file(s) written by train")
        if name == "train":
            p.add_argument("--log-every", type=int, default=0)
        if name == "gradcheck":
            p.add_argument("--max-coords", type=int, default=8, help="coordinates probed per parameter")
        group = p.add_argument_group("configuration overrides")
        for f in fields(RunConfig):
            group.add_argument(f"--{f.name}", dest=f.name, metavar="VALUE")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[args.command](args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"dctev {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"dctev {args.command}: file not found: {exc.filename or exc}", file=sys.stderr)
        return 1
    except (SchemaError, TrainingError, ValueError, OSError) as exc:
        print(f"dctev {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
