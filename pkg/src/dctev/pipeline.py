"""End-to-end protocol: label, split, scale, window, train, predict, evaluate."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .dataio import (
    LabeledSeries,
    MeterSeries,
    Scaler,
    WindowSet,
    apply_scaler,
    build_windows,
    chronological_split,
    fit_scaler,
    label_events,
)
from .metrics import EvalReport, PredictionSet, evaluate
from .model import BaselineMLP, ConfigError, DctEv
from .train import TrainHistory, train

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    train: WindowSet
    test: WindowSet
    scaler: Scaler | None
    train_series: list[LabeledSeries]
    test_series: list[LabeledSeries]


def split_all(series: dict[str, MeterSeries], cfg: RunConfig) -> tuple[list[LabeledSeries], list[LabeledSeries]]:
    train_s, test_s = [], []
    for home in sorted(series):
        tr, te = chronological_split(label_events(series[home], cfg.label_threshold_kw), cfg.train_fraction)
        train_s.append(tr)
        test_s.append(te)
    return train_s, test_s


def windows_for(parts: list[LabeledSeries], T: int, M: int, stride: int) -> WindowSet:
    return WindowSet.concat([build_windows(s, T, M, stride) for s in parts])


def prepare(series: dict[str, MeterSeries], cfg: RunConfig, T: int | None = None) -> Prepared:
    """Split every home 80:20 in time, fit the scaler on train only, build windows."""
    T = cfg.T if T is None else T
    train_s, test_s = split_all(series, cfg)
    train_w = windows_for(train_s, T, cfg.M, cfg.train_window_stride)
    test_w = windows_for(test_s, T, cfg.M, cfg.test_window_stride)
    scaler = None
    if cfg.normalize:
        scaler = fit_scaler(train_s)
        train_w = apply_scaler(train_w, scaler)
        test_w = apply_scaler(test_w, scaler)
    return Prepared(train_w, test_w, scaler, train_s, test_s)


def init_seed(cfg: RunConfig) -> int:
    return int(np.random.SeedSequence([cfg.seed, 3]).generate_state(1)[0])


def build_model(cfg: RunConfig, T: int | None = None, kind: str | None = None):
    kind = kind or cfg.model_kind
    if kind == "dctev":
        return DctEv(cfg.model_config(T), seed=init_seed(cfg))
    if kind == "dnn":
        return BaselineMLP(cfg.baseline_config(T), seed=init_seed(cfg))
    raise ConfigError(f"unknown model kind {kind!r}")


def predictions(model, windows: WindowSet) -> PredictionSet:
    probs = model.predict_proba(windows.inputs)
    return PredictionSet.from_matrix(probs, windows.targets, windows.home_ids, windows.starts)


@dataclass
class RunResult:
    model: object
    history: TrainHistory
    report: EvalReport
    preds: PredictionSet
    prepared: Prepared


def run(series: dict[str, MeterSeries], cfg: RunConfig, T: int | None = None, kind: str | None = None) -> RunResult:
    """Train one model on the training split and evaluate it on the test split."""
    prepared = prepare(series, cfg, T)
    model = build_model(cfg, T, kind)
    _, history = train(model, prepared.train, cfg.train_config())
    preds = predictions(model, prepared.test)
    return RunResult(model, history, evaluate(preds, cfg.prob_threshold), preds, prepared)


def history_length_sweep(
    series: dict[str, MeterSeries], cfg: RunConfig, T_values=None, reuse: dict[int, RunResult] | None = None
) -> list[dict]:
    """Train and test one model per input length ``T`` on the same split.

    Returns one row per ``T`` with the pooled test F1 (and the full metrics).
    ``reuse`` maps a length to a finished :func:`run` on the same data and
    config; runs are deterministic, so such lengths are not retrained.
    """
    reuse = reuse or {}
    T_values = list(cfg.history_values() if T_values is None else T_values)
    bad = []
    for T in T_values:
        try:
            cfg.model_config(T).validate()
        except ConfigError as exc:
            bad.append(f"T={T}: {exc}")
    if bad:
        raise ConfigError("invalid history lengths: " + "; ".join(bad))
    rows = []
    for T in T_values:
        result = reuse[T] if T in reuse else run(series, cfg, T=T)
        pooled = result.report.pooled
        log.info("history sweep T=%d f1=%.4f", T, pooled["f1"])
        rows.append({"T": T, "f1": pooled["f1"], **{k: pooled[k] for k in ("auc", "ap", "acc", "mse")}})
    return rows
