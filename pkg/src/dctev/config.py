"""Flat run configuration shared by every command, and artifact provenance headers.

A configuration file holds one ``key = value`` per line; ``#`` starts a
comment. Every artifact written by the CLI embeds the resolved
configuration so it can be rebuilt with :func:`read_provenance`.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from typing import get_type_hints

from .model import BaselineConfig, ConfigError, ModelConfig
from .synthgen import SynthConfig, SynthConfigError
from .train import TrainConfig

PROVENANCE_PREFIX = "# dctev-run-config: "


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    # synthetic data
    n_homes: int = 10
    days: int = 60
    start: str = "2018-01-01T00:00"
    base_mean_kw: float = 1.0
    base_daily_amplitude_kw: float = 0.5
    noise_std_kw: float = 0.15
    ev_power_low_kw: float = 3.3
    ev_power_high_kw: float = 7.2
    session_min_minutes: int = 60
    session_max_minutes: int = 240
    sessions_per_day_rate: float = 0.5
    evening_bias: float = 0.7
    # protocol
    label_threshold_kw: float = 3.0
    train_fraction: float = 0.8
    train_window_stride: int = 5
    test_window_stride: int = 1
    normalize: bool = True
    prob_threshold: float = 0.5
    # model
    model_kind: str = "dctev"
    T: int = 180
    L: int = 20
    patch_stride: int = 10
    D: int = 64
    H: int = 4
    D_ffn: int = 128
    n_layers: int = 2
    M: int = 10
    head_bias: bool = True
    baseline_hidden: int = 128
    # training
    batch_size: int = 128
    epochs: int = 3
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    val_fraction: float = 0.1
    positive_class_weight: float = 1.0
    loss_reduction: str = "mean"
    # experiments
    history_T_values: str = "60,120,180"
    threshold_step: float = 0.05

    # -- views used by the modules --------------------------------------

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            seed=self.seed,
            n_homes=self.n_homes,
            days=self.days,
            start=self.start,
            base_mean_kw=self.base_mean_kw,
            base_daily_amplitude_kw=self.base_daily_amplitude_kw,
            noise_std_kw=self.noise_std_kw,
            ev_power_range_kw=(self.ev_power_low_kw, self.ev_power_high_kw),
            session_duration_range_min=(self.session_min_minutes, self.session_max_minutes),
            sessions_per_day_rate=self.sessions_per_day_rate,
            evening_bias=self.evening_bias,
        )

    def model_config(self, T: int | None = None) -> ModelConfig:
        return ModelConfig(
            T=self.T if T is None else T,
            L=self.L,
            stride=self.patch_stride,
            D=self.D,
            H=self.H,
            D_ffn=self.D_ffn,
            n_layers=self.n_layers,
            M=self.M,
            head_bias=self.head_bias,
        )

    def baseline_config(self, T: int | None = None) -> BaselineConfig:
        return BaselineConfig(T=self.T if T is None else T, hidden=self.baseline_hidden, M=self.M)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            eps_opt=self.eps_opt,
            seed=self.seed,
            val_fraction=self.val_fraction,
            positive_class_weight=self.positive_class_weight,
            loss_reduction=self.loss_reduction,
        )

    def history_values(self) -> list[int]:
        try:
            return [int(v) for v in self.history_T_values.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"history_T_values must be comma-separated integers: {self.history_T_values!r}") from None

    def validate(self) -> "RunConfig":
        """Check every module's constraints before any work starts."""
        try:
            self.synth_config().validate()
        except SynthConfigError as exc:
            raise ConfigError(str(exc)) from None
        if self.model_kind not in ("dctev", "dnn"):
            raise ConfigError(f"model_kind must be 'dctev' or 'dnn', got {self.model_kind!r}")
        self.model_config().validate()
        self.baseline_config().validate()
        try:
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.train_window_stride < 1 or self.test_window_stride < 1:
            raise ConfigError("window strides must be >= 1")
        if not 0.0 <= self.prob_threshold <= 1.0:
            raise ConfigError("prob_threshold must lie in [0, 1]")
        if self.label_threshold_kw < 0:
            raise ConfigError("label_threshold_kw must be nonnegative")
        if not 0.0 < self.threshold_step < 1.0:
            raise ConfigError("threshold_step must lie in (0, 1)")
        bad = []
        for T in self.history_values():
            try:
                self.model_config(T).validate()
            except ConfigError as exc:
                bad.append(f"T={T} ({exc})")
        if bad:
            raise ConfigError("invalid history_T_values: " + "; ".join(bad))
        return self

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        return replace(self, **{k: coerce(k, v) for k, v in overrides.items()})


_TYPES = get_type_hints(RunConfig)


def coerce(key: str, text) -> object:
    """Convert a textual value to the declared type of ``key``."""
    if key not in _TYPES:
        raise ConfigError(f"unknown configuration key: {key}")
    kind = _TYPES[key]
    if not isinstance(text, str):
        return kind(text)
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {text!r} as {kind.__name__}") from None


def parse_config_text(text: str) -> dict[str, object]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = coerce(key, value)
    return values


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = replace(cfg, **parse_config_text(fh.read()))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


# -- provenance -------------------------------------------------------------


def provenance(cfg: RunConfig, command: str) -> dict:
    return {"command": command, "seed": cfg.seed, "run_config": cfg.to_dict()}


def provenance_line(cfg: RunConfig, command: str) -> str:
    return PROVENANCE_PREFIX + json.dumps(provenance(cfg, command), sort_keys=True) + "\n"


def read_provenance(path) -> RunConfig:
    """Recover the RunConfig embedded in any artifact the CLI writes."""
    path = os.fspath(path)
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return RunConfig.from_dict(doc["provenance"]["run_config"])
    if path.endswith(".npz"):
        import numpy as np

        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
        return RunConfig.from_dict(meta["provenance"]["run_config"])
    if path.endswith(".png"):
        from PIL import Image

        with Image.open(path) as img:
            doc = json.loads(img.text["dctev-provenance"])
        return RunConfig.from_dict(doc["run_config"])
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if not first.startswith(PROVENANCE_PREFIX):
        raise ValueError(f"{path}: no provenance header")
    return RunConfig.from_dict(json.loads(first[len(PROVENANCE_PREFIX) :])["run_config"])
