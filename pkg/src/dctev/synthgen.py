"""Synthetic household load with embedded EV charging sessions.

Algorithm, per home ``h`` with its own generator seeded from ``(seed, h)``:

1. Base load: ``base_mean + amplitude * sin(2*pi*(minute_of_day - phase)/1440)``
   plus i.i.d. Gaussian noise, clipped at zero. The phase is drawn per home
   so that the daily peak falls in the evening, give or take two hours.
2. Sessions: for each day, ``Poisson(sessions_per_day_rate)`` candidate
   arrivals. Each arrival is drawn from the 18:00-22:00 window with
   probability ``evening_bias`` and uniformly over the day otherwise. A
   duration (whole minutes) and a constant power are drawn uniformly from
   their ranges. Candidates are accepted in time order unless they would
   overlap an accepted session; sessions running past the end are cut.
3. ``grid_load_kw = base + ev_load_kw``.
"""

from __future__ import annotations

import io
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .dataio import MeterSeries

MINUTES_PER_DAY = 1440
EVENING_START_MIN = 18 * 60
EVENING_END_MIN = 22 * 60


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 1
    n_homes: int = 10
    days: int = 60
    start: str = "2018-01-01T00:00"
    base_mean_kw: float = 1.0
    base_daily_amplitude_kw: float = 0.5
    noise_std_kw: float = 0.15
    ev_power_range_kw: tuple[float, float] = (3.3, 7.2)
    session_duration_range_min: tuple[int, int] = (60, 240)
    sessions_per_day_rate: float = 0.5
    evening_bias: float = 0.7

    def validate(self) -> "SynthConfig":
        bad = []
        if self.n_homes < 1:
            bad.append("n_homes must be >= 1")
        if self.days < 1:
            bad.append("days must be >= 1")
        lo, hi = self.ev_power_range_kw
        if not lo > 3.0:
            bad.append("ev_power_range_kw: low must exceed 3.0 kW")
        if hi < lo:
            bad.append("ev_power_range_kw: empty range")
        dlo, dhi = self.session_duration_range_min
        if dlo < 1 or dhi < dlo:
            bad.append("session_duration_range_min: empty or nonpositive range")
        if self.sessions_per_day_rate < 0:
            bad.append("sessions_per_day_rate must be nonnegative")
        if not 0.0 <= self.evening_bias <= 1.0:
            bad.append("evening_bias must lie in [0, 1]")
        if self.base_mean_kw < 0:
            bad.append("base_mean_kw must be nonnegative")
        if self.base_daily_amplitude_kw < 0:
            bad.append("base_daily_amplitude_kw must be nonnegative")
        if self.noise_std_kw < 0:
            bad.append("noise_std_kw must be nonnegative")
        try:
            np.datetime64(self.start, "m")
        except ValueError:
            bad.append(f"start: not an ISO-8601 minute timestamp: {self.start!r}")
        if bad:
            raise SynthConfigError("invalid SynthConfig: " + "; ".join(bad))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ev_power_range_kw"] = list(self.ev_power_range_kw)
        d["session_duration_range_min"] = list(self.session_duration_range_min)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        for key in ("ev_power_range_kw", "session_duration_range_min"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass
class MeterTable:
    """Column-oriented meter records in the ingest schema."""

    home_id: np.ndarray
    timestamp: np.ndarray  # datetime64[m]
    grid_load_kw: np.ndarray
    ev_load_kw: np.ndarray

    def __len__(self) -> int:
        return len(self.home_id)

    def to_series(self) -> dict[str, MeterSeries]:
        out = {}
        for home in dict.fromkeys(self.home_id.tolist()):
            sel = self.home_id == home
            out[home] = MeterSeries(
                home, self.timestamp[sel], self.grid_load_kw[sel].copy(), self.ev_load_kw[sel].copy()
            )
        return out

    def write_csv(self, target, header: str = "") -> None:
        """Write ``home_id,timestamp,grid_load_kw,ev_load_kw`` with 4-decimal kW."""
        if isinstance(target, (str, os.PathLike)):
            with open(target, "w", encoding="utf-8", newline="") as fh:
                self.write_csv(fh, header)
            return
        target.write(header)
        target.write("home_id,timestamp,grid_load_kw,ev_load_kw\n")
        ts = np.datetime_as_string(self.timestamp, unit="m")
        chunk = 100_000
        for lo in range(0, len(self), chunk):
            hi = min(lo + chunk, len(self))
            target.write(
                "".join(
                    f"{h},{t},{g:.4f},{e:.4f}\n"
                    for h, t, g, e in zip(
                        self.home_id[lo:hi], ts[lo:hi], self.grid_load_kw[lo:hi], self.ev_load_kw[lo:hi]
                    )
                )
            )

    def to_csv_string(self, header: str = "") -> str:
        buf = io.StringIO()
        self.write_csv(buf, header)
        return buf.getvalue()


def home_name(index: int) -> str:
    return f"home{index:03d}"


def _sessions(rng: np.random.Generator, cfg: SynthConfig, n_minutes: int) -> list[tuple[int, int, float]]:
    counts = rng.poisson(cfg.sessions_per_day_rate, size=cfg.days)
    cands = []
    for day, k in enumerate(counts):
        for _ in range(k):
            if rng.random() < cfg.evening_bias:
                minute = rng.integers(EVENING_START_MIN, EVENING_END_MIN)
            else:
                minute = rng.integers(0, MINUTES_PER_DAY)
            dur = rng.integers(cfg.session_duration_range_min[0], cfg.session_duration_range_min[1] + 1)
            power = rng.uniform(*cfg.ev_power_range_kw)
            cands.append((day * MINUTES_PER_DAY + int(minute), int(dur), float(power)))
    cands.sort(key=lambda c: c[0])
    accepted = []
    busy_until = -1
    for start, dur, power in cands:
        if start < busy_until:
            continue
        end = min(start + dur, n_minutes)
        accepted.append((start, end, power))
        busy_until = end
    return accepted


def generate_home(cfg: SynthConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (grid_load_kw, ev_load_kw) for one home, ``days * 1440`` minutes."""
    rng = np.random.default_rng([cfg.seed, index])
    n = cfg.days * MINUTES_PER_DAY
    minute = np.arange(n) % MINUTES_PER_DAY
    # peak at ~19:00 +- 2h: sin peaks where (minute - phase) = 360
    peak = 19 * 60 + rng.uniform(-120, 120)
    phase = peak - MINUTES_PER_DAY / 4
    base = cfg.base_mean_kw + cfg.base_daily_amplitude_kw * np.sin(2 * np.pi * (minute - phase) / MINUTES_PER_DAY)
    base = np.maximum(base + rng.normal(0.0, cfg.noise_std_kw, size=n), 0.0) if cfg.noise_std_kw > 0 else np.maximum(base, 0.0)
    ev = np.zeros(n)
    for start, end, power in _sessions(rng, cfg, n):
        ev[start:end] = power
    return base + ev, ev


def generate(config: SynthConfig) -> MeterTable:
    """Generate ``n_homes * days * 1440`` labelled meter rows, deterministic in ``seed``."""
    config.validate()
    n = config.days * MINUTES_PER_DAY
    t0 = np.datetime64(config.start, "m")
    stamps = t0 + np.arange(n) * np.timedelta64(1, "m")
    homes, ts, grid, ev = [], [], [], []
    for h in range(config.n_homes):
        g, e = generate_home(config, h)
        homes.append(np.full(n, home_name(h), dtype=object))
        ts.append(stamps)
        grid.append(g)
        ev.append(e)
    return MeterTable(np.concatenate(homes), np.concatenate(ts), np.concatenate(grid), np.concatenate(ev))
