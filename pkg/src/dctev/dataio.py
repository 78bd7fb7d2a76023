"""Smart-meter ingestion, EV labelling, chronological splitting and windowing.

The input file is UTF-8 CSV with header ``home_id,timestamp,grid_load_kw``
and an optional ``ev_load_kw`` column. Timestamps are ISO-8601 at minute
precision. Lines starting with ``#`` are comments (artifact provenance).
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Iterable, Iterator, NamedTuple

import numpy as np

REQUIRED_COLUMNS = ("home_id", "timestamp", "grid_load_kw")
OPTIONAL_COLUMNS = ("ev_load_kw",)
ONE_MINUTE = np.timedelta64(1, "m")
STD_FLOOR = 1e-6


class SchemaError(ValueError):
    """The meter file does not follow the expected column layout or values."""


class LabelingError(ValueError):
    pass


class SplitError(ValueError):
    pass


class MeterRecord(NamedTuple):
    home_id: str
    timestamp: np.datetime64
    grid_load_kw: float
    ev_load_kw: float | None = None


@dataclass
class MeterSeries:
    """Minute-interval records of one home, sorted by timestamp."""

    home_id: str
    timestamps: np.ndarray  # datetime64[m]
    grid_load_kw: np.ndarray
    ev_load_kw: np.ndarray | None = None  # NaN where a record had no EV value

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def gap_mask(self) -> np.ndarray:
        return gap_mask_of(self.timestamps)

    def records(self) -> Iterator[MeterRecord]:
        for i in range(len(self)):
            ev = None
            if self.ev_load_kw is not None and not np.isnan(self.ev_load_kw[i]):
                ev = float(self.ev_load_kw[i])
            yield MeterRecord(self.home_id, self.timestamps[i], float(self.grid_load_kw[i]), ev)


@dataclass
class LabeledSeries:
    """Loads of one home with optional EV-event labels.

    ``gap_mask[i]`` is True when record ``i`` does not follow record ``i-1``
    by exactly one minute (always False at index 0).
    """

    home_id: str
    start_timestamp: np.datetime64
    loads: np.ndarray
    labels: np.ndarray | None
    gap_mask: np.ndarray
    timestamps: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.loads):
            raise ValueError("loads and labels must have equal length")
        if self.timestamps is None:
            self.timestamps = self.start_timestamp + np.arange(len(self.loads)) * ONE_MINUTE

    def __len__(self) -> int:
        return len(self.loads)


@dataclass
class WindowSet:
    """Aligned (input window, target vector) pairs with their provenance."""

    inputs: np.ndarray  # (n, T)
    targets: np.ndarray | None  # (n, M) or None for unlabeled data
    home_ids: np.ndarray  # (n,) object
    starts: np.ndarray  # (n,) index into the source series
    T: int
    M: int

    def __len__(self) -> int:
        return len(self.inputs)

    @classmethod
    def empty(cls, T: int, M: int, labeled: bool = True) -> "WindowSet":
        return cls(
            np.zeros((0, T)),
            np.zeros((0, M)) if labeled else None,
            np.zeros(0, dtype=object),
            np.zeros(0, dtype=np.int64),
            T,
            M,
        )

    def subset(self, idx) -> "WindowSet":
        return WindowSet(
            self.inputs[idx],
            None if self.targets is None else self.targets[idx],
            self.home_ids[idx],
            self.starts[idx],
            self.T,
            self.M,
        )

    @staticmethod
    def concat(sets: list["WindowSet"]) -> "WindowSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        T, M = sets[0].T, sets[0].M
        labeled = all(s.targets is not None for s in sets)
        return WindowSet(
            np.concatenate([s.inputs for s in sets]),
            np.concatenate([s.targets for s in sets]) if labeled else None,
            np.concatenate([s.home_ids for s in sets]),
            np.concatenate([s.starts for s in sets]),
            T,
            M,
        )


@dataclass
class Scaler:
    mean: dict[str, float]
    std: dict[str, float]

    def to_dict(self) -> dict:
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(dict(d["mean"]), dict(d["std"]))


def gap_mask_of(timestamps: np.ndarray) -> np.ndarray:
    mask = np.zeros(len(timestamps), dtype=bool)
    if len(timestamps) > 1:
        mask[1:] = np.diff(timestamps) != ONE_MINUTE
    return mask


def parse_timestamp(text: str) -> np.datetime64:
    ts = datetime.fromisoformat(text.strip())
    if ts.tzinfo is not None:
        ts = ts.replace(tzinfo=None) - ts.utcoffset()
    if ts.second or ts.microsecond:
        raise ValueError(f"timestamp {text!r} is not at minute precision")
    return np.datetime64(ts, "m")


def format_timestamp(ts: np.datetime64) -> str:
    return str(np.datetime64(ts, "m"))


def _open_text(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8")
    if isinstance(source, io.TextIOBase):
        return source
    return io.StringIO(source.read() if hasattr(source, "read") else str(source))


def _data_lines(handle) -> Iterator[tuple[int, str]]:
    for lineno, line in enumerate(handle, start=1):
        if line.startswith("#") or not line.strip():
            continue
        yield lineno, line


def parse_meter_csv(source) -> dict[str, MeterSeries]:
    """Read a meter file into per-home series sorted by timestamp.

    ``source`` is a path or an open text stream.
    """
    close = isinstance(source, (str, os.PathLike))
    handle = _open_text(source)
    try:
        lines = _data_lines(handle)
        try:
            header_no, header_line = next(lines)
        except StopIteration:
            raise SchemaError("meter file is empty (no header row)") from None
        header = [h.strip() for h in next(csv.reader([header_line]))]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"missing required column(s): {', '.join(missing)}")
        col = {name: header.index(name) for name in header}
        has_ev = "ev_load_kw" in col
        rows: dict[str, list[tuple]] = {}
        for lineno, line in lines:
            fields = next(csv.reader([line]))
            if len(fields) != len(header):
                raise SchemaError(f"line {lineno}: expected {len(header)} fields, got {len(fields)}")
            try:
                home = fields[col["home_id"]].strip()
                ts = parse_timestamp(fields[col["timestamp"]])
                grid = float(fields[col["grid_load_kw"]])
                ev = np.nan
                if has_ev and fields[col["ev_load_kw"]].strip() != "":
                    ev = float(fields[col["ev_load_kw"]])
            except ValueError as exc:
                raise SchemaError(f"line {lineno}: cannot parse row: {exc}") from None
            if not home:
                raise SchemaError(f"line {lineno}: empty home_id")
            if not np.isfinite(grid) or grid < 0:
                raise SchemaError(f"line {lineno}: grid_load_kw must be a nonnegative number")
            if not np.isnan(ev) and (not np.isfinite(ev) or ev < 0):
                raise SchemaError(f"line {lineno}: ev_load_kw must be a nonnegative number")
            rows.setdefault(home, []).append((ts, grid, ev))
    finally:
        if close:
            handle.close()
    return {home: _to_series(home, recs, has_ev) for home, recs in rows.items()}


def _to_series(home: str, recs: list[tuple], has_ev: bool) -> MeterSeries:
    ts = np.array([r[0] for r in recs], dtype="datetime64[m]")
    order = np.argsort(ts, kind="stable")
    ts = ts[order]
    dup = np.flatnonzero(np.diff(ts) == np.timedelta64(0, "m"))
    if dup.size:
        raise SchemaError(f"duplicate timestamp {format_timestamp(ts[dup[0]])} for home {home}")
    grid = np.array([r[1] for r in recs], dtype=np.float64)[order]
    ev = np.array([r[2] for r in recs], dtype=np.float64)[order] if has_ev else None
    return MeterSeries(home, ts, grid, ev)


def series_from_columns(
    home_ids: np.ndarray, timestamps: np.ndarray, grid: np.ndarray, ev: np.ndarray | None
) -> dict[str, MeterSeries]:
    """Group in-memory columns (same schema as the CSV) into per-home series."""
    out = {}
    home_ids = np.asarray(home_ids)
    for home in dict.fromkeys(home_ids.tolist()):
        sel = home_ids == home
        recs_ts = np.asarray(timestamps[sel], dtype="datetime64[m]")
        order = np.argsort(recs_ts, kind="stable")
        recs_ts = recs_ts[order]
        dup = np.flatnonzero(np.diff(recs_ts) == np.timedelta64(0, "m"))
        if dup.size:
            raise SchemaError(f"duplicate timestamp {format_timestamp(recs_ts[dup[0]])} for home {home}")
        out[str(home)] = MeterSeries(
            str(home),
            recs_ts,
            np.asarray(grid[sel], dtype=np.float64)[order],
            None if ev is None else np.asarray(ev[sel], dtype=np.float64)[order],
        )
    return out


def label_events(series: MeterSeries, threshold_kw: float = 3.0) -> LabeledSeries:
    """Label each minute 1 when the EV draws strictly more than ``threshold_kw``."""
    ev = series.ev_load_kw
    if ev is None or np.isnan(ev).any():
        raise LabelingError(f"home {series.home_id}: ev_load_kw missing, cannot label")
    labels = (ev > threshold_kw).astype(np.int8)
    return LabeledSeries(
        series.home_id,
        series.timestamps[0] if len(series) else np.datetime64("NaT", "m"),
        series.grid_load_kw.copy(),
        labels,
        gap_mask_of(series.timestamps),
        series.timestamps.copy(),
    )


def unlabeled(series: MeterSeries) -> LabeledSeries:
    """Wrap a series without EV information (inference on meter data only)."""
    return LabeledSeries(
        series.home_id,
        series.timestamps[0] if len(series) else np.datetime64("NaT", "m"),
        series.grid_load_kw.copy(),
        None,
        gap_mask_of(series.timestamps),
        series.timestamps.copy(),
    )


def _slice(series: LabeledSeries, lo: int, hi: int) -> LabeledSeries:
    gaps = series.gap_mask[lo:hi].copy()
    if len(gaps):
        gaps[0] = False
    return replace(
        series,
        start_timestamp=series.timestamps[lo],
        loads=series.loads[lo:hi],
        labels=None if series.labels is None else series.labels[lo:hi],
        gap_mask=gaps,
        timestamps=series.timestamps[lo:hi],
    )


def chronological_split(
    series: LabeledSeries, train_fraction: float = 0.8
) -> tuple[LabeledSeries, LabeledSeries]:
    """First ``floor(n * train_fraction)`` records train, the rest test. No shuffling."""
    if not 0.0 < train_fraction < 1.0:
        raise SplitError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(series)
    if n < 2:
        raise SplitError(f"home {series.home_id}: needs at least 2 records to split, has {n}")
    cut = int(np.floor(n * train_fraction))
    return _slice(series, 0, cut), _slice(series, cut, n)


def build_windows(series: LabeledSeries, T: int, M: int, window_stride: int) -> WindowSet:
    """Emit every gap-free window starting at a multiple of ``window_stride``.

    Labelled series need ``T + M`` contiguous minutes per window (input
    loads then target labels). Unlabelled series need only ``T``.
    """
    if T < 1 or M < 1 or window_stride < 1:
        raise ValueError("T, M and window_stride must all be >= 1")
    labeled = series.labels is not None
    span = T + M if labeled else T
    n = len(series)
    if n < span:
        return WindowSet.empty(T, M, labeled)
    # breaks[k] = number of gap marks at positions <= k
    breaks = np.cumsum(series.gap_mask)
    starts = np.arange(0, n - span + 1, window_stride)
    # a window [s, s+span) is gap-free iff no gap mark in (s, s+span)
    ok = breaks[starts + span - 1] == breaks[starts]
    starts = starts[ok]
    if starts.size == 0:
        return WindowSet.empty(T, M, labeled)
    idx = starts[:, None] + np.arange(T)
    inputs = series.loads[idx].astype(np.float64)
    targets = None
    if labeled:
        targets = series.labels[starts[:, None] + T + np.arange(M)].astype(np.float64)
    return WindowSet(
        inputs,
        targets,
        np.full(starts.size, series.home_id, dtype=object),
        starts.astype(np.int64),
        T,
        M,
    )


def fit_scaler(train: LabeledSeries | Iterable[LabeledSeries]) -> Scaler:
    """Per-home mean and (floored) standard deviation of training loads."""
    items = [train] if isinstance(train, LabeledSeries) else list(train)
    if not items:
        raise ValueError("cannot fit a scaler on no series")
    mean, std = {}, {}
    for s in items:
        if len(s) == 0:
            raise ValueError(f"home {s.home_id}: cannot fit a scaler on an empty series")
        mean[s.home_id] = float(np.mean(s.loads))
        std[s.home_id] = max(float(np.std(s.loads)), STD_FLOOR)
    return Scaler(mean, std)


def apply_scaler(windows: WindowSet, scaler: Scaler) -> WindowSet:
    """Z-score each window's inputs with its home's training statistics."""
    if len(windows) == 0:
        return windows
    unknown = set(windows.home_ids.tolist()) - set(scaler.mean)
    if unknown:
        raise KeyError(f"no scaler statistics for home(s): {sorted(unknown)}")
    mu = np.array([scaler.mean[h] for h in windows.home_ids])
    sd = np.array([scaler.std[h] for h in windows.home_ids])
    return replace(windows, inputs=(windows.inputs - mu[:, None]) / sd[:, None])


def write_windows_text(windows: WindowSet, path, header: str | None = None) -> None:
    """Export a window set as plain CSV: provenance columns, then x_*, then y_*."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header:
            fh.write(header)
        writer = csv.writer(fh)
        cols = ["home_id", "window_start"] + [f"x_{t}" for t in range(windows.T)]
        if windows.targets is not None:
            cols += [f"y_{m + 1}" for m in range(windows.M)]
        writer.writerow(cols)
        for i in range(len(windows)):
            row = [windows.home_ids[i], int(windows.starts[i])]
            row += [repr(float(v)) for v in windows.inputs[i]]
            if windows.targets is not None:
                row += [int(v) for v in windows.targets[i]]
            writer.writerow(row)


def read_windows_text(path) -> WindowSet:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for _, r in _data_lines(fh)]
    reader = csv.reader(rows)
    header = next(reader)
    T = sum(c.startswith("x_") for c in header)
    M = sum(c.startswith("y_") for c in header)
    body = list(reader)
    home_ids = np.array([r[0] for r in body], dtype=object)
    starts = np.array([int(r[1]) for r in body], dtype=np.int64)
    inputs = np.array([[float(v) for v in r[2 : 2 + T]] for r in body]).reshape(len(body), T)
    targets = None
    if M:
        targets = np.array([[float(v) for v in r[2 + T :]] for r in body]).reshape(len(body), M)
    return WindowSet(inputs, targets, home_ids, starts, T, M or 1)
