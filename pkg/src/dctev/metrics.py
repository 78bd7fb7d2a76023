"""Binary event-prediction metrics and the evaluation experiment drivers.

A prediction is "active" when its probability is strictly greater than the
threshold; a probability equal to the threshold counts as inactive.
Precision, recall and F1 return 0 when their denominator is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

METRIC_KEYS = ("auc", "ap", "f1", "precision", "recall", "acc", "mse")


class UndefinedMetricError(ValueError):
    """The metric is undefined for this label composition (e.g. one class only)."""


@dataclass
class PredictionSet:
    """Flat arrays of probabilities, labels and the 1-based horizon of each entry."""

    probabilities: np.ndarray
    labels: np.ndarray
    horizons: np.ndarray | None = None
    home_ids: np.ndarray | None = None
    window_starts: np.ndarray | None = None

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(np.int8)
        if len(self.probabilities) != len(self.labels):
            raise ValueError(
                f"probabilities ({len(self.probabilities)}) and labels ({len(self.labels)}) differ in length"
            )
        if self.horizons is not None:
            self.horizons = np.asarray(self.horizons).ravel().astype(np.int64)
            if len(self.horizons) != len(self.labels):
                raise ValueError("horizons must align with probabilities")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_matrix(cls, probs: np.ndarray, labels: np.ndarray, home_ids=None, window_starts=None) -> "PredictionSet":
        """Flatten ``(n_windows, M)`` outputs row-major, tagging horizons ``1..M``."""
        probs = np.asarray(probs, dtype=np.float64)
        n, M = probs.shape
        horizons = np.tile(np.arange(1, M + 1), n)
        hid = None if home_ids is None else np.repeat(np.asarray(home_ids), M)
        ws = None if window_starts is None else np.repeat(np.asarray(window_starts), M)
        return cls(probs.ravel(), np.asarray(labels).ravel(), horizons, hid, ws)

    def at_horizon(self, m: int) -> "PredictionSet":
        sel = self.horizons == m
        return PredictionSet(self.probabilities[sel], self.labels[sel], self.horizons[sel])


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def confusion_at(preds: PredictionSet, threshold: float = 0.5) -> Confusion:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    active = preds.probabilities > threshold
    pos = preds.labels == 1
    tp = int(np.count_nonzero(active & pos))
    fp = int(np.count_nonzero(active & ~pos))
    fn = int(np.count_nonzero(~active & pos))
    return Confusion(tp, fp, len(preds) - tp - fp - fn, fn)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def precision(c: Confusion) -> float:
    return _ratio(c.tp, c.tp + c.fp)


def recall(c: Confusion) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def f1(c: Confusion) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def accuracy(c: Confusion) -> float:
    return _ratio(c.tp + c.tn, c.total)


def _auc_parts(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    # midranks: tied scores share the average of the ranks they span
    uniq, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    midrank = upper - (counts - 1) / 2.0
    rank_sum = midrank[inverse][pos].sum()
    return rank_sum - n_pos * (n_pos + 1) / 2.0, float(n_pos) * float(n_neg)


def roc_auc(preds: PredictionSet) -> float:
    """P(score of a positive > score of a negative) + 1/2 P(tie), via midranks."""
    num, den = _auc_parts(preds.probabilities, preds.labels)
    return num / den


def average_precision(preds: PredictionSet) -> float:
    """Step-wise area under the precision-recall curve.

    Scores are visited in descending order with tied scores forming a
    single step: ``sum_n (R_n - R_{n-1}) * P_n``.
    """
    labels = preds.labels
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive label")
    order = np.argsort(-preds.probabilities, kind="stable")
    s = preds.probabilities[order]
    y = labels[order] == 1
    tp = np.cumsum(y)
    seen = np.arange(1, len(s) + 1)
    # last index of each run of equal scores
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_step = tp[last]
    prec = tp_step / seen[last]
    rec = tp_step / n_pos
    return float(np.sum(np.diff(np.r_[0.0, rec]) * prec))


def mse(preds: PredictionSet) -> float:
    if len(preds) == 0:
        raise ValueError("MSE of an empty prediction set")
    return float(np.mean((preds.probabilities - preds.labels) ** 2))


def _safe(fn, preds) -> float | None:
    try:
        return float(fn(preds))
    except UndefinedMetricError:
        return None


def metric_row(preds: PredictionSet, threshold: float = 0.5) -> dict:
    """All metrics for one prediction set. Undefined ranking metrics are ``None``."""
    c = confusion_at(preds, threshold)
    return {
        "auc": _safe(roc_auc, preds),
        "ap": _safe(average_precision, preds),
        "f1": f1(c),
        "precision": precision(c),
        "recall": recall(c),
        "acc": accuracy(c),
        "mse": mse(preds) if len(preds) else None,
        "threshold": threshold,
        "confusion": c.to_dict(),
        "n": len(preds),
    }


@dataclass
class EvalReport:
    pooled: dict
    per_horizon: list[dict] = field(default_factory=list)
    threshold: float = 0.5
    pooling: str = "concatenate all horizons"

    def to_dict(self) -> dict:
        d = {k: self.pooled[k] for k in METRIC_KEYS}
        d.update(
            threshold=self.threshold,
            confusion=self.pooled["confusion"],
            n=self.pooled["n"],
            pooling=self.pooling,
            per_horizon=self.per_horizon,
        )
        return d


def per_horizon_report(preds: PredictionSet, threshold: float = 0.5) -> list[dict]:
    """One metric row per horizon ``m``, ordered by ``m``."""
    if preds.horizons is None:
        raise ValueError("prediction set carries no horizon indices")
    rows = []
    for m in np.unique(preds.horizons):
        row = metric_row(preds.at_horizon(int(m)), threshold)
        row["m"] = int(m)
        rows.append(row)
    return rows


def evaluate(preds: PredictionSet, threshold: float = 0.5) -> EvalReport:
    return EvalReport(metric_row(preds, threshold), per_horizon_report(preds, threshold), threshold)


@dataclass
class ThresholdSweep:
    rows: list[dict]
    best_threshold: float
    best_f1: float


def threshold_sweep(preds: PredictionSet, grid) -> ThresholdSweep:
    """F1 (and the other thresholded metrics) for each threshold in ``grid``.

    The best threshold maximises F1; ties go to the smaller threshold.
    """
    grid = [float(t) for t in grid]
    if not grid:
        raise ValueError("threshold grid is empty")
    rows = []
    for tau in grid:
        c = confusion_at(preds, tau)
        rows.append(
            {
                "threshold": tau,
                "f1": f1(c),
                "precision": precision(c),
                "recall": recall(c),
                "acc": accuracy(c),
                **c.to_dict(),
            }
        )
    best = min(rows, key=lambda r: (-r["f1"], r["threshold"]))
    return ThresholdSweep(rows, best["threshold"], best["f1"])


def default_threshold_grid(step: float = 0.05) -> list[float]:
    n = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(1, n)]
