"""Referral thresholds, accept/refer decisions and referral-aware metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fileio import fmt
from .mc_uncertainty import PredictiveSummary, nearest_rank_index

DEFAULT_PERCENTILE = 10.0
DEFAULT_WINDOW = 5


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdTable:
    class_names: tuple[str, ...]
    thresholds: tuple[float, ...]
    percentile: float = DEFAULT_PERCENTILE

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if len(self.class_names) != len(self.thresholds):
            raise ValueError("one threshold per class is required")
        if any(not 0.0 <= t <= 1.0 for t in self.thresholds):
            raise ValueError(f"thresholds must lie in [0, 1]: {self.thresholds}")

    def to_text(self) -> str:
        return "".join(f"{n}\t{t:.6f}\n" for n, t in zip(self.class_names, self.thresholds))

    @classmethod
    def from_text(cls, text: str) -> "ThresholdTable":
        names, values = [], []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"threshold line {lineno}: expected 'name<TAB>value'")
            names.append(parts[0])
            values.append(float(parts[1]))
        return cls(tuple(names), tuple(values))


@dataclass(frozen=True, eq=False)
class TriageOutcome:
    accepted_class: int | None  # None means refer to an expert
    summary: PredictiveSummary
    threshold_applied: float

    @property
    def referred(self) -> bool:
        return self.accepted_class is None


@dataclass(frozen=True, eq=False)
class EvalReport:
    class_names: tuple[str, ...]
    confusion: np.ndarray          # rows true, cols predicted; accepted samples only
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    fraction_correct: np.ndarray
    accuracy: float
    referrals: np.ndarray          # per true class
    retained: int
    outcomes: tuple[TriageOutcome, ...]

    def to_csv(self) -> str:
        names = self.class_names
        lines = ["true\\predicted," + ",".join(names)]
        for name, row in zip(names, self.confusion):
            lines.append(name + "," + ",".join(str(int(v)) for v in row))
        lines.append("")
        lines.append("class_name,precision,recall,f1,fraction_correct,referrals")
        for c, name in enumerate(names):
            lines.append(f"{name},{fmt(self.precision[c])},{fmt(self.recall[c])},{fmt(self.f1[c])},"
                         f"{fmt(self.fraction_correct[c])},{int(self.referrals[c])}")
        lines.append("")
        lines.append("accuracy,retained,referred")
        lines.append(f"{fmt(self.accuracy)},{self.retained},{int(self.referrals.sum())}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RemovalCurve:
    raw: tuple[float, ...]
    smoothed: tuple[float, ...]
    window: int

    def to_csv(self) -> str:
        lines = ["k,raw_accuracy,smoothed_accuracy"]
        for k, r in enumerate(self.raw):
            s = fmt(self.smoothed[k]) if k < len(self.smoothed) else ""
            lines.append(f"{k},{fmt(r)},{s}")
        return "\n".join(lines) + "\n"


def nearest_rank(values: Sequence[float], percentile: float) -> float:
    ordered = sorted(values)
    return float(ordered[nearest_rank_index(len(ordered), percentile)])


def calibrate_thresholds(
    summaries: Sequence[PredictiveSummary],
    labels: Sequence[int],
    class_names: Sequence[str],
    percentile: float = DEFAULT_PERCENTILE,
    group_by: str = "predicted",
) -> ThresholdTable:
    """Per-class nearest-rank percentile of training confidences.

    Samples are grouped by their MC-predicted class by default, or by their
    true label with ``group_by="true"``.
    """
    if group_by not in ("predicted", "true"):
        raise ValueError(f"group_by must be 'predicted' or 'true', got {group_by!r}")
    if len(summaries) != len(labels):
        raise ValueError(f"{len(summaries)} summaries but {len(labels)} labels")
    groups: list[list[float]] = [[] for _ in class_names]
    for s, label in zip(summaries, labels):
        key = s.predicted_class if group_by == "predicted" else label
        groups[key].append(s.confidence)
    thresholds = []
    for name, group in zip(class_names, groups):
        if not group:
            raise CalibrationError(f"no training samples grouped under class '{name}'")
        thresholds.append(nearest_rank(group, percentile))
    return ThresholdTable(tuple(class_names), tuple(thresholds), percentile)


def decide(summary: PredictiveSummary, table: ThresholdTable) -> TriageOutcome:
    """Refer when the confidence is strictly below the predicted class's threshold."""
    if len(summary.medians) != len(table.thresholds):
        raise ValueError(f"summary has {len(summary.medians)} classes, table {len(table.thresholds)}")
    threshold = table.thresholds[summary.predicted_class]
    accepted = None if summary.confidence < threshold else summary.predicted_class
    return TriageOutcome(accepted, summary, threshold)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num, den = np.asarray(num, dtype=np.float64), np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def evaluate_with_referral(
    summaries: Sequence[PredictiveSummary],
    labels: Sequence[int],
    table: ThresholdTable,
) -> EvalReport:
    """Triage every sample and score the accepted ones (0/0 is reported as 0)."""
    if len(summaries) != len(labels):
        raise ValueError(f"{len(summaries)} summaries but {len(labels)} labels")
    c = len(table.class_names)
    confusion = np.zeros((c, c), dtype=np.int64)
    referrals = np.zeros(c, dtype=np.int64)
    outcomes = []
    for s, label in zip(summaries, labels):
        out = decide(s, table)
        outcomes.append(out)
        if out.referred:
            referrals[label] += 1
        else:
            confusion[label, out.accepted_class] += 1
    tp = np.diag(confusion)
    precision = _ratio(tp, confusion.sum(axis=0))
    recall = _ratio(tp, confusion.sum(axis=1))
    f1 = _ratio(2 * precision * recall, precision + recall)
    retained = int(confusion.sum())
    accuracy = float(tp.sum() / retained) if retained else 0.0
    return EvalReport(table.class_names, confusion, precision, recall, f1, recall.copy(),
                      accuracy, referrals, retained, tuple(outcomes))


def moving_average(values: Sequence[float], window: int) -> list[float]:
    """Trailing mean over ``values[k:k + window]`` reported at position ``k``."""
    if window < 1 or window > len(values):
        raise ValueError(f"window {window} invalid for {len(values)} values")
    return [sum(values[k:k + window]) / window for k in range(len(values) - window + 1)]


def removal_curve(
    summaries: Sequence[PredictiveSummary],
    labels: Sequence[int],
    window: int = DEFAULT_WINDOW,
) -> RemovalCurve:
    """Accuracy after dropping the ``k`` least confident samples, ``k = 0..N-1``.

    Samples are ordered by ascending confidence, ties kept in input order.
    """
    n = len(summaries)
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if window > n:
        raise ValueError(f"window {window} larger than the {n} samples")
    conf = np.array([s.confidence for s in summaries])
    correct = np.array([s.predicted_class == l for s, l in zip(summaries, labels)], dtype=np.int64)
    order = np.argsort(conf, kind="stable")
    # remaining correct counts for every suffix of the ordering
    suffix = np.cumsum(correct[order][::-1])[::-1]
    raw = [int(suffix[k]) / (n - k) for k in range(n)]
    return RemovalCurve(tuple(raw), tuple(moving_average(raw, window)), window)
