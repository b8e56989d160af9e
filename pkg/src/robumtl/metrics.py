"""Evaluation arithmetic: task metrics, relative multi-task delta, router
statistics and throughput."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ValidationError

# Metric per task for the synthetic three-task corpus, with "lower is better" flag.
TASK_METRICS = {
    "semseg": ("mIoU", 0),
    "saliency": ("mIoU", 0),
    "normals": ("RMSE", 1),
}
TASK_ORDER = ("semseg", "saliency", "normals")


def miou(pred, true, classes) -> float:
    """Mean IoU over the classes that occur in ``true``."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValidationError(f"miou: shape mismatch {pred.shape} vs {true.shape}")
    acc = IoUAccumulator(classes)
    acc.update(pred, true)
    return acc.value()


class IoUAccumulator:
    """Dataset-level IoU: intersections and unions summed before dividing."""

    def __init__(self, classes):
        self.classes = list(range(classes)) if isinstance(classes, (int, np.integer)) else list(classes)
        self.inter = np.zeros(len(self.classes), dtype=np.int64)
        self.union = np.zeros(len(self.classes), dtype=np.int64)
        self.present = np.zeros(len(self.classes), dtype=bool)

    def update(self, pred, true):
        pred = np.asarray(pred)
        true = np.asarray(true)
        if pred.shape != true.shape:
            raise ValidationError(f"miou: shape mismatch {pred.shape} vs {true.shape}")
        valid = set(self.classes)
        for arr, what in ((pred, "prediction"), (true, "ground truth")):
            bad = np.setdiff1d(np.unique(arr), list(valid))
            if bad.size:
                raise ValidationError(f"miou: {what} contains class ids {bad.tolist()} outside {self.classes}")
        for i, c in enumerate(self.classes):
            p = pred == c
            t = true == c
            self.inter[i] += np.count_nonzero(p & t)
            self.union[i] += np.count_nonzero(p | t)
            self.present[i] |= bool(t.any())

    def value(self) -> float:
        if not self.present.any():
            raise ValidationError("miou: ground truth contains none of the classes")
        ious = self.inter[self.present] / self.union[self.present]
        return float(ious.mean())


def rmse(pred, true, channel_axis: Optional[int] = None) -> float:
    """Root-mean-square error over labeled entries (``true != 0``).

    With ``channel_axis`` a pixel counts if any of its channels is nonzero and
    all of its channels then enter the mean.
    """
    acc = SquaredErrorAccumulator(channel_axis)
    acc.update(pred, true)
    return acc.value()


class SquaredErrorAccumulator:
    def __init__(self, channel_axis: Optional[int] = None):
        self.channel_axis = channel_axis
        self.sse = 0.0
        self.count = 0

    def update(self, pred, true):
        pred = np.asarray(pred, dtype=np.float64)
        true = np.asarray(true, dtype=np.float64)
        if pred.shape != true.shape:
            raise ValidationError(f"rmse: shape mismatch {pred.shape} vs {true.shape}")
        if self.channel_axis is None:
            mask = true != 0
        else:
            mask = np.broadcast_to(np.any(true != 0, axis=self.channel_axis, keepdims=True), true.shape)
        d = (pred - true)[mask]
        self.sse += float(np.dot(d, d))
        self.count += int(d.size)

    def value(self) -> float:
        if self.count == 0:
            return float("nan")
        return float(np.sqrt(self.sse / self.count))


def delta_m(results: Sequence[float], baseline: Sequence[float], lower_is_better: Sequence[int]) -> float:
    """Average signed relative change versus a baseline, in percent."""
    m = np.asarray(results, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    l = np.asarray(lower_is_better, dtype=np.int64)
    if not (m.shape == b.shape == l.shape) or m.ndim != 1 or m.size == 0:
        raise ValidationError("delta_m: results, baseline and directions must be equal-length vectors")
    if np.any(b == 0):
        raise ValidationError("delta_m: baseline metrics must be nonzero")
    sign = np.where(l == 1, -1.0, 1.0)
    return float(100.0 * np.mean(sign * (m - b) / b))


def classifier_metrics(confusion) -> dict[str, float]:
    """Accuracy and macro precision / recall / F1 from a confusion matrix
    (rows = true class, columns = predicted). Classes that are never
    predicted get precision 0."""
    c = np.asarray(confusion, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValidationError(f"confusion matrix must be square, got shape {c.shape}")
    if np.any(c < 0):
        raise ValidationError("confusion matrix has negative counts")
    total = c.sum()
    if total == 0:
        raise ValidationError("confusion matrix is all zeros")
    tp = np.diag(c)
    pred_pos = c.sum(axis=0)
    true_pos = c.sum(axis=1)
    precision = np.divide(tp, pred_pos, out=np.zeros_like(tp), where=pred_pos > 0)
    recall = np.divide(tp, true_pos, out=np.zeros_like(tp), where=true_pos > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return {
        "accuracy": float(tp.sum() / total),
        "precision": float(precision.mean()),
        "recall": float(recall.mean()),
        "f1": float(f1.mean()),
    }


def confusion_matrix(true, pred, n: int) -> np.ndarray:
    out = np.zeros((n, n), dtype=np.int64)
    np.add.at(out, (np.asarray(true), np.asarray(pred)), 1)
    return out


def roc_points(scores: np.ndarray, labels: np.ndarray, cls: int, thresholds=None) -> list[tuple[float, float, float]]:
    """One-vs-rest (threshold, FPR, TPR) points for class ``cls``."""
    if thresholds is None:
        thresholds = np.linspace(0.0, 1.0, 21)
    pos = labels == cls
    out = []
    for t in thresholds:
        hit = scores[:, cls] >= t
        tpr = float(np.count_nonzero(hit & pos) / max(np.count_nonzero(pos), 1))
        fpr = float(np.count_nonzero(hit & ~pos) / max(np.count_nonzero(~pos), 1))
        out.append((float(t), fpr, tpr))
    return out


def fps(num_batches: int, batch_size: int, elapsed_seconds: float) -> float:
    if elapsed_seconds <= 0:
        raise ValidationError(f"elapsed time must be positive, got {elapsed_seconds}")
    return num_batches * batch_size / elapsed_seconds


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskResult:
    task: str
    metric: str
    value: float
    lower_is_better: int


@dataclass
class EvalReport:
    name: str
    tasks: list[TaskResult]
    delta_m_adv: Optional[float] = None
    delta_m_clean: Optional[float] = None
    router_confusion: Optional[np.ndarray] = None
    timing: dict = field(default_factory=dict)

    def values(self) -> list[float]:
        return [t.value for t in self.tasks]

    def directions(self) -> list[int]:
        return [t.lower_is_better for t in self.tasks]

    def by_task(self) -> dict[str, float]:
        return {t.task: t.value for t in self.tasks}

    def with_baselines(self, adverse: Optional[Mapping[str, float]], clean: Optional[Mapping[str, float]]):
        """Fill the delta rows from per-task baseline values (skipped when absent)."""
        names = [t.task for t in self.tasks]
        if adverse is not None and all(n in adverse for n in names):
            self.delta_m_adv = delta_m(self.values(), [adverse[n] for n in names], self.directions())
        if clean is not None and all(n in clean for n in names):
            self.delta_m_clean = delta_m(self.values(), [clean[n] for n in names], self.directions())
        return self


def task_results(values: Mapping[str, float]) -> list[TaskResult]:
    return [TaskResult(t, TASK_METRICS[t][0], float(values[t]), TASK_METRICS[t][1]) for t in TASK_ORDER if t in values]


REPORT_COLUMNS = ("report", "row", "metric", "value", "lower_is_better")


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def report_rows(report: EvalReport) -> list[tuple]:
    rows = [(report.name, t.task, t.metric, _fmt(t.value), str(t.lower_is_better)) for t in report.tasks]
    rows.append((report.name, "delta_m_adv", "percent", _fmt(report.delta_m_adv), ""))
    rows.append((report.name, "delta_m_clean", "percent", _fmt(report.delta_m_clean), ""))
    return rows


def reports_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerows(report_rows(r))
    return buf.getvalue()


def summary_block(reports: Sequence[EvalReport]) -> str:
    lines = []
    for r in reports:
        parts = [f"{t.task}={t.value:.4f}" for t in r.tasks]
        if r.delta_m_adv is not None:
            parts.append(f"dm_adv={r.delta_m_adv:+.2f}%")
        if r.delta_m_clean is not None:
            parts.append(f"dm_clean={r.delta_m_clean:+.2f}%")
        lines.append(f"{r.name:<28s} " + "  ".join(parts))
    return "\n".join(lines) + "\n"
