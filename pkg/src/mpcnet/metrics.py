"""Confusion matrices and the accuracy summary used to compare runs."""

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .pointcloud import UNLABELED


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predictions."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, n_classes):
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def n_classes(self):
        return self.counts.shape[0]

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm, truths, predictions, eval_mask=None):
    """Add labeled (and, if given, EVAL-masked) points to ``cm``."""
    truths = np.asarray(truths)
    predictions = np.asarray(predictions)
    keep = truths != UNLABELED
    if eval_mask is not None:
        keep &= np.asarray(eval_mask, dtype=bool)
    L = cm.n_classes
    add = np.bincount(truths[keep] * L + predictions[keep], minlength=L * L).reshape(L, L)
    return ConfusionMatrix(cm.counts + add)


def average_scores(n_points, index_sets, score_rows):
    """Average per-sample score rows onto cloud points.

    A point appearing several times (within or across samples) receives
    the mean of all its rows. Returns ``(scores, covered)``.
    """
    sums = None
    hits = np.zeros(n_points, dtype=np.int64)
    for idx, rows in zip(index_sets, score_rows):
        idx = np.asarray(idx)
        if sums is None:
            sums = np.zeros((n_points, rows.shape[1]))
        np.add.at(sums, idx, rows)
        np.add.at(hits, idx, 1)
    if sums is None:
        return np.zeros((n_points, 0)), hits > 0
    covered = hits > 0
    sums[covered] /= hits[covered, None]
    return sums, covered


@dataclass
class MetricsReport:
    oa: float
    aa: float
    kappa: float
    miou: float
    per_class_acc: list
    per_class_iou: list
    head_avg: float
    tail_avg: float
    head_min: float
    tail_min: float
    tail_set: list = field(default_factory=list)
    absent_classes: list = field(default_factory=list)
    total: int = 0
    coverage: float = 1.0

    SUMMARY = ("oa", "aa", "kappa", "miou", "head_avg", "tail_avg", "head_min", "tail_min")

    def to_dict(self):
        return asdict(self)

    def summary(self):
        return {k: getattr(self, k) for k in self.SUMMARY}

    def to_csv(self, class_names=None):
        """One row per metric: class accuracies, then OA/AA/kappa/mIoU, then head/tail stats."""
        names = class_names or [f"class_{i}" for i in range(len(self.per_class_acc))]
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["metric", "value"])
        for name, acc in zip(names, self.per_class_acc):
            writer.writerow([name, acc])
        for key in self.SUMMARY:
            writer.writerow([key, getattr(self, key)])
        return buf.getvalue()


def _partition_stats(acc, classes):
    vals = [acc[c] for c in classes if not math.isnan(acc[c])]
    if not vals:
        return float("nan"), float("nan")
    return float(np.mean(vals)), float(np.min(vals))


def compute_report(cm, tail_set=()):
    """All summary metrics of a confusion matrix.

    Classes without true points are excluded from AA, mIoU and the
    head/tail statistics and listed in ``absent_classes``.
    """
    counts = np.asarray(cm.counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    L = counts.shape[0]
    tp = np.diag(counts)
    truth = counts.sum(axis=1)
    pred = counts.sum(axis=0)
    present = truth > 0
    acc = np.full(L, np.nan)
    acc[present] = tp[present] / truth[present]
    iou = np.full(L, np.nan)
    iou[present] = tp[present] / (truth[present] + pred[present] - tp[present])
    p_o = tp.sum() / total
    p_e = float((truth * pred).sum()) / total ** 2
    kappa = 1.0 if p_e == 1.0 else (p_o - p_e) / (1.0 - p_e)
    tail = sorted(int(c) for c in tail_set)
    head = [c for c in range(L) if c not in tail]
    head_avg, head_min = _partition_stats(acc, head)
    tail_avg, tail_min = _partition_stats(acc, tail)
    return MetricsReport(
        oa=float(p_o), aa=float(acc[present].mean()), kappa=float(kappa),
        miou=float(iou[present].mean()), per_class_acc=acc.tolist(),
        per_class_iou=iou.tolist(), head_avg=head_avg, tail_avg=tail_avg,
        head_min=head_min, tail_min=tail_min, tail_set=tail,
        absent_classes=np.flatnonzero(~present).tolist(), total=int(total))
