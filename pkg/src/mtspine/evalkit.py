"""Slice-level sensitivity/specificity and vertebra-level voting."""
import csv
import io
import math
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from . import datagen, training
from .autodiff.ops import softmax_array

BQ_SHORT = ("N", "B", "M", "L")
PI_SHORT = ("N", "U", "B")
LESION_CLASSES = (1, 2, 3)  # blastic, mixed, lytic; also the final tie-break order
NORMAL = 0


def confusion(truth, pred, num_classes):
    """Counts with rows = ground truth, columns = prediction."""
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape:
        raise ValueError(f"truth has {truth.size} labels, pred has {pred.size}")
    if truth.size and (min(truth.min(), pred.min()) < 0 or max(truth.max(), pred.max()) >= num_classes):
        raise ValueError("label out of range")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (truth, pred), 1)
    return m


def sensitivity_specificity(matrix):
    """One-vs-rest SE and SP per class.

    SE of a class with no ground-truth items is NaN (undefined), likewise SP
    when every item belongs to the class.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
        raise ValueError("confusion matrix must be square and nonempty")
    total = m.sum()
    tp = np.diag(m)
    row = m.sum(axis=1)
    col = m.sum(axis=0)
    tn = total - row - col + tp
    negatives = total - row
    with np.errstate(invalid="ignore", divide="ignore"):
        se = np.where(row > 0, tp / np.where(row > 0, row, 1), np.nan)
        sp = np.where(negatives > 0, tn / np.where(negatives > 0, negatives, 1), np.nan)
    return se, sp


@dataclass
class EvalReport:
    level: str
    matrix: np.ndarray
    se: np.ndarray
    sp: np.ndarray
    class_short: tuple = BQ_SHORT

    @classmethod
    def from_labels(cls, level, truth, pred, class_short=BQ_SHORT):
        m = confusion(truth, pred, len(class_short))
        se, sp = sensitivity_specificity(m)
        return cls(level, m, se, sp, tuple(class_short))

    @property
    def n(self):
        return int(self.matrix.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.matrix) / self.n) if self.n else float("nan")

    def columns(self):
        return [f"{kind}_{c}" for c in self.class_short for kind in ("SE", "SP")]

    def values(self):
        return [v for pair in zip(self.se, self.sp) for v in pair]

    def metrics_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        w.writerow(["NA" if np.isnan(v) else f"{v:.6f}" for v in self.values()])
        return buf.getvalue()

    def confusion_text(self):
        width = max(6, len(str(self.matrix.max(initial=0))) + 1)
        lines = ["truth\\pred" + "".join(c.rjust(width) for c in self.class_short)]
        for c, row in zip(self.class_short, self.matrix):
            lines.append(c.ljust(10) + "".join(str(int(v)).rjust(width) for v in row))
        return "\n".join(lines) + "\n"

    def equals(self, other):
        return (self.level == other.level and np.array_equal(self.matrix, other.matrix)
                and np.array_equal(self.se, other.se, equal_nan=True)
                and np.array_equal(self.sp, other.sp, equal_nan=True))


def vote_vertebra(slice_preds, threshold=1):
    """Aggregate slice predictions of one vertebra.

    ``slice_preds`` is a list of ``(class, probability vector)``. The lesion
    class (blastic/mixed/lytic) with the most predicted slices wins if its
    count exceeds ``threshold``; otherwise the vertebra is normal. Count ties
    go to the larger summed probability of the tied classes, then to the
    fixed order blastic < mixed < lytic.
    """
    if not slice_preds:
        raise ValueError("a vertebra needs at least one slice")
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    counts = Counter(int(c) for c, _ in slice_preds)
    best = max(counts.get(c, 0) for c in LESION_CLASSES)
    if best <= threshold:
        return NORMAL
    tied = [c for c in LESION_CLASSES if counts.get(c, 0) == best]
    if len(tied) == 1:
        return tied[0]
    # exact sums keep the tie-break independent of slice order
    prob_sum = {c: math.fsum(float(p[c]) for _, p in slice_preds) for c in tied}
    top = max(prob_sum.values())
    return next(c for c in tied if prob_sum[c] == top)


def group_vertebrae(samples):
    """Slice indices per ``(patient_id, vertebra_id)``, in first-seen order."""
    groups = defaultdict(list)
    for i, s in enumerate(samples):
        groups[(s.patient_id, s.vertebra_id)].append(i)
    return dict(groups)


def majority_label(labels):
    """Most frequent label; ties go to the smallest class index."""
    counts = Counter(int(x) for x in labels)
    top = max(counts.values())
    return min(c for c, k in counts.items() if k == top)


def evaluate_predictions(samples, pred, probs, threshold=1):
    """Slice and vertebra reports from precomputed bone-quality predictions."""
    truth = np.array([s.bq_label for s in samples], dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    slice_report = EvalReport.from_labels("slice", truth, pred)
    v_truth, v_pred = [], []
    for idx in group_vertebrae(samples).values():
        v_truth.append(majority_label(truth[idx]))
        v_pred.append(vote_vertebra([(pred[i], probs[i]) for i in idx], threshold))
    vertebra_report = EvalReport.from_labels("vertebra", v_truth, v_pred)
    return slice_report, vertebra_report


def evaluate(net, samples, threshold=1, hu_threshold=150.0, crop_size=(32, 32), inputs=None):
    """Run ``net`` over ``samples``; returns ``(slice, vertebra, pi_slice)`` reports."""
    if inputs is None:
        inputs = datagen.prepare_inputs(samples, hu_threshold, crop_size)
    logits = training.predict(net, inputs)
    probs = softmax_array(logits["bq"]) if len(samples) else np.zeros((0, 4))
    pred = logits["bq"].argmax(axis=1)
    slice_report, vertebra_report = evaluate_predictions(samples, pred, probs, threshold)
    pi_truth = [s.pi_label for s in samples]
    pi_report = EvalReport.from_labels("slice", pi_truth, logits["pi"].argmax(axis=1), PI_SHORT)
    return slice_report, vertebra_report, pi_report
