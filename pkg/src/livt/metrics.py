"""Top-1, many/medium/few-shot group accuracy and calibration error."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .errors import MetricError

MANY_ABOVE = 100  # many-shot: more than 100 training images
FEW_BELOW = 20  # few-shot: fewer than 20; medium is 20..100 inclusive


@dataclass
class EvalReport:
    overall_acc: float
    many_acc: Optional[float]
    med_acc: Optional[float]
    few_acc: Optional[float]
    ece: Optional[float] = None
    mce: Optional[float] = None
    group_sizes: tuple = (0, 0, 0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = [f.name for f in fields(self) if f.name != "group_sizes"]
        w.writerow(names + ["n_many", "n_med", "n_few"])
        w.writerow([_fmt(getattr(self, n)) for n in names] + list(self.group_sizes))
        return buf.getvalue()

    def to_table(self) -> str:
        rows = [
            ("overall", self.overall_acc, sum(self.group_sizes)),
            ("many (>100)", self.many_acc, self.group_sizes[0]),
            ("medium (20-100)", self.med_acc, self.group_sizes[1]),
            ("few (<20)", self.few_acc, self.group_sizes[2]),
            ("ECE", self.ece, None),
            ("MCE", self.mce, None),
        ]
        lines = [f"{'metric':<16}{'value':>10}{'samples':>10}"]
        for name, val, n in rows:
            shown = "absent" if val is None else f"{val:.4f}"
            lines.append(f"{name:<16}{shown:>10}{'' if n is None else n:>10}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def class_groups(train_counts) -> np.ndarray:
    """Group id per class: 0 many, 1 medium, 2 few."""
    c = np.asarray(train_counts)
    return np.where(c > MANY_ABOVE, 0, np.where(c < FEW_BELOW, 2, 1))


def group_accuracy(pred_labels, true_labels, train_counts) -> EvalReport:
    """Top-1 accuracy overall and per shot group; empty groups are ``None``."""
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    counts = np.asarray(train_counts)
    if pred.shape != true.shape:
        raise MetricError("prediction and label arrays differ in length")
    if true.size == 0:
        raise MetricError("no samples to evaluate")
    C = counts.size
    for arr in (pred, true):
        if arr.min() < 0 or arr.max() >= C:
            raise MetricError(f"label id outside [0, {C})")
    group = class_groups(counts)[true]
    correct = pred == true
    accs, sizes = [], []
    for g in range(3):
        sel = group == g
        n = int(sel.sum())
        sizes.append(n)
        accs.append(float(correct[sel].sum() / n) if n else None)
    overall = float(correct.sum() / true.size)
    return EvalReport(overall, accs[0], accs[1], accs[2], group_sizes=tuple(sizes))


def calibration_bins(probs, true_labels, num_bins: int = 15):
    """Per-bin ``(count, accuracy, mean confidence)`` over equal-width bins on (0, 1]."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(true_labels)
    if p.ndim != 2 or p.shape[0] == 0:
        raise MetricError("calibration error is undefined for an empty batch")
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(np.float64)
    # bin k holds confidences in (k/nb, (k+1)/nb]
    idx = np.clip(np.ceil(conf * num_bins).astype(np.int64) - 1, 0, num_bins - 1)
    count = np.bincount(idx, minlength=num_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=num_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=num_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(count > 0, acc_sum / np.maximum(count, 1), np.nan)
        mean_conf = np.where(count > 0, conf_sum / np.maximum(count, 1), np.nan)
    return count, acc, mean_conf


def ece_mce(probs, true_labels, num_bins: int = 15) -> tuple[float, float]:
    count, acc, conf = calibration_bins(probs, true_labels, num_bins)
    nz = count > 0
    gaps = np.abs(acc[nz] - conf[nz])
    ece = float((count[nz] / count.sum() * gaps).sum())
    return ece, float(gaps.max())


def evaluate(pred_probs, true_labels, train_counts, num_bins: int = 15) -> EvalReport:
    """Full report from probability rows (predictions are their argmax)."""
    p = np.asarray(pred_probs)
    rep = group_accuracy(p.argmax(axis=1), true_labels, train_counts)
    rep.ece, rep.mce = ece_mce(p, true_labels, num_bins)
    return rep


def bins_csv(probs, true_labels, num_bins: int = 15) -> str:
    count, acc, conf = calibration_bins(probs, true_labels, num_bins)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin", "lo", "hi", "count", "acc", "conf"])
    for k in range(num_bins):
        w.writerow([k, repr(k / num_bins), repr((k + 1) / num_bins), int(count[k]),
                    "" if count[k] == 0 else repr(float(acc[k])),
                    "" if count[k] == 0 else repr(float(conf[k]))])
    return buf.getvalue()
