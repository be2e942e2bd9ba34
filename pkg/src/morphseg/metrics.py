"""Confusion-count scores and threshold-sweep metrics for binary segmentation."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

AP_THRESHOLDS = 256
MIOU_THRESHOLDS = 99

CSV_COLUMNS = ("AP", "F1", "Sensitivity", "Specificity", "JI", "DICE", "mIoU")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class Scores:
    f1: float
    sensitivity: float
    specificity: float
    ji: float
    dice: float
    precision: float
    degenerate: list[str] = field(default_factory=list)


@dataclass
class MetricsReport:
    ap: float
    f1: float
    sensitivity: float
    specificity: float
    ji: float
    dice: float
    miou: float
    threshold: float = 0.5
    ap_thresholds: int = AP_THRESHOLDS
    miou_thresholds: int = MIOU_THRESHOLDS
    degenerate: list[str] = field(default_factory=list)

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def row(self) -> list[float]:
        return [self.ap, self.f1, self.sensitivity, self.specificity, self.ji, self.dice, self.miou]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            writer.writerow([f"{v:.6f}" for v in self.row()])


def _binary(x) -> np.ndarray:
    return np.asarray(x) > 0.5


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = _binary(pred), _binary(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def scores(c: ConfusionCounts) -> Scores:
    """F1, sensitivity, specificity, Jaccard and Dice; 0/0 yields 0 and is flagged."""
    flags: list[str] = []
    precision = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    recall = _ratio(c.tp, c.tp + c.fn, "sensitivity", flags)
    specificity = _ratio(c.tn, c.tn + c.fp, "specificity", flags)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", flags)
    ji = _ratio(c.tp, c.tp + c.fp + c.fn, "ji", flags)
    dice = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "dice", flags)
    return Scores(f1, recall, specificity, ji, dice, precision, flags)


def _check_scores(s, gt):
    s = np.asarray(s, dtype=np.float64)
    gt = _binary(gt)
    if s.shape != gt.shape:
        raise ValueError(f"shape mismatch: scores {s.shape} vs ground truth {gt.shape}")
    if not gt.any():
        raise ValueError("ground truth has no foreground; recall is undefined")
    return s.ravel(), gt.ravel()


def ap_thresholds(n: int = AP_THRESHOLDS) -> np.ndarray:
    return np.arange(1, n + 1) / (n + 1)


def miou_thresholds(n: int = MIOU_THRESHOLDS) -> np.ndarray:
    return np.arange(1, n + 1) / (n + 1)


def _sweep_counts(s, gt, thresholds):
    """(tp, fp) for prediction ``s > t`` at each threshold, via one sort."""
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    pos_sorted = gt[order].astype(np.int64)
    # number of positives / negatives with score <= t
    below = np.searchsorted(s_sorted, thresholds, side="right")
    cum_pos = np.concatenate([[0], np.cumsum(pos_sorted)])
    n_pos = cum_pos[-1]
    tp = n_pos - cum_pos[below]
    fp = (s.size - below) - tp
    return tp, fp, n_pos


def precision_recall_curve(s, gt, n_thresholds: int = AP_THRESHOLDS):
    s, gt = _check_scores(s, gt)
    t = ap_thresholds(n_thresholds)
    tp, fp, n_pos = _sweep_counts(s, gt, t)
    predicted = tp + fp
    # nothing predicted: precision taken as 1 (recall is 0 there, so it adds no area)
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / n_pos
    return t, precision, recall


def average_precision(s, gt, n_thresholds: int = AP_THRESHOLDS) -> float:
    """Step-function area under the precision-recall curve on a uniform threshold grid.

    Points are visited from the highest threshold down, so recall never
    decreases; each gain in recall is weighted by the precision at which it
    is reached.
    """
    _, precision, recall = precision_recall_curve(s, gt, n_thresholds)
    precision, recall = precision[::-1], recall[::-1]
    gains = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(gains * precision))


def miou(s, gt, n_thresholds: int = MIOU_THRESHOLDS) -> float:
    """Mean Jaccard index of ``s > t`` over t = i / (n + 1), i = 1..n."""
    s, gt = _check_scores(s, gt)
    tp, fp, n_pos = _sweep_counts(s, gt, miou_thresholds(n_thresholds))
    fn = n_pos - tp
    return float(np.mean(tp / (tp + fp + fn)))


def evaluate(s, gt, threshold: float = 0.5, n_ap: int = AP_THRESHOLDS, n_miou: int = MIOU_THRESHOLDS) -> MetricsReport:
    """All metrics for a real-valued prediction ``s`` against a binary ground truth."""
    s = np.asarray(s, dtype=np.float64)
    sc = scores(confusion(s > threshold, gt))
    return MetricsReport(
        ap=average_precision(s, gt, n_ap),
        f1=sc.f1,
        sensitivity=sc.sensitivity,
        specificity=sc.specificity,
        ji=sc.ji,
        dice=sc.dice,
        miou=miou(s, gt, n_miou),
        threshold=threshold,
        ap_thresholds=n_ap,
        miou_thresholds=n_miou,
        degenerate=sc.degenerate,
    )


def dice_score(pred, gt) -> float:
    return scores(confusion(pred, gt)).dice
