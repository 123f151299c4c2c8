"""Task metrics: segmentation IoU/accuracy, depth errors, improvement ratios."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

IGNORE_INDEX = 255
DEPTH_EPS = 1e-6


@dataclass(frozen=True)
class SegScore:
    miou: float
    pixel_acc: float

    def __post_init__(self):
        if not (0.0 <= self.miou <= 1.0 and 0.0 <= self.pixel_acc <= 1.0):
            raise ConfigurationError("segmentation scores must lie in [0, 1]")


@dataclass(frozen=True)
class DepthScore:
    abs_err: float
    rel_err: float
    delta1: float
    delta2: float
    delta3: float

    def __post_init__(self):
        if self.abs_err < 0.0 or self.rel_err < 0.0:
            raise ConfigurationError("depth errors must be >= 0")
        for d in (self.delta1, self.delta2, self.delta3):
            if not 0.0 <= d <= 100.0:
                raise ConfigurationError("delta accuracies are percentages in [0, 100]")
        if not self.delta1 <= self.delta2 + 1e-9 or not self.delta2 <= self.delta3 + 1e-9:
            raise ConfigurationError("delta accuracies must be monotone in the threshold")


def _flat_int(arr):
    return np.asarray(arr).reshape(-1).astype(np.int64)


class ConfusionAccumulator:
    """Global confusion matrix; mergeable so evaluation can run in chunks."""

    def __init__(self, num_classes, ignore_index=IGNORE_INDEX):
        if num_classes <= 0:
            raise ConfigurationError("num_classes must be positive")
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, truth):
        """Accumulate pixel counts; matrix[t, p] counts truth t predicted p."""
        pred = _flat_int(pred)
        truth = _flat_int(truth)
        if pred.shape != truth.shape:
            raise ConfigurationError("prediction and truth sizes differ")
        keep = truth != self.ignore_index
        pred = pred[keep]
        truth = truth[keep]
        if pred.size == 0:
            return
        if (pred < 0).any() or (pred >= self.num_classes).any():
            raise ConfigurationError("prediction contains out-of-range class ids")
        if (truth < 0).any() or (truth >= self.num_classes).any():
            raise ConfigurationError("truth contains out-of-range class ids")
        idx = truth * self.num_classes + pred
        self.matrix += np.bincount(idx, minlength=self.num_classes ** 2).reshape(
            self.num_classes, self.num_classes
        )

    def merge(self, other):
        if other.num_classes != self.num_classes or other.ignore_index != self.ignore_index:
            raise ConfigurationError("cannot merge accumulators with different configurations")
        self.matrix += other.matrix

    def scores(self):
        """SegScore from the accumulated matrix.

        Mean IoU averages over classes present in truth or prediction; classes
        absent from both are excluded rather than scored 0 or 1.
        """
        total = self.matrix.sum()
        if total == 0:
            raise ConfigurationError("no labeled pixels accumulated")
        truth_count = self.matrix.sum(axis=1)
        pred_count = self.matrix.sum(axis=0)
        diag = np.diag(self.matrix)
        present = (truth_count + pred_count) > 0
        union = truth_count + pred_count - diag
        iou = diag[present] / union[present]
        return SegScore(miou=float(iou.mean()), pixel_acc=float(diag.sum() / total))


def segmentation_score(pred, truth, num_classes, ignore_index=IGNORE_INDEX):
    """One-shot SegScore for a single prediction/truth pair (or batch)."""
    acc = ConfusionAccumulator(num_classes, ignore_index)
    acc.update(pred, truth)
    return acc.scores()


def depth_score(pred, truth, eps=DEPTH_EPS, valid_mask=None):
    """Absolute/relative error plus threshold accuracies delta_1..3.

    delta = max(d/d_true, d_true/d); delta_k is the percentage of valid
    pixels with delta < 1.25**k. Pixels with truth <= eps are excluded.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise ConfigurationError("prediction and truth sizes differ")
    valid = truth > eps
    if valid_mask is not None:
        valid &= np.asarray(valid_mask, dtype=bool).reshape(-1)
    if not valid.any():
        raise ConfigurationError("no valid depth pixels")
    d = pred[valid]
    g = truth[valid]

    abs_err = float(np.abs(d - g).mean())
    rel_err = float((np.abs(d - g) / g).mean())
    d_safe = np.maximum(d, eps)
    ratio = np.maximum(d_safe / g, g / d_safe)
    deltas = [float(100.0 * (ratio < 1.25 ** k).mean()) for k in (1, 2, 3)]
    return DepthScore(abs_err=abs_err, rel_err=rel_err,
                      delta1=deltas[0], delta2=deltas[1], delta3=deltas[2])


def relative_improvement(proposed, baseline, direction):
    """Percent improvement of proposed over baseline.

    higher_better: 100 * (proposed - baseline) / baseline
    lower_better:  100 * (baseline - proposed) / baseline
    """
    if direction not in ("higher_better", "lower_better"):
        raise ConfigurationError(f"unknown direction {direction!r}")
    if baseline == 0.0:
        raise ConfigurationError("relative improvement is undefined for a zero baseline")
    if direction == "higher_better":
        return 100.0 * (proposed - baseline) / baseline
    return 100.0 * (baseline - proposed) / baseline
