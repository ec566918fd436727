"""Overlap (Dice, IoU) and surface-distance (95HD, ASD) metrics.

Conventions:
  * Dice and IoU are percentages; a class absent from both masks scores 100.
  * Surfaces are foreground pixels with at least one 4-neighbour in the
    background; pixels outside the image count as background.
  * Distances are exact all-pairs Euclidean distances in pixel units.
  * The 95th percentile is nearest-rank: the ceil(0.95 * n)-th smallest value.
  * If either surface is empty the distances are undefined (NaN) and the
    class is flagged; aggregates skip undefined values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class EmptySurfaceError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, gt, class_id) -> ConfusionCounts:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    p = pred == class_id
    g = gt == class_id
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dice(c: ConfusionCounts) -> float:
    denom = c.fp + 2 * c.tp + c.fn
    return 100.0 if denom == 0 else 100.0 * 2 * c.tp / denom


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fn + c.fp
    return 100.0 if denom == 0 else 100.0 * c.tp / denom


def extract_surface(mask) -> np.ndarray:
    """Boundary pixel coordinates as an (n, 2) float array in row-major order."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return np.argwhere(m & ~interior).astype(np.float64)


def _directed(a, b):
    """For every point of ``a``, the distance to its nearest point of ``b``."""
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return np.sqrt(d2.min(axis=1))


def nearest_rank(values, q=95):
    v = np.sort(np.asarray(values))
    n = len(v)
    k = (q * n + 99) // 100  # ceil(q * n / 100) in integers
    return float(v[max(k, 1) - 1])


def _check_surfaces(a, b):
    if len(a) == 0 or len(b) == 0:
        raise EmptySurfaceError("surface distance undefined for an empty surface")


def hd95(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_surfaces(a, b)
    return max(nearest_rank(_directed(a, b)), nearest_rank(_directed(b, a)))


def asd(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_surfaces(a, b)
    return float((_directed(a, b).sum() + _directed(b, a).sum()) / (len(a) + len(b)))


@dataclass
class ClassMetrics:
    class_id: int
    dice: float
    iou: float
    hd95: float
    asd: float
    flags: tuple[str, ...] = ()


@dataclass
class MetricsReport:
    per_class: list[ClassMetrics] = field(default_factory=list)

    def mean(self, name) -> float:
        vals = [getattr(c, name) for c in self.per_class if not math.isnan(getattr(c, name))]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def dice(self):
        return self.mean("dice")

    @property
    def iou(self):
        return self.mean("iou")

    @property
    def hd95(self):
        return self.mean("hd95")

    @property
    def asd(self):
        return self.mean("asd")


def evaluate(pred, gt, num_classes) -> MetricsReport:
    """All four metrics for every non-background class, one-vs-rest."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    report = MetricsReport()
    for k in range(1, num_classes):
        c = confusion(pred, gt, k)
        sa, sb = extract_surface(pred == k), extract_surface(gt == k)
        flags = []
        if len(sa) == 0:
            flags.append("empty_pred")
        if len(sb) == 0:
            flags.append("empty_gt")
        if flags:
            h = a = math.nan
        else:
            h, a = hd95(sa, sb), asd(sa, sb)
        report.per_class.append(ClassMetrics(k, dice(c), iou(c), h, a, tuple(flags)))
    return report


def mean_dice(pred, gt, num_classes) -> float:
    """Class-averaged Dice without the surface computations."""
    return float(np.mean([dice(confusion(pred, gt, k)) for k in range(1, num_classes)]))


def aggregate(reports) -> dict[str, float]:
    """Average per case over classes, then over cases, skipping undefined values."""
    out = {}
    for name in ("dice", "iou", "hd95", "asd"):
        vals = [getattr(r, name) for r in reports]
        vals = [v for v in vals if not math.isnan(v)]
        out[name] = float(np.mean(vals)) if vals else math.nan
    return out
