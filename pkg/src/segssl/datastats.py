"""Dataset difficulty descriptors: contrast-to-noise, signal-to-noise, foreground ratio.

Foreground is every pixel with a non-zero label.  Standard deviations use
the n-1 denominator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class QualityStats:
    cnr: float
    snr: float
    fbr: float  # percent


def fbr(label) -> float:
    label = np.asarray(label)
    return 100.0 * np.count_nonzero(label) / label.size


def _regions(image, label):
    image, label = np.asarray(image, dtype=np.float64), np.asarray(label)
    if image.ndim == 3:
        if image.shape[:2] != label.shape:
            raise StatsError(f"image shape {image.shape[:2]} != label shape {label.shape}")
        fg_mask = np.broadcast_to((label != 0)[..., None], image.shape)
    elif image.shape != label.shape:
        raise StatsError(f"image shape {image.shape} != label shape {label.shape}")
    else:
        fg_mask = label != 0
    fg, bg = image[fg_mask], image[~fg_mask]
    if fg.size == 0 or bg.size < 2:
        raise StatsError("need a non-empty foreground and at least two background pixels")
    bg_std = bg.std(ddof=1)
    if bg_std == 0:
        raise StatsError("background has zero variance")
    return fg, bg, bg_std


def cnr(image, label) -> float:
    """|mean(fg) - mean(bg)| / std(bg)."""
    fg, bg, bg_std = _regions(image, label)
    return float(abs(fg.mean() - bg.mean()) / bg_std)


def snr(image, label) -> float:
    """mean(fg) / std(bg), signed."""
    fg, _, bg_std = _regions(image, label)
    return float(fg.mean() / bg_std)


def image_stats(image, label) -> QualityStats:
    return QualityStats(cnr(image, label), snr(image, label), fbr(label))


@dataclass
class DatasetStats:
    mean: QualityStats
    per_image: dict[str, QualityStats | None]

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.per_image.items() if v is None]


def analyze_dataset(samples) -> DatasetStats:
    """Per-image statistics averaged without weights; failing images are left out of the means."""
    per_image = {}
    for s in samples:
        if not s.is_labeled:
            raise StatsError(f"sample {s.id} has no label")
        try:
            per_image[s.id] = image_stats(s.image, s.label)
        except StatsError:
            per_image[s.id] = None
    ok = [v for v in per_image.values() if v is not None]
    if ok:
        mean = QualityStats(
            float(np.mean([v.cnr for v in ok])),
            float(np.mean([v.snr for v in ok])),
            float(np.mean([v.fbr for v in ok])),
        )
    else:
        mean = QualityStats(math.nan, math.nan, math.nan)
    return DatasetStats(mean, per_image)


STATS_HEADER = "dataset,cnr,snr,fbr_percent"


def stats_csv(name, stats: DatasetStats) -> str:
    m = stats.mean
    return f"{STATS_HEADER}\n{name},{m.cnr!r},{m.snr!r},{m.fbr!r}\n"
