"""Image/label data model, synthetic shape datasets and labeled/unlabeled splits.

Images are ``float32`` arrays of shape (H, W, channels), label maps are
``uint8`` arrays of shape (H, W) and probability maps are float arrays of
shape (H, W, C).  Plain numpy arrays carry the data; the helpers below
enforce the invariants at module boundaries.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorio import load_tensor, save_tensor

SPLITS = ("labeled", "unlabeled", "validation", "test")
MANIFEST = "manifest.txt"


class GenerationError(RuntimeError):
    pass


class SplitError(ValueError):
    pass


class DatasetError(ValueError):
    pass


def check_image(image) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] < 1:
        raise ValueError(f"image must have shape (H, W, channels), got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    return image


def check_label(label, num_classes=None) -> np.ndarray:
    label = np.asarray(label)
    if label.ndim != 2 or label.dtype != np.uint8:
        raise ValueError(f"label map must be a 2-D uint8 array, got {label.dtype} {label.shape}")
    if num_classes is not None and label.size and int(label.max()) >= num_classes:
        raise ValueError(f"label value {int(label.max())} >= num_classes {num_classes}")
    return label


def check_probmap(prob, atol=1e-6) -> np.ndarray:
    prob = np.asarray(prob)
    if prob.ndim != 3 or prob.shape[2] < 2:
        raise ValueError(f"probability map must have shape (H, W, C>=2), got {prob.shape}")
    if np.any(prob < 0) or np.any(prob > 1):
        raise ValueError("probability entries must lie in [0, 1]")
    if np.max(np.abs(prob.sum(axis=2) - 1.0)) > atol:
        raise ValueError("probability vectors must sum to 1")
    return prob


@dataclass
class Sample:
    id: str
    image: np.ndarray
    label: np.ndarray | None = None
    is_labeled: bool = True

    def __post_init__(self):
        check_image(self.image)
        if self.is_labeled != (self.label is not None):
            raise ValueError(f"sample {self.id}: is_labeled must match label presence")
        if self.label is not None:
            check_label(self.label)
            if self.label.shape != self.image.shape[:2]:
                raise ValueError(
                    f"sample {self.id}: label shape {self.label.shape} != image shape {self.image.shape[:2]}"
                )


@dataclass
class DatasetSplit:
    """Disjoint labeled / unlabeled / validation / test pools.

    Unlabeled samples carry no label.  Their ground truth lives in
    ``hidden_labels`` and is only meant for post-hoc evaluation of
    pseudo-label quality; the trainer never reads it.
    """

    labeled: list[Sample]
    unlabeled: list[Sample]
    validation: list[Sample]
    test: list[Sample]
    num_classes: int
    hidden_labels: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[str] = set()
        for name in SPLITS:
            for s in getattr(self, name):
                if s.id in seen:
                    raise DatasetError(f"sample id {s.id!r} appears in more than one split")
                seen.add(s.id)
                if name == "unlabeled":
                    if s.is_labeled:
                        raise DatasetError(f"unlabeled sample {s.id!r} exposes a label")
                elif not s.is_labeled:
                    raise DatasetError(f"{name} sample {s.id!r} has no label")
                else:
                    check_label(s.label, self.num_classes)

    def without_unlabeled(self) -> "DatasetSplit":
        return DatasetSplit(list(self.labeled), [], list(self.validation), list(self.test), self.num_classes)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class GenConfig:
    count: int = 200
    height: int = 32
    width: int = 32
    num_classes: int = 3
    noise_sigma: float = 0.5
    shape_kinds: tuple[str, ...] = ("ellipse", "rectangle")
    background: float = 0.0
    intensity_step: float = 1.0
    # shape half-extent range as a fraction of min(height, width)
    size_range: tuple[float, float] = (0.06, 0.16)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.num_classes < 2 or self.num_classes > 256:
            raise ValueError("num_classes must be in [2, 256]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be positive")
        bad = set(self.shape_kinds) - {"ellipse", "rectangle"}
        if not self.shape_kinds or bad:
            raise ValueError(f"shape_kinds must be a non-empty subset of ellipse/rectangle, got {self.shape_kinds}")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ValueError("size_range must satisfy 0 < lo <= hi")


def _shape_mask(kind, cy, cx, ry, rx, height, width):
    yy, xx = np.mgrid[0:height, 0:width]
    if kind == "ellipse":
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def _draw_shape(rng, cfg, occupied):
    side = min(cfg.height, cfg.width)
    lo, hi = cfg.size_range
    for _ in range(100):
        kind = cfg.shape_kinds[int(rng.integers(len(cfg.shape_kinds)))]
        ry, rx = rng.uniform(lo * side, hi * side, size=2)
        # centres keep the shape inside the frame whenever it fits
        cy = rng.uniform(min(ry, (cfg.height - 1) / 2), max(cfg.height - 1 - ry, (cfg.height - 1) / 2))
        cx = rng.uniform(min(rx, (cfg.width - 1) / 2), max(cfg.width - 1 - rx, (cfg.width - 1) / 2))
        mask = _shape_mask(kind, cy, cx, ry, rx, cfg.height, cfg.width)
        # empty after clipping, or touching an earlier shape: draw again
        if mask.any() and not (mask & occupied).any():
            return mask
    raise GenerationError("could not place a non-empty shape after 100 attempts")


def generate_sample(cfg: GenConfig, seed: int, index: int) -> Sample:
    rng = np.random.default_rng([seed, index])
    label = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
    n_shapes = int(rng.integers(1, cfg.num_classes))
    classes = rng.choice(np.arange(1, cfg.num_classes), size=n_shapes, replace=False)
    for cls in classes:
        mask = _draw_shape(rng, cfg, label > 0)
        label[mask] = cls
    image = cfg.background + cfg.intensity_step * label.astype(np.float64)
    image += rng.normal(0.0, cfg.noise_sigma, size=label.shape) if cfg.noise_sigma > 0 else 0.0
    return Sample(f"s{index:05d}", image[:, :, None].astype(np.float32), label, True)


def generate_synthetic(cfg: GenConfig, seed: int) -> list[Sample]:
    """Background plus 1..C-1 non-overlapping ellipses/rectangles, one class each.

    Class ``c`` sits at intensity ``background + c * intensity_step``; additive
    Gaussian noise of std ``noise_sigma`` is applied on top.  Every sample
    uses its own stream derived from ``(seed, index)``.
    """
    return [generate_sample(cfg, seed, i) for i in range(cfg.count)]


# ---------------------------------------------------------------------------
# splitting


def labeled_count(labeled_ratio: float, pool_size: int) -> int:
    # round half up; 1e-9 absorbs float noise such as 0.05 * 140 = 7.000000000000001
    return max(1, math.floor(labeled_ratio * pool_size + 0.5 + 1e-9))


def split_dataset(samples, labeled_ratio, val_count, test_count, seed, num_classes=None) -> DatasetSplit:
    samples = list(samples)
    if not 0 < labeled_ratio <= 1:
        raise SplitError("labeled_ratio must be in (0, 1]")
    if val_count < 0 or test_count < 0 or val_count + test_count >= len(samples):
        raise SplitError(
            f"pool too small for one labeled sample: {len(samples)} samples, "
            f"{val_count} validation, {test_count} test"
        )
    if any(not s.is_labeled for s in samples):
        raise SplitError("split_dataset expects fully annotated samples")
    if num_classes is None:
        num_classes = max(2, max(int(s.label.max()) for s in samples) + 1)

    order = np.random.default_rng(seed).permutation(len(samples))
    shuffled = [samples[i] for i in order]
    validation = shuffled[:val_count]
    test = shuffled[val_count : val_count + test_count]
    pool = shuffled[val_count + test_count :]
    n_lab = min(len(pool), labeled_count(labeled_ratio, len(pool)))
    labeled = pool[:n_lab]
    unlabeled = [Sample(s.id, s.image, None, False) for s in pool[n_lab:]]
    hidden = {s.id: s.label for s in pool[n_lab:]}
    return DatasetSplit(labeled, unlabeled, validation, test, num_classes, hidden)


# ---------------------------------------------------------------------------
# on-disk layout: one directory per split plus a tab-separated manifest


def save_dataset(split: DatasetSplit, root) -> None:
    root = Path(root)
    rows = []
    for name in SPLITS:
        (root / name).mkdir(parents=True, exist_ok=True)
        for s in getattr(split, name):
            img = f"{name}/{s.id}.img.segt"
            save_tensor(s.image.astype(np.float32), root / img)
            label = s.label if s.label is not None else split.hidden_labels.get(s.id)
            lbl = "-"
            if label is not None:
                lbl = f"{name}/{s.id}.lbl.segt"
                save_tensor(label, root / lbl)
            rows.append(f"{s.id}\t{name}\t{img}\t{lbl}\t{int(s.is_labeled)}")
    with open(root / MANIFEST, "w") as fh:
        fh.write(f"#num_classes\t{split.num_classes}\n")
        fh.write("#id\tsplit\timage_file\tlabel_file\tis_labeled\n")
        fh.write("\n".join(rows) + "\n")


def read_manifest(root):
    root = Path(root)
    path = root / MANIFEST
    if not path.exists():
        raise DatasetError(f"no manifest at {path}")
    num_classes = None
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#num_classes"):
                num_classes = int(line.split("\t")[1])
                continue
            if line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5 or parts[1] not in SPLITS:
                raise DatasetError(f"{path}:{lineno}: malformed manifest row")
            rows.append((parts[0], parts[1], parts[2], parts[3], parts[4] == "1"))
    if num_classes is None:
        raise DatasetError(f"{path}: missing #num_classes header")
    return num_classes, rows


def load_dataset(root, splits=SPLITS, with_hidden=False) -> DatasetSplit:
    """Read a dataset directory.  Splits not listed in ``splits`` are not touched."""
    root = Path(root)
    num_classes, rows = read_manifest(root)
    pools = {name: [] for name in SPLITS}
    hidden = {}
    for sid, name, img, lbl, is_labeled in rows:
        if name not in splits:
            continue
        image = load_tensor(root / img)
        label = load_tensor(root / lbl) if lbl != "-" and (is_labeled or with_hidden) else None
        if is_labeled:
            pools[name].append(Sample(sid, image, label, True))
        else:
            pools[name].append(Sample(sid, image, None, False))
            if label is not None:
                hidden[sid] = label
    return DatasetSplit(
        pools["labeled"], pools["unlabeled"], pools["validation"], pools["test"], num_classes, hidden
    )


def dataset_exists(root) -> bool:
    return os.path.exists(os.path.join(root, MANIFEST))
