"""Weak (intensity + integer shift) and strong (quarter-turn / flip) augmentation.

Both geometric components are exact permutations or shifts of the pixel
grid, so pseudo-labels can be moved between views without interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class WeakAugConfig:
    scale_range: tuple[float, float] = (0.9, 1.1)
    noise_sigma_max: float = 0.1
    brightness_shift_max: float = 0.1
    contrast_range: tuple[float, float] = (0.85, 1.15)
    shift_max: int = 2

    def __post_init__(self):
        for name in ("scale_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if self.noise_sigma_max < 0 or self.brightness_shift_max < 0 or self.shift_max < 0:
            raise ValueError("noise_sigma_max, brightness_shift_max and shift_max must be >= 0")

    @classmethod
    def identity(cls) -> "WeakAugConfig":
        return cls((1.0, 1.0), 0.0, 0.0, (1.0, 1.0), 0)


def shift_array(a, dy: int, dx: int):
    """Integer translation with zero fill; positive dx moves content right."""
    out = np.zeros_like(a)
    h, w = a.shape[:2]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = a[src_y, src_x]
    return out


def weak_augment(image, label=None, config: WeakAugConfig = WeakAugConfig(), rng=None):
    """Scale -> contrast -> brightness -> noise -> shift.

    The label, when given, receives the same shift and nothing else.
    """
    rng = np.random.default_rng() if rng is None else rng
    s = rng.uniform(*config.scale_range)
    c = rng.uniform(*config.contrast_range)
    b = rng.uniform(-config.brightness_shift_max, config.brightness_shift_max)
    sigma = rng.uniform(0.0, config.noise_sigma_max)
    noise = rng.standard_normal(image.shape)
    dy, dx = rng.integers(-config.shift_max, config.shift_max + 1, size=2)

    out = image * s
    if c != 1.0:
        mean = out.mean()
        out = (out - mean) * c + mean
    if b != 0.0:
        out = out + b
    if sigma > 0.0:
        out = out + sigma * noise
    out = shift_array(out, int(dy), int(dx))
    if label is None:
        return out, None
    return out, shift_array(label, int(dy), int(dx))


@dataclass(frozen=True)
class GeoTransform:
    """Rotate by ``rot_quarter_turns`` quarter turns, then flip columns, then rows.

    One quarter turn maps [[1, 2], [3, 4]] to [[3, 1], [4, 2]]: counter-clockwise
    with the row axis pointing up, clockwise as an image is usually displayed.
    """

    rot_quarter_turns: int = 0
    flip_horizontal: bool = False
    flip_vertical: bool = False

    def __post_init__(self):
        if self.rot_quarter_turns not in (0, 1, 2, 3):
            raise ValueError("rot_quarter_turns must be in {0, 1, 2, 3}")

    @property
    def is_identity(self) -> bool:
        return self.rot_quarter_turns == 0 and not self.flip_horizontal and not self.flip_vertical


def _check_geometry(a, t: GeoTransform):
    if t.rot_quarter_turns % 2 and a.shape[0] != a.shape[1]:
        raise ValueError(f"odd quarter-turn rotation needs a square grid, got {a.shape[:2]}")


def apply_geo(a, t: GeoTransform):
    _check_geometry(a, t)
    out = np.rot90(a, -t.rot_quarter_turns, axes=(0, 1))
    if t.flip_horizontal:
        out = out[:, ::-1]
    if t.flip_vertical:
        out = out[::-1]
    return np.ascontiguousarray(out)


def invert_geo(a, t: GeoTransform):
    _check_geometry(a, t)
    out = a
    if t.flip_vertical:
        out = out[::-1]
    if t.flip_horizontal:
        out = out[:, ::-1]
    return np.ascontiguousarray(np.rot90(out, t.rot_quarter_turns, axes=(0, 1)))


def random_geo(rng) -> GeoTransform:
    rot, fh, fv = int(rng.integers(4)), bool(rng.integers(2)), bool(rng.integers(2))
    return GeoTransform(rot, fh, fv)


def strong_augment(image, rng):
    """Draw a uniform GeoTransform and apply it; the transform is returned for label transport."""
    t = random_geo(rng)
    return apply_geo(image, t), t


def transport_label(label, t: GeoTransform):
    return apply_geo(label, t)
