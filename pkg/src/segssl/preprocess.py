"""Z-score normalization planned on the labeled pool and shared by every split."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class PreprocessPlan:
    intensity_mean: float
    intensity_std: float
    target_height: int
    target_width: int

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in self.__dict__.items())

    @classmethod
    def from_text(cls, text: str) -> "PreprocessPlan":
        vals = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        return cls(
            float(vals["intensity_mean"]),
            float(vals["intensity_std"]),
            int(vals["target_height"]),
            int(vals["target_width"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def compute_plan(labeled) -> PreprocessPlan:
    """Pool mean and (population) std over every pixel of the labeled images."""
    labeled = list(labeled)
    if not labeled:
        raise ValueError("cannot plan preprocessing from an empty labeled set")
    shapes = {s.image.shape[:2] for s in labeled}
    if len(shapes) != 1:
        raise ValueError(f"labeled images have differing sizes {sorted(shapes)}")
    pixels = np.concatenate([s.image.astype(np.float64).ravel() for s in labeled])
    mean = float(pixels.mean())
    std = max(float(pixels.std()), STD_FLOOR)
    h, w = shapes.pop()
    return PreprocessPlan(mean, std, h, w)


def normalize_image(plan: PreprocessPlan, image) -> np.ndarray:
    if image.shape[:2] != (plan.target_height, plan.target_width):
        raise ValueError(
            f"image size {image.shape[:2]} does not match plan size "
            f"{(plan.target_height, plan.target_width)}"
        )
    return (image.astype(np.float64) - plan.intensity_mean) / plan.intensity_std


def apply_plan(plan: PreprocessPlan, sample):
    return replace(sample, image=normalize_image(plan, sample.image))
