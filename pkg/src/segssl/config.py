"""``key=value`` experiment configuration files.

One entry per line, ``#`` starts a comment, blank lines are ignored.
Unknown or repeated keys are rejected; missing keys keep their defaults.
Tuple values are comma separated (``stage_channels = 8,16,32``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .augment import WeakAugConfig
from .data import GenConfig
from .engine import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # training schedule and optimiser
    max_epochs: int = 300
    warmup_epochs: int = 5
    filter_interval: int = 100
    drop_fraction: float = 0.15
    batch_size: int = 8
    iterations_per_epoch: int = 10
    lr0: float = 0.005
    wd: float = 0.003
    momentum: float = 0.9
    seed: int = 0
    mode: str = "SSL_AL"
    stage_channels: tuple[int, ...] = (8, 16, 32)
    # synthetic data
    count: int = 200
    height: int = 32
    width: int = 32
    num_classes: int = 3
    noise_sigma: float = 0.5
    shape_kinds: tuple[str, ...] = ("ellipse", "rectangle")
    background: float = 0.0
    intensity_step: float = 1.0
    size_range: tuple[float, ...] = (0.06, 0.16)
    data_seed: int = 0
    # split
    labeled_ratio: float = 0.05
    val_count: int = 20
    test_count: int = 40
    split_seed: int = 0
    # weak augmentation
    aug_scale_range: tuple[float, ...] = (0.9, 1.1)
    aug_contrast_range: tuple[float, ...] = (0.85, 1.15)
    aug_brightness_shift_max: float = 0.1
    aug_noise_sigma_max: float = 0.1
    aug_shift_max: int = 2
    # paths
    data_dir: str = "data"
    out_dir: str = "runs"

    def gen_config(self) -> GenConfig:
        return GenConfig(
            self.count,
            self.height,
            self.width,
            self.num_classes,
            self.noise_sigma,
            tuple(self.shape_kinds),
            self.background,
            self.intensity_step,
            tuple(self.size_range),
        )

    def weak_aug(self) -> WeakAugConfig:
        return WeakAugConfig(
            tuple(self.aug_scale_range),
            self.aug_noise_sigma_max,
            self.aug_brightness_shift_max,
            tuple(self.aug_contrast_range),
            self.aug_shift_max,
        )

    def train_config(self, mode=None, seed=None) -> TrainConfig:
        return TrainConfig(
            max_epochs=self.max_epochs,
            warmup_epochs=self.warmup_epochs,
            filter_interval=self.filter_interval,
            drop_fraction=self.drop_fraction,
            batch_size=self.batch_size,
            iterations_per_epoch=self.iterations_per_epoch,
            lr0=self.lr0,
            wd=self.wd,
            momentum=self.momentum,
            seed=self.seed if seed is None else seed,
            mode=self.mode if mode is None else mode,
            stage_channels=tuple(self.stage_channels),
            weak_aug=self.weak_aug(),
        )

    def validate(self) -> None:
        """Build every derived config once so that bad values surface as ConfigError."""
        try:
            self.gen_config()
            self.train_config()
            if not 0 < self.labeled_ratio <= 1:
                raise ValueError("labeled_ratio must be in (0, 1]")
            if self.val_count < 0 or self.test_count < 0:
                raise ValueError("val_count and test_count must be >= 0")
            if len(self.size_range) != 2 or len(self.aug_scale_range) != 2 or len(self.aug_contrast_range) != 2:
                raise ValueError("range values need exactly two entries")
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _parse_value(name, raw):
    default = _FIELDS[name].default
    if isinstance(default, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        kind = type(default[0])
        return tuple(kind(x) for x in items)
    return type(default)(raw)


def parse_config(text: str, source="<config>") -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value {raw!r} for {key}") from None
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    out = []
    for k, v in dataclasses.asdict(cfg).items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        out.append(f"{k}={v}")
    return "\n".join(out) + "\n"
