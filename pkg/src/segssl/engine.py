"""Losses, pseudo-labelling, entropy filtering and the semi-supervised training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import augment
from .augment import WeakAugConfig
from .data import DatasetSplit
from .metrics import mean_dice
from .network import NetworkSpec, NumericalError, OptimState, backward, forward, init_network, sgd_step
from .preprocess import PreprocessPlan, compute_plan, normalize_image

log = logging.getLogger(__name__)

MODES = ("SL", "SSL", "SSL_AL")
DICE_EPS = 1e-5
LOG_CLAMP = 1e-12


# ---------------------------------------------------------------------------
# pseudo-labels and uncertainty


def make_pseudo_label(prob) -> np.ndarray:
    """Per-pixel argmax, lowest class index on ties, no confidence threshold."""
    return np.asarray(prob).argmax(axis=-1).astype(np.uint8)


def pixel_entropy(prob) -> np.ndarray:
    p = np.asarray(prob, dtype=np.float64)
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -plogp.sum(axis=-1)


def image_entropy(prob) -> float:
    """Mean per-pixel Shannon entropy in nats, within [0, ln C]."""
    prob = np.asarray(prob)
    h = float(pixel_entropy(prob).mean())
    return min(max(h, 0.0), math.log(prob.shape[-1]))


@dataclass(frozen=True)
class UncertaintyScore:
    sample_id: str
    score: float


def drop_count(drop_fraction: float, n: int) -> int:
    return math.floor(drop_fraction * n + 1e-9)


def filter_unlabeled(scores, drop_fraction: float) -> set[str]:
    """Drop the floor(n * drop_fraction) least uncertain samples.

    Ties in score are broken by sample id, so the lexicographically smaller
    id is dropped first.
    """
    if not 0 <= drop_fraction < 1:
        raise ValueError("drop_fraction must be in [0, 1)")
    ranked = sorted(scores, key=lambda s: (s.score, s.sample_id))
    k = drop_count(drop_fraction, len(ranked))
    return {s.sample_id for s in ranked[k:]}


# ---------------------------------------------------------------------------
# losses


def _check_pair(p, y):
    if p.shape[:-1] != y.shape:
        raise ValueError(f"prediction shape {p.shape[:-1]} != label shape {y.shape}")


def cross_entropy_loss(p, y):
    """Mean pixel cross-entropy and its gradient w.r.t. the pre-softmax logits."""
    p = np.asarray(p, dtype=np.float64)
    _check_pair(p, y)
    onehot = np.eye(p.shape[-1])[y]
    n = y.size
    loss = -np.log(np.maximum(np.take_along_axis(p, y[..., None].astype(np.intp), axis=-1), LOG_CLAMP)).sum() / n
    return float(loss), (p - onehot) / n


def soft_dice_loss(p, y):
    """1 - mean foreground soft Dice, and its gradient w.r.t. the probabilities."""
    p = np.asarray(p, dtype=np.float64)
    _check_pair(p, y)
    c = p.shape[-1]
    onehot = np.eye(c)[y]
    axes = tuple(range(p.ndim - 1))
    inter = (p * onehot).sum(axis=axes)[1:]
    denom = p.sum(axis=axes)[1:] + onehot.sum(axis=axes)[1:] + DICE_EPS
    d = (2 * inter + DICE_EPS) / denom
    grad = np.zeros_like(p)
    grad[..., 1:] = -(2 * onehot[..., 1:] * denom - (2 * inter + DICE_EPS)) / denom**2 / (c - 1)
    return float(1.0 - d.mean()), grad


def prob_grad_to_logits(p, g):
    """Chain a gradient w.r.t. softmax outputs back to the logits."""
    return p * (g - (p * g).sum(axis=-1, keepdims=True))


def sample_loss(p, y):
    """Cross-entropy + soft Dice for one sample; gradient w.r.t. logits."""
    ce, g_ce = cross_entropy_loss(p, y)
    dl, g_dl = soft_dice_loss(p, y)
    return ce + dl, g_ce + prob_grad_to_logits(p, g_dl)


class LossResult(NamedTuple):
    loss: float
    grad: np.ndarray  # (N, H, W, C), w.r.t. logits
    per_sample: list[float]


def unified_loss(preds, targets) -> LossResult:
    """One loss over the joint batch of labeled and pseudo-labeled pairs.

    Every sample is weighted equally: the mean of per-sample (CE + Dice).
    """
    if len(preds) != len(targets):
        raise ValueError("predictions and targets must have the same length")
    if len(preds) == 0:
        raise ValueError("cannot compute a loss on an empty batch")
    n = len(preds)
    per_sample, grads = [], []
    for p, y in zip(preds, targets):
        loss, g = sample_loss(p, y)
        per_sample.append(loss)
        grads.append(g / n)
    return LossResult(float(np.mean(per_sample)), np.stack(grads), per_sample)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
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
    weak_aug: WeakAugConfig = field(default_factory=WeakAugConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        # warmup == max_epochs is allowed: a run that never leaves warm-up
        if not 0 <= self.warmup_epochs <= self.max_epochs:
            raise ValueError("need 0 <= warmup_epochs <= max_epochs")
        if not 0 <= self.drop_fraction < 1:
            raise ValueError("drop_fraction must be in [0, 1)")
        if self.filter_interval < 1 or self.batch_size < 1 or self.iterations_per_epoch < 1:
            raise ValueError("filter_interval, batch_size and iterations_per_epoch must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    supervised_loss: float
    unlabeled_loss_component: float
    total_loss: float
    active_unlabeled: int
    val_dice: float


@dataclass
class FilterEvent:
    epoch: int
    dropped: list[UncertaintyScore]
    retained: list[UncertaintyScore]


@dataclass
class TrainResult:
    params: dict
    plan: PreprocessPlan
    history: list[EpochRecord]
    filter_events: list[FilterEvent]
    max_softmax_deviation: float


HISTORY_HEADER = "epoch,supervised_loss,unlabeled_loss_component,total_loss,active_unlabeled,val_dice"


def history_csv(history) -> str:
    rows = [HISTORY_HEADER]
    for r in history:
        rows.append(
            f"{r.epoch},{r.supervised_loss!r},{r.unlabeled_loss_component!r},{r.total_loss!r},"
            f"{r.active_unlabeled},{r.val_dice!r}"
        )
    return "\n".join(rows) + "\n"


def filter_log(events) -> str:
    lines = ["epoch,sample_id,score"]
    for ev in events:
        lines.extend(f"{ev.epoch},{s.sample_id},{s.score!r}" for s in ev.dropped)
    return "\n".join(lines) + "\n"


def _batched_forward(params, images, chunk=32):
    out = [forward(params, images[i : i + chunk])[0] for i in range(0, len(images), chunk)]
    return np.concatenate(out) if out else np.zeros((0,))


def score_unlabeled(params, ids, images) -> list[UncertaintyScore]:
    """Entropy of the un-augmented unlabeled images under a frozen parameter snapshot."""
    probs = _batched_forward(params, images)
    return [UncertaintyScore(i, image_entropy(p)) for i, p in zip(ids, probs)]


def _softmax_deviation(probs) -> float:
    return float(np.max(np.abs(probs.sum(axis=-1) - 1.0))) if probs.size else 0.0


def pseudo_label_batch(params, unlabeled_images, aug_cfg, rng):
    """Weak view -> argmax pseudo-label -> strong view with the label carried along.

    The weak-view forward pass is used only through its argmax, so no
    gradient flows through pseudo-label generation.
    """
    weak = np.stack([augment.weak_augment(x, None, aug_cfg, rng)[0] for x in unlabeled_images])
    probs_w, _ = forward(params, weak)
    strong, targets = [], []
    for xw, pw in zip(weak, probs_w):
        xs, t = augment.strong_augment(xw, rng)
        strong.append(xs)
        targets.append(augment.transport_label(make_pseudo_label(pw), t))
    return np.stack(strong), targets, probs_w


def _choose(rng, n, k):
    return rng.choice(n, size=k, replace=k > n)


def train(config: TrainConfig, split: DatasetSplit, on_epoch=None) -> TrainResult:
    """Warm-up, weak-to-strong pseudo-label training and periodic entropy filtering.

    Epochs count from 1.  Epochs ``<= warmup_epochs`` (and every epoch in SL
    mode) train on labeled batches only.  Afterwards each batch holds
    ceil(B/2) labeled and floor(B/2) unlabeled samples.  In SSL_AL mode,
    after the training of every epoch that is a multiple of
    ``filter_interval`` and past warm-up, the active unlabeled pool is scored
    and its least uncertain ``drop_fraction`` is removed for good.
    """
    if not split.labeled:
        raise ValueError("training needs at least one labeled sample")
    plan = compute_plan(split.labeled)
    lab_x = np.stack([normalize_image(plan, s.image) for s in split.labeled])
    lab_y = [s.label for s in split.labeled]
    val_x = np.stack([normalize_image(plan, s.image) for s in split.validation]) if split.validation else None
    val_y = [s.label for s in split.validation]
    use_unlabeled = config.mode != "SL"
    # the trainer only ever sees unlabeled images, never their hidden labels
    unl_ids = [s.id for s in split.unlabeled] if use_unlabeled else []
    unl_x = {s.id: normalize_image(plan, s.image) for s in split.unlabeled} if use_unlabeled else {}

    spec = NetworkSpec(lab_x.shape[-1], split.num_classes, tuple(config.stage_channels))
    ss_init, ss_lab, ss_aug, ss_unl = np.random.SeedSequence(config.seed).spawn(4)
    params = init_network(spec, int(ss_init.generate_state(1)[0]))
    rng_lab, rng_aug, rng_unl = (np.random.default_rng(s) for s in (ss_lab, ss_aug, ss_unl))
    opt = OptimState(config.lr0, config.wd, config.momentum, config.max_epochs)

    active = list(unl_ids)
    history, events = [], []
    max_dev = 0.0
    bs = config.batch_size
    for epoch in range(1, config.max_epochs + 1):
        semi = use_unlabeled and epoch > config.warmup_epochs and bool(active)
        sup_sum = unl_sum = tot_sum = 0.0
        for it in range(config.iterations_per_epoch):
            n_lab = math.ceil(bs / 2) if semi else bs
            idx = _choose(rng_lab, len(lab_x), n_lab)
            xs, ys = [], []
            for i in idx:
                x, y = augment.weak_augment(lab_x[i], lab_y[i], config.weak_aug, rng_aug)
                xs.append(x)
                ys.append(y)
            if semi:
                pick = _choose(rng_unl, len(active), bs // 2)
                strong, targets, probs_w = pseudo_label_batch(
                    params, [unl_x[active[j]] for j in pick], config.weak_aug, rng_unl
                )
                max_dev = max(max_dev, _softmax_deviation(probs_w))
                xs.extend(strong)
                ys.extend(targets)
            probs, cache = forward(params, np.stack(xs))
            max_dev = max(max_dev, _softmax_deviation(probs))
            res = unified_loss(probs, ys)
            if not math.isfinite(res.loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {it}")
            grads = backward(params, cache, res.grad)
            try:
                sgd_step(params, grads, opt, epoch - 1)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {it}: {exc}") from exc
            n = len(res.per_sample)
            sup_sum += sum(res.per_sample[:n_lab]) / n
            unl_sum += sum(res.per_sample[n_lab:]) / n
            tot_sum += res.loss

        if (
            config.mode == "SSL_AL"
            and epoch % config.filter_interval == 0
            and epoch > config.warmup_epochs
            and active
        ):
            scores = score_unlabeled(params, active, np.stack([unl_x[i] for i in active]))
            keep = filter_unlabeled(scores, config.drop_fraction)
            dropped = sorted((s for s in scores if s.sample_id not in keep), key=lambda s: (s.score, s.sample_id))
            events.append(FilterEvent(epoch, dropped, [s for s in scores if s.sample_id in keep]))
            active = [i for i in active if i in keep]
            log.info("epoch %d: dropped %d unlabeled samples, %d remain", epoch, len(dropped), len(active))

        val = math.nan
        if val_x is not None:
            vp = _batched_forward(params, val_x)
            max_dev = max(max_dev, _softmax_deviation(vp))
            val = float(np.mean([mean_dice(make_pseudo_label(p), y, split.num_classes) for p, y in zip(vp, val_y)]))
        k = config.iterations_per_epoch
        # unlabeled samples only count once they can be drawn, i.e. after warm-up
        n_active = len(active) if epoch > config.warmup_epochs else 0
        rec = EpochRecord(epoch, sup_sum / k, unl_sum / k, tot_sum / k, n_active, val)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(params, plan, history, events, max_dev)


def predict(params, plan: PreprocessPlan, images) -> list[np.ndarray]:
    x = np.stack([normalize_image(plan, im) for im in images])
    return [make_pseudo_label(p) for p in _batched_forward(params, x)]
