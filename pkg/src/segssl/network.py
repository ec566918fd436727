"""Compact 2-D U-Net with analytic gradients and momentum SGD.

Layout for ``stage_channels = (8, 16, 32)``::

    enc0: conv3x3(in -> 8)            -> maxpool 2x2
    enc1: conv3x3(8 -> 16)            -> maxpool 2x2
    enc2: conv3x3(16 -> 32)                              (bottleneck)
    dec1: conv3x3(up(enc2) ++ enc1 -> 16)
    dec0: conv3x3(up(dec1) ++ enc0 -> 8)
    head: conv1x1(8 -> C) -> softmax over classes

Every convolution is 'same'-padded and followed by a leaky ReLU.  Arrays
are channel-last: images (N, H, W, C_in), probabilities (N, H, W, C).
Everything runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensorio import load_tensor, save_tensor

LEAK = 0.01


class NumericalError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class NetworkSpec:
    input_channels: int = 1
    num_classes: int = 3
    stage_channels: tuple[int, ...] = (8, 16, 32)

    def __post_init__(self):
        if self.input_channels < 1 or self.num_classes < 2 or len(self.stage_channels) < 1:
            raise ValueError(f"invalid network spec {self}")

    @property
    def depth(self) -> int:
        return len(self.stage_channels)

    def check_input(self, shape):
        n, h, w, c = shape
        k = 2 ** (self.depth - 1)
        if c != self.input_channels:
            raise ValueError(f"expected {self.input_channels} input channels, got {c}")
        if h % k or w % k or h == 0 or w == 0:
            raise ValueError(f"input size {h}x{w} must be a positive multiple of {k}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        ch = self.stage_channels
        shapes = {}
        cin = self.input_channels
        for i, cout in enumerate(ch):
            shapes[f"enc{i}.w"] = (3, 3, cin, cout)
            shapes[f"enc{i}.b"] = (cout,)
            cin = cout
        for i in reversed(range(self.depth - 1)):
            shapes[f"dec{i}.w"] = (3, 3, cin + ch[i], ch[i])
            shapes[f"dec{i}.b"] = (ch[i],)
            cin = ch[i]
        shapes["head.w"] = (cin, self.num_classes)
        shapes["head.b"] = (self.num_classes,)
        return shapes


def init_network(spec: NetworkSpec, seed: int) -> dict[str, np.ndarray]:
    """He-normal weights (std = sqrt(2 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return params


# ---------------------------------------------------------------------------
# layer primitives


def conv3x3(x, w, b):
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (N, H, W, C, 3, 3)
    return np.tensordot(cols, w, axes=([3, 4, 5], [2, 0, 1])) + b


def conv3x3_backward(x, w, dout):
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))
    dw = np.tensordot(cols, dout, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    db = dout.sum(axis=(0, 1, 2))
    dp = np.pad(dout, ((0, 0), (1, 1), (1, 1), (0, 0)))
    dcols = sliding_window_view(dp, (3, 3), axis=(1, 2))
    dx = np.tensordot(dcols, w[::-1, ::-1], axes=([3, 4, 5], [3, 0, 1]))
    return dx, dw, db


def leaky_relu(z):
    return np.where(z > 0, z, LEAK * z)


def leaky_relu_backward(z, dout):
    return np.where(z > 0, dout, LEAK * dout)


def maxpool2(x):
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], idx


def maxpool2_backward(idx, dout):
    n, h2, w2, c = dout.shape
    dwin = np.zeros((n, h2, w2, c, 4))
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    return dwin.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)


def upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dout):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# network


def _spec_from_params(params) -> NetworkSpec:
    depth = sum(1 for k in params if k.startswith("enc") and k.endswith(".w"))
    ch = tuple(params[f"enc{i}.w"].shape[-1] for i in range(depth))
    return NetworkSpec(params["enc0.w"].shape[2], params["head.w"].shape[1], ch)


def forward(params, images):
    """Return class probabilities and the cache needed by :func:`backward`.

    ``images`` is (N, H, W, C_in) or a single (H, W, C_in) image; the output
    rank follows the input.
    """
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    x = images[None] if single else images
    spec = _spec_from_params(params)
    spec.check_input(x.shape)

    cache = {"spec": spec, "single": single, "input_shape": x.shape}
    skips = []
    h = x
    for i in range(spec.depth):
        z = conv3x3(h, params[f"enc{i}.w"], params[f"enc{i}.b"])
        cache[f"enc{i}.in"], cache[f"enc{i}.z"] = h, z
        a = leaky_relu(z)
        if i < spec.depth - 1:
            skips.append(a)
            h, cache[f"pool{i}.idx"] = maxpool2(a)
        else:
            h = a
    for i in reversed(range(spec.depth - 1)):
        cat = np.concatenate([upsample2(h), skips[i]], axis=-1)
        z = conv3x3(cat, params[f"dec{i}.w"], params[f"dec{i}.b"])
        cache[f"dec{i}.in"], cache[f"dec{i}.z"] = cat, z
        h = leaky_relu(z)
    cache["head.in"] = h
    logits = h @ params["head.w"] + params["head.b"]
    probs = softmax(logits)
    cache["logits_shape"] = logits.shape
    return (probs[0] if single else probs), cache


def backward(params, cache, dlogits):
    """Gradients of a scalar loss w.r.t. every parameter, given dL/dlogits."""
    spec = cache["spec"]
    if spec != _spec_from_params(params):
        raise ValueError("cache was produced by a network with a different architecture")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if cache["single"]:
        dlogits = dlogits[None]
    if dlogits.shape != cache["logits_shape"]:
        raise ValueError(f"upstream gradient shape {dlogits.shape} != logits shape {cache['logits_shape']}")

    grads = {}
    hin = cache["head.in"]
    grads["head.w"] = np.tensordot(hin, dlogits, axes=([0, 1, 2], [0, 1, 2]))
    grads["head.b"] = dlogits.sum(axis=(0, 1, 2))
    dh = dlogits @ params["head.w"].T

    dskips = [None] * (spec.depth - 1)
    for i in range(spec.depth - 1):
        dz = leaky_relu_backward(cache[f"dec{i}.z"], dh)
        dcat, grads[f"dec{i}.w"], grads[f"dec{i}.b"] = conv3x3_backward(cache[f"dec{i}.in"], params[f"dec{i}.w"], dz)
        c_up = dcat.shape[-1] - spec.stage_channels[i]
        dskips[i] = dcat[..., c_up:]
        dh = upsample2_backward(dcat[..., :c_up])
    for i in reversed(range(spec.depth)):
        if i < spec.depth - 1:
            dh = maxpool2_backward(cache[f"pool{i}.idx"], dh) + dskips[i]
        dz = leaky_relu_backward(cache[f"enc{i}.z"], dh)
        dh, grads[f"enc{i}.w"], grads[f"enc{i}.b"] = conv3x3_backward(cache[f"enc{i}.in"], params[f"enc{i}.w"], dz)
    return {k: grads[k] for k in params}


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimState:
    lr0: float = 0.005
    wd: float = 0.003
    momentum: float = 0.9
    max_epochs: float = 300
    buffers: dict = field(default_factory=dict)

    def lr(self, epoch: int) -> float:
        """Polynomial decay lr0 * (1 - epoch / max_epochs) ** 0.9; epoch counts from 0."""
        frac = 0.0 if math.isinf(self.max_epochs) else epoch / self.max_epochs
        return self.lr0 * max(0.0, 1.0 - frac) ** 0.9


def sgd_step(params, grads, state: OptimState, epoch: int):
    """Classical momentum with coupled L2: v = mu*v + (g + wd*w); w -= lr*v.  Updates in place."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    lr = state.lr(epoch)
    for name, w in params.items():
        v = state.buffers.get(name)
        step = grads[name] + state.wd * w
        v = step if v is None else state.momentum * v + step
        state.buffers[name] = v
        w -= lr * v
    return params


# ---------------------------------------------------------------------------
# checkpoints: one tensor file per parameter plus a manifest


def save_checkpoint(params, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = _spec_from_params(params)
    lines = [
        f"#spec\tinput_channels={spec.input_channels}\tnum_classes={spec.num_classes}\t"
        f"stage_channels={','.join(map(str, spec.stage_channels))}"
    ]
    for name, w in params.items():
        fname = f"{name}.segt"
        save_tensor(np.asarray(w, dtype=np.float64), directory / fname)
        lines.append(f"{name}\t{fname}")
    (directory / "params.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = directory / "params.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    params = {}
    for line in manifest.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        name, fname = line.split("\t")
        params[name] = load_tensor(directory / fname)
    expected = _spec_from_params(params).param_shapes()
    if {k: v.shape for k, v in params.items()} != expected:
        raise ValueError(f"checkpoint at {directory} has inconsistent parameter shapes")
    return params
