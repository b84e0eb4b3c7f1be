"""Toy frozen encoder and linear segmentation head.

Image -> non-overlapping ``p x p`` patch embedding -> ``N`` residual encoder
layers on a ``d x H x W`` grid -> per-cell linear head -> bilinear upsampling
back to image resolution. An adapter slot sits after every encoder layer.

Encoder layer: ``x + act(dwconv3x3(mix(norm(x))))`` where ``norm`` is a
per-sample, per-channel spatial standardisation with learned scale/shift and
``mix`` an affine map over channels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import adapter as A
from . import tensor as T
from .optim import OptimizerState, adamw_step
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)

NORM_EPS = 1e-5


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class BackboneConfig:
    channels: int = 3
    patch: int = 4
    d: int = 32
    layers: int = 4
    classes: int = 5
    image_size: int = 64

    @property
    def grid(self) -> int:
        return self.image_size // self.patch


@dataclass
class SegmentationModel:
    config: BackboneConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def frozen(self) -> "SegmentationModel":
        return SegmentationModel(self.config, {k: v.detach() for k, v in self.params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_state(cls, config: BackboneConfig, state: Mapping[str, np.ndarray]) -> "SegmentationModel":
        return cls(config, {k: Tensor(v) for k, v in state.items()})


def init_model(cfg: BackboneConfig, seed: int) -> SegmentationModel:
    """Random initialisation (mean-0 normal, std 0.02 unless noted)."""
    rng = np.random.default_rng(seed)
    d = cfg.d
    fan_in = cfg.channels * cfg.patch * cfg.patch
    p: dict[str, np.ndarray] = {
        "backbone.embed.w": rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, d)),
        "backbone.embed.b": np.zeros(d),
    }
    for k in range(cfg.layers):
        pre = f"backbone.layer{k}."
        p[pre + "norm.scale"] = np.ones(d)
        p[pre + "norm.shift"] = np.zeros(d)
        p[pre + "mix.w"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
        p[pre + "mix.b"] = np.zeros(d)
        p[pre + "conv.k"] = rng.normal(0.0, 1.0 / 3.0, (d, 3, 3))
    p["head.w"] = rng.normal(0.0, 0.02, (d, cfg.classes))
    p["head.b"] = np.zeros(cfg.classes)
    return SegmentationModel(cfg, {k: Tensor(v) for k, v in p.items()})


def check_image(cfg: BackboneConfig, shape: tuple[int, ...]) -> None:
    *_, c, h, w = shape
    if c != cfg.channels:
        raise A.ConfigError(f"model expects {cfg.channels} image channels, got {c}")
    if h % cfg.patch or w % cfg.patch:
        raise A.ConfigError(f"image {h}x{w} is not divisible by patch size {cfg.patch}")


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """``[B, C, Hi, Wi]`` -> ``[B, Hi/p, Wi/p, C*p*p]``."""
    B, C, Hi, Wi = images.shape
    x = images.reshape(B, C, Hi // p, p, Wi // p, p)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(B, Hi // p, Wi // p, C * p * p)


def upsample_matrix(n: int, factor: int) -> np.ndarray:
    """Linear interpolation from ``n`` cells to ``n * factor`` pixels.

    Half-pixel centres, edge values clamped.
    """
    out = np.zeros((n * factor, n))
    for i in range(n * factor):
        src = min(max((i + 0.5) / factor - 0.5, 0.0), n - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        out[i, lo] += 1.0 - frac
        out[i, hi] += frac
    return out


def channel_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    mu = T.mean(x, axis=(-2, -1), keepdims=True)
    centred = T.sub(x, mu)
    var = T.mean(T.mul(centred, centred), axis=(-2, -1), keepdims=True)
    normed = T.div(centred, T.sqrt(T.add(var, NORM_EPS)))
    return T.add(T.mul(normed, T.reshape(scale, (-1, 1, 1))), T.reshape(shift, (-1, 1, 1)))


def encoder_layer(x: Tensor, params: Mapping[str, Tensor], k: int) -> Tensor:
    pre = f"backbone.layer{k}."
    H, W = x.shape[-2:]
    h = channel_norm(x, params[pre + "norm.scale"], params[pre + "norm.shift"])
    h = A.from_rows(T.affine(A.to_rows(h), params[pre + "mix.w"], params[pre + "mix.b"]), H, W)
    h = T.depthwise_conv3x3(h, params[pre + "conv.k"])
    return T.add(x, T.nonlinearity(h))


def embed(model: SegmentationModel, images: np.ndarray) -> Tensor:
    cfg = model.config
    patches = patchify(images, cfg.patch)
    B, H, W, _ = patches.shape
    z = T.affine(Tensor(patches), model.params["backbone.embed.w"], model.params["backbone.embed.b"])
    return T.transpose(z, (0, 3, 1, 2))


def head(model: SegmentationModel, x: Tensor) -> Tensor:
    """Per-cell class logits upsampled to image resolution: ``[B, K, Hi, Wi]``."""
    H, W = x.shape[-2:]
    p = model.config.patch
    cells = T.affine(A.to_rows(x), model.params["head.w"], model.params["head.b"])
    cells = A.from_rows(cells, H, W)
    return T.bilinear_map(cells, upsample_matrix(H, p), upsample_matrix(W, p))


def forward_batch(
    model: SegmentationModel,
    images: np.ndarray,
    cfg: A.AdapterConfig | None = None,
    adapters: Mapping[str, Tensor] | None = None,
) -> Tensor:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise A.ConfigError(f"expected a [B, C, H, W] batch, got shape {images.shape}")
    check_image(model.config, images.shape)
    x = embed(model, images)
    for k in range(model.config.layers):
        x = encoder_layer(x, model.params, k)
        if cfg is not None and adapters is not None:
            x = A.adapt_layer(x, adapters, k, cfg)
    return head(model, x)


def forward(model, image, cfg=None, adapters=None) -> Tensor:
    """Logits ``[K, Hi, Wi]`` for one ``[C, Hi, Wi]`` image."""
    image = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if image.ndim != 3:
        raise A.ConfigError(f"expected a [C, H, W] image, got shape {image.shape}")
    logits = forward_batch(model, image[None], cfg, adapters)
    return T.reshape(logits, logits.shape[1:])


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    """Endless stream of index batches from successive shuffled epochs."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i : i + batch_size]


def pretrain(
    model: SegmentationModel,
    samples,
    steps: int,
    lr: float = 3e-3,
    seed: int = 0,
    batch_size: int = 4,
    trace: list | None = None,
) -> SegmentationModel:
    """Full-parameter training on ``samples``, then freeze everything.

    Deterministic given ``seed``. Appends ``(step, loss)`` to ``trace`` if given.
    """
    from .train import cross_entropy

    params = {k: v.trainable() for k, v in model.params.items()}
    if steps <= 0:
        return SegmentationModel(model.config, params).frozen()
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.labels for s in samples])
    state = OptimizerState(lr=lr)
    rng = np.random.default_rng(seed)
    stream = batches(len(samples), min(batch_size, len(samples)), rng)
    names = list(params)
    for step in range(steps):
        idx = next(stream)
        current = SegmentationModel(model.config, params)
        with GradTape() as tape:
            loss = cross_entropy(forward_batch(current, images[idx]), labels[idx])
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"pretraining loss became {value} at step {step}", current.frozen())
        if trace is not None:
            trace.append((step, value))
        if step % 100 == 0:
            log.info("pretrain step %d loss %.4f", step, value)
        grads = tape.gradient(loss, [params[n] for n in names])
        params = adamw_step(params, dict(zip(names, grads)), state)
    return SegmentationModel(model.config, params).frozen()
