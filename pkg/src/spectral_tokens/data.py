"""Synthetic multi-domain segmentation scenes.

Scenes are Voronoi partitions whose cells carry a class label; each class is
painted with its own base colour and an oriented grating texture. Domains
differ only by *style*: a radial gain on the amplitude spectrum of every
channel (phase untouched) followed by pointwise contrast, brightness and
noise. Labels never change.
"""

from __future__ import annotations

import colorsys
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, spectral
from .adapter import ConfigError

DATASET_FORMAT = "spectral-tokens-dataset"
DATASET_VERSION = 1

# normalised spectral radius boundaries between low/mid and mid/high bands
LOW_EDGE = 0.125
HIGH_EDGE = 0.5


@dataclass
class DomainSample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    labels: np.ndarray  # [H, W] uint8
    domain_id: int = 0
    seed: int = 0


@dataclass(frozen=True)
class StyleSpec:
    domain_id: int = 0
    band_gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    brightness: tuple[float, float, float] = (0.0, 0.0, 0.0)
    contrast: float = 1.0
    noise: float = 0.0

    @property
    def is_identity(self) -> bool:
        return (
            all(g == 1.0 for g in self.band_gains)
            and all(b == 0.0 for b in self.brightness)
            and self.contrast == 1.0
            and self.noise == 0.0
        )

    def to_text(self) -> str:
        fmt = lambda v: ",".join(repr(float(x)) for x in v)  # noqa: E731
        return (
            f"domain_id={self.domain_id} band_gains={fmt(self.band_gains)} "
            f"brightness={fmt(self.brightness)} contrast={float(self.contrast)!r} "
            f"noise={float(self.noise)!r}"
        )

    @classmethod
    def from_text(cls, text: str) -> "StyleSpec":
        kv = dict(item.split("=", 1) for item in text.split())
        vec = lambda s: tuple(float(x) for x in s.split(","))  # noqa: E731
        return cls(
            domain_id=int(kv["domain_id"]),
            band_gains=vec(kv["band_gains"]),
            brightness=vec(kv["brightness"]),
            contrast=float(kv["contrast"]),
            noise=float(kv["noise"]),
        )


# --------------------------------------------------------------------------
# scenes


def palette(K: int) -> np.ndarray:
    """``K`` well-separated base colours, ``[K, 3]``."""
    return np.array(
        [colorsys.hsv_to_rgb(k / K, 0.45, 0.55 + 0.2 * (k % 2)) for k in range(K)]
    )


def texture_params(K: int) -> list[tuple[float, float]]:
    """(cycles per image width, orientation) of each class's grating."""
    return [(4.0 + 2.5 * k, math.pi * k / K) for k in range(K)]


def voronoi_labels(sites: np.ndarray, site_class: np.ndarray, H: int, W: int) -> np.ndarray:
    """Class of the nearest site for every pixel centre; ties go to the lower site index."""
    yy, xx = np.mgrid[0:H, 0:W]
    pix = np.stack([yy + 0.5, xx + 0.5], axis=-1).reshape(-1, 1, 2)
    d2 = ((pix - sites[None, :, :]) ** 2).sum(axis=-1)
    nearest = np.argmin(d2, axis=1)
    return site_class[nearest].reshape(H, W).astype(np.uint8)


def generate_scene(seed: int, K: int = 5, H: int = 64, W: int = 64, n_sites: int | None = None) -> DomainSample:
    """Deterministic labelled scene for ``seed``."""
    if K < 2:
        raise ConfigError(f"need at least 2 classes, got {K}")
    rng = np.random.default_rng([seed, K, H, W])
    n = int(n_sites) if n_sites is not None else int(rng.integers(K, 2 * K + 1))
    sites = rng.uniform(0.0, 1.0, (n, 2)) * np.array([H, W])
    if n >= K:
        site_class = np.concatenate([rng.permutation(K), rng.integers(0, K, n - K)])
        site_class = site_class[rng.permutation(n)]
    else:
        site_class = rng.permutation(K)[:n]
    labels = voronoi_labels(sites, site_class, H, W)

    colors = np.clip(palette(K) + rng.normal(0.0, 0.12, (K, 3)), 0.0, 1.0)
    image = colors[labels].transpose(2, 0, 1).copy()
    yy, xx = np.mgrid[0:H, 0:W] / np.array([H, W])[:, None, None]
    for k, (freq, theta) in enumerate(texture_params(K)):
        mask = labels == k
        if not mask.any():
            continue
        offset = rng.uniform(0.0, 2.0 * math.pi)
        wave = np.sin(2.0 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + offset)
        image += 0.12 * wave[None] * mask[None]
    # smooth shading: low-pass noise field shared by all channels
    shade = rng.normal(0.0, 1.0, (H, W))
    shade = _lowpass(shade, 0.1)
    shade = 0.06 * shade / (np.abs(shade).max() + 1e-12)
    image = np.clip(image + shade[None], 0.0, 1.0)
    return DomainSample(image=image, labels=labels, domain_id=0, seed=seed)


def _lowpass(field_: np.ndarray, cutoff: float) -> np.ndarray:
    radius = radial_frequency(*field_.shape)
    pair = spectral.decompose(field_)
    amp = pair.amplitude.data * (radius <= cutoff)
    return spectral.compose(spectral.SpectralPair(spectral.Tensor(amp), pair.phase), strict=False).data


# --------------------------------------------------------------------------
# styles


def radial_frequency(H: int, W: int) -> np.ndarray:
    """Normalised radius of each DFT bin: 1.0 at the Nyquist frequency on either axis."""
    fu = np.fft.fftfreq(H) * 2.0
    fv = np.fft.fftfreq(W) * 2.0
    return np.sqrt(fu[:, None] ** 2 + fv[None, :] ** 2)


def radial_gain(spec: StyleSpec, H: int, W: int) -> np.ndarray:
    r = radial_frequency(H, W)
    low, mid, high = spec.band_gains
    return np.where(r <= LOW_EDGE, low, np.where(r <= HIGH_EDGE, mid, high))


def restyle_amplitude(image: np.ndarray, spec: StyleSpec) -> np.ndarray:
    """Multiply every channel's amplitude spectrum by the radial gain; keep phase."""
    C, H, W = image.shape
    pair = spectral.decompose(image)
    amp = pair.amplitude.data * radial_gain(spec, H, W)
    out = spectral.compose(spectral.SpectralPair(spectral.Tensor(amp), pair.phase))
    return out.data.copy()


def apply_style(sample: DomainSample, spec: StyleSpec, clamp: bool = True) -> DomainSample:
    """Restyle ``sample``; labels untouched, noise seeded by (sample seed, domain)."""
    img = sample.image
    if spec.is_identity:
        return DomainSample(img.copy(), sample.labels.copy(), spec.domain_id, sample.seed)
    img = restyle_amplitude(img, spec) if any(g != 1.0 for g in spec.band_gains) else img.copy()
    if spec.contrast != 1.0:
        mu = img.mean(axis=(1, 2), keepdims=True)
        img = (img - mu) * spec.contrast + mu
    img = img + np.asarray(spec.brightness)[:, None, None]
    if spec.noise > 0.0:
        rng = np.random.default_rng([sample.seed, spec.domain_id, 7])
        img = img + rng.normal(0.0, spec.noise, img.shape)
    if clamp:
        img = np.clip(img, 0.0, 1.0)
    return DomainSample(img, sample.labels.copy(), spec.domain_id, sample.seed)


SOURCE_STYLE = StyleSpec(1, (1.0, 1.2, 1.2), (0.02, 0.0, -0.02), 1.0, 0.01)
TARGET_STYLES = (
    StyleSpec(2, (0.85, 1.6, 2.0), (-0.05, 0.04, 0.06), 0.85, 0.02),
    StyleSpec(3, (0.7, 2.2, 3.0), (0.08, -0.06, -0.04), 0.7, 0.03),
    StyleSpec(4, (0.55, 2.8, 4.0), (-0.1, 0.1, 0.08), 0.6, 0.04),
)


def mild_style(rng: np.random.Generator, domain_id: int = 0) -> StyleSpec:
    return StyleSpec(
        domain_id,
        tuple(float(g) for g in rng.uniform(0.85, 1.15, 3)),
        tuple(float(b) for b in rng.uniform(-0.05, 0.05, 3)),
        float(rng.uniform(0.9, 1.1)),
        float(rng.uniform(0.0, 0.02)),
    )


# --------------------------------------------------------------------------
# datasets


@dataclass
class DataConfig:
    seed: int = 0
    classes: int = 5
    image_size: int = 64
    n_pretrain: int = 256
    n_source: int = 128
    n_target: int = 64
    pretrain_seed_start: int = 0
    source_seed_start: int = 100_000
    target_seed_start: int = 200_000
    source_style: StyleSpec = SOURCE_STYLE
    target_styles: tuple[StyleSpec, ...] = TARGET_STYLES

    def seed_ranges(self) -> dict[str, range]:
        out = {
            "pretrain": range(self.pretrain_seed_start, self.pretrain_seed_start + self.n_pretrain),
            "source": range(self.source_seed_start, self.source_seed_start + self.n_source),
        }
        for i in range(len(self.target_styles)):
            start = self.target_seed_start + i * self.n_target
            out[f"target{i + 1}"] = range(start, start + self.n_target)
        return out


@dataclass
class Datasets:
    config: DataConfig
    pretrain: list[DomainSample] = field(default_factory=list)
    source: list[DomainSample] = field(default_factory=list)
    targets: list[list[DomainSample]] = field(default_factory=list)

    def splits(self) -> dict[str, list[DomainSample]]:
        out = {"pretrain": self.pretrain, "source": self.source}
        for i, t in enumerate(self.targets):
            out[f"target{i + 1}"] = t
        return out


def check_disjoint(ranges: dict[str, range]) -> None:
    items = sorted(ranges.items(), key=lambda kv: kv[1].start)
    for (a, ra), (b, rb) in zip(items, items[1:]):
        if len(ra) and len(rb) and rb.start < ra.stop:
            raise ConfigError(f"seed ranges of splits {a!r} and {b!r} overlap")


def build_datasets(cfg: DataConfig) -> Datasets:
    ranges = cfg.seed_ranges()
    check_disjoint(ranges)
    specs = [cfg.source_style, *cfg.target_styles]
    if len(set(specs)) != len(specs):
        raise ConfigError("source and target styles must be pairwise distinct")
    K, S = cfg.classes, cfg.image_size

    def scene(s: int) -> DomainSample:
        return generate_scene(cfg.seed * 1_000_003 + s, K, S, S)

    out = Datasets(cfg)
    for s in ranges["pretrain"]:
        style = mild_style(np.random.default_rng([cfg.seed, s, 11]), domain_id=0)
        out.pretrain.append(apply_style(scene(s), style))
    out.source = [apply_style(scene(s), cfg.source_style) for s in ranges["source"]]
    for i, style in enumerate(cfg.target_styles):
        out.targets.append([apply_style(scene(s), style) for s in ranges[f"target{i + 1}"]])
    return out


def mean_amplitude_spectrum(samples: list[DomainSample]) -> np.ndarray:
    acc = None
    for s in samples:
        amp = spectral.decompose(s.image).amplitude.data
        acc = amp if acc is None else acc + amp
    return acc / len(samples)


def amplitude_distance(a: list[DomainSample], b: list[DomainSample]) -> float:
    """Mean absolute difference of the splits' mean per-channel amplitude spectra."""
    return float(np.mean(np.abs(mean_amplitude_spectrum(a) - mean_amplitude_spectrum(b))))


# --------------------------------------------------------------------------
# on-disk format


def _config_lines(cfg: DataConfig) -> list[str]:
    lines = []
    for key, value in asdict(cfg).items():
        if key in ("source_style", "target_styles"):
            continue
        lines.append(f"config {key} {value}")
    lines.append(f"style source {cfg.source_style.to_text()}")
    for i, st in enumerate(cfg.target_styles):
        lines.append(f"style target{i + 1} {st.to_text()}")
    return lines


def save_datasets(ds: Datasets, root: str | os.PathLike) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ranges = ds.config.seed_ranges()
    lines = [DATASET_FORMAT, f"version {DATASET_VERSION}", *_config_lines(ds.config)]
    for name, samples in ds.splits().items():
        r = ranges[name]
        lines.append(f"split {name} count {len(samples)} seeds {r.start}:{r.stop}")
        (root / name).mkdir(exist_ok=True)
        for i, s in enumerate(samples):
            checkpoint.save(
                root / name / f"{i:05d}.bin",
                {
                    "image": s.image,
                    "labels": s.labels.astype(np.uint8),
                    "domain_id": np.float64(s.domain_id),
                    "seed": np.float64(s.seed),
                },
            )
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(root: str | os.PathLike) -> tuple[DataConfig, dict[str, int]]:
    text = (Path(root) / "manifest.txt").read_text().splitlines()
    if not text or text[0] != DATASET_FORMAT:
        raise checkpoint.FormatError(f"{root} has no dataset manifest")
    version = int(text[1].split()[1])
    if version != DATASET_VERSION:
        raise checkpoint.FormatError(f"unsupported dataset version {version}")
    kw: dict = {}
    targets: list[StyleSpec] = []
    counts: dict[str, int] = {}
    for line in text[2:]:
        tag, name, rest = (line.split(" ", 2) + [""])[:3]
        if tag == "config":
            kw[name] = int(rest)
        elif tag == "style" and name == "source":
            kw["source_style"] = StyleSpec.from_text(rest)
        elif tag == "style":
            targets.append(StyleSpec.from_text(rest))
        elif tag == "split":
            counts[name] = int(rest.split()[1])
    kw["target_styles"] = tuple(targets)
    return DataConfig(**kw), counts


def load_split(root: str | os.PathLike, name: str) -> list[DomainSample]:
    _, counts = read_manifest(root)
    out = []
    for i in range(counts[name]):
        rec = checkpoint.load(Path(root) / name / f"{i:05d}.bin")
        out.append(
            DomainSample(rec["image"], rec["labels"], int(rec["domain_id"]), int(rec["seed"]))
        )
    return out


def load_datasets(root: str | os.PathLike) -> Datasets:
    cfg, counts = read_manifest(root)
    ds = Datasets(cfg, load_split(root, "pretrain"), load_split(root, "source"))
    ds.targets = [load_split(root, f"target{i + 1}") for i in range(len(cfg.target_styles))]
    return ds
