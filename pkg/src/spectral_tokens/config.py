"""Flat run configuration read from ``key = value`` text files."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import adapter as A
from .backbone import BackboneConfig
from .data import DataConfig
from .train import TrainConfig

CONFIG_ENV = "SPECTRAL_TOKENS_CONFIG"


@dataclass
class RunConfig:
    command: str = ""
    seed: int = 0
    data_dir: str = "data"
    ckpt_dir: str = "checkpoints"
    results_dir: str = "results"
    # data
    classes: int = 5
    image_size: int = 64
    n_pretrain: int = 256
    n_source: int = 128
    n_target: int = 64
    # backbone
    patch: int = 4
    d: int = 32
    layers: int = 4
    pretrain_steps: int = 600
    pretrain_lr: float = 3e-3
    # adapters
    preset: str = "set"
    tokens: int = 8
    eps_sigma: float = 1e-8
    ao_scope: str = "global"
    # adapter training
    steps: int = 1000
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.01
    eval_every: int = 200
    record_timing: bool = False
    # ablation
    ablation_configs: str = "frozen,image,tokens,set"
    ablation_seeds: str = "0,1,2"
    # inputs for eval / spectral-dump
    adapters: str = ""
    image: str = ""
    extra: dict = field(default_factory=dict, repr=False)

    # ------------------------------------------------------------------

    def data_config(self) -> DataConfig:
        return DataConfig(
            seed=self.seed,
            classes=self.classes,
            image_size=self.image_size,
            n_pretrain=self.n_pretrain,
            n_source=self.n_source,
            n_target=self.n_target,
        )

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            channels=3,
            patch=self.patch,
            d=self.d,
            layers=self.layers,
            classes=self.classes,
            image_size=self.image_size,
        )

    def adapter_config(self, preset: str | None = None) -> A.AdapterConfig:
        return A.preset(
            preset or self.preset, l=self.tokens, d=self.d, eps_sigma=self.eps_sigma, ao_scope=self.ao_scope
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            eval_every=self.eval_every,
            seed=self.seed,
            record_timing=self.record_timing,
        )

    def seeds(self) -> list[int]:
        return [int(s) for s in self.ablation_seeds.split(",") if s.strip()]

    def config_names(self) -> list[str]:
        return [s.strip() for s in self.ablation_configs.split(",") if s.strip()]

    # ------------------------------------------------------------------

    def set(self, key: str, raw: str) -> None:
        types = {f.name: f.type for f in fields(self) if f.name != "extra"}
        if key not in types:
            raise A.ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        if kind == "bool":
            value = raw.strip().lower() in ("1", "true", "yes", "on")
        elif kind == "int":
            value = int(raw)
        elif kind == "float":
            value = float(raw)
        else:
            value = raw.strip()
        setattr(self, key, value)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "extra":
                continue
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise A.ConfigError(f"config line {n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load(path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the config file (explicit path or ``$SPECTRAL_TOKENS_CONFIG``), then overrides."""
    cfg = RunConfig()
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        for k, v in parse_text(Path(path).read_text()).items():
            cfg.set(k, v)
    for k, v in (overrides or {}).items():
        cfg.set(k, v)
    return cfg
