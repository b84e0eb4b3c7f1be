"""Spectral token adapters.

Each adapted layer owns two token sets, one for the amplitude branch and one
for the phase branch. A token set is a bag of ``l`` learnable feature vectors
plus two small MLPs: ``mlp_token`` turns the tokens into injection vectors and
``mlp_out`` maps the enhanced component to its additive correction.

Features are laid out ``[..., d, H, W]``; leading axes (a batch) are carried
through every operation, and per-map statistics are computed per leading index.

Adapter parameters live in a flat ``{name: Tensor}`` dict using the names
``layer{k}.{amp|phase}.{tokens|mlp_token.*|mlp_out.*}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import spectral
from . import tensor as T
from .tensor import ShapeError, Tensor

BRANCHES = ("amp", "phase")
MLP_KEYS = ("w1", "b1", "w2", "b2")
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    l: int = 8
    d: int = 32
    use_spectral: bool = True
    use_tokens: bool = True
    ao_amplitude: bool = True
    ao_phase: bool = False
    ao_image: bool = False
    eps_sigma: float = 1e-8
    ao_scope: str = "global"
    # raise on non-Hermitian recomposition instead of keeping the real part
    strict_symmetry: bool = False

    def __post_init__(self):
        if self.l < 1 or self.d < 1:
            raise ConfigError(f"token length and feature dim must be >= 1 (l={self.l}, d={self.d})")
        if self.ao_scope not in ("global", "row", "column"):
            raise ConfigError(f"unknown ao_scope {self.ao_scope!r}")
        if (self.ao_amplitude or self.ao_phase) and not (self.use_spectral and self.use_tokens):
            raise ConfigError("amplitude/phase attention optimisation needs spectral tokens")
        if self.ao_image and (self.use_spectral or not self.use_tokens):
            raise ConfigError("image attention optimisation needs spatial tokens (use_spectral off)")

    @property
    def enabled(self) -> bool:
        return self.use_spectral or self.use_tokens


# Component ablation (frozen / +spectral / +tokens / +AO) and AO placement
# (image / phase / phase+amplitude / amplitude). "rein" is spatial tokens
# without AO.
PRESETS: dict[str, dict] = {
    "frozen": dict(use_spectral=False, use_tokens=False, ao_amplitude=False),
    "spectral": dict(use_spectral=True, use_tokens=False, ao_amplitude=False),
    "tokens": dict(use_spectral=True, use_tokens=True, ao_amplitude=False),
    "set": dict(use_spectral=True, use_tokens=True, ao_amplitude=True),
    "rein": dict(use_spectral=False, use_tokens=True, ao_amplitude=False),
    "image": dict(use_spectral=False, use_tokens=True, ao_amplitude=False, ao_image=True),
    "phase_ao": dict(use_spectral=True, use_tokens=True, ao_amplitude=False, ao_phase=True),
    "phase_amp_ao": dict(use_spectral=True, use_tokens=True, ao_amplitude=True, ao_phase=True),
}


def preset(name: str, **overrides) -> AdapterConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown adapter preset {name!r}; choose from {sorted(PRESETS)}")
    return AdapterConfig(**{**PRESETS[name], **overrides})


@dataclass(frozen=True)
class MLP:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x) -> Tensor:
        hidden = T.nonlinearity(T.affine(x, self.w1, self.b1))
        return T.affine(hidden, self.w2, self.b2)


@dataclass(frozen=True)
class SpectralTokenSet:
    tokens: Tensor
    mlp_token: MLP
    mlp_out: MLP

    @property
    def l(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]


def init_token_set(rng: np.random.Generator, l: int, d: int) -> dict[str, np.ndarray]:
    """Fresh parameters for one branch; ``mlp_out``'s last layer is zero."""
    return {
        "tokens": rng.normal(0.0, INIT_STD, (l, d)),
        "mlp_token.w1": rng.normal(0.0, INIT_STD, (d, d)),
        "mlp_token.b1": np.zeros(d),
        "mlp_token.w2": rng.normal(0.0, INIT_STD, (d, d)),
        "mlp_token.b2": np.zeros(d),
        "mlp_out.w1": rng.normal(0.0, INIT_STD, (d, d)),
        "mlp_out.b1": np.zeros(d),
        "mlp_out.w2": np.zeros((d, d)),
        "mlp_out.b2": np.zeros(d),
    }


def init_adapters(n_layers: int, l: int, d: int, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for k in range(n_layers):
        for branch in BRANCHES:
            for key, arr in init_token_set(rng, l, d).items():
                params[f"layer{k}.{branch}.{key}"] = Tensor(arr, requires_grad=True)
    return params


def token_set(params: Mapping[str, Tensor], layer: int, branch: str) -> SpectralTokenSet:
    p = f"layer{layer}.{branch}."
    mlps = [MLP(*(params[f"{p}{m}.{key}"] for key in MLP_KEYS)) for m in ("mlp_token", "mlp_out")]
    return SpectralTokenSet(params[p + "tokens"], *mlps)


def active_parameter_names(cfg: AdapterConfig, n_layers: int) -> list[str]:
    """Names of the adapter parameters that ``cfg`` actually routes through."""
    if not cfg.enabled:
        return []
    branches = BRANCHES if cfg.use_spectral else ("amp",)
    keys = ["tokens"] if cfg.use_tokens else []
    for m in ("mlp_token", "mlp_out") if cfg.use_tokens else ("mlp_out",):
        keys += [f"{m}.{key}" for key in MLP_KEYS]
    return [f"layer{k}.{b}.{key}" for k in range(n_layers) for b in branches for key in keys]


# --------------------------------------------------------------------------
# layout helpers


def to_rows(x: Tensor) -> Tensor:
    """``[..., d, H, W]`` -> ``[..., HW, d]``."""
    *lead, d, H, W = x.shape
    n = len(lead)
    perm = tuple(range(n)) + (n + 1, n + 2, n)
    return T.reshape(T.transpose(x, perm), (*lead, H * W, d))


def from_rows(x: Tensor, H: int, W: int) -> Tensor:
    """``[..., HW, d]`` -> ``[..., d, H, W]``."""
    *lead, hw, d = x.shape
    if hw != H * W:
        raise ShapeError(f"cannot fold {hw} rows into a {H}x{W} grid")
    n = len(lead)
    grid = T.reshape(x, (*lead, H, W, d))
    return T.transpose(grid, tuple(range(n)) + (n + 2, n, n + 1))


# --------------------------------------------------------------------------
# mechanism


def similarity(feat, tokens) -> Tensor:
    """Row-softmax of flattened features against tokens, scaled by 1/sqrt(d)."""
    feat, tokens = T.as_tensor(feat), T.as_tensor(tokens)
    if feat.ndim < 3:
        raise ShapeError(f"features must be [..., d, H, W], got {feat.shape}")
    d = feat.shape[-3]
    if tokens.ndim != 2 or tokens.shape[1] != d:
        raise ShapeError(f"tokens {tokens.shape} do not match feature channels d={d}")
    return _similarity_rows(to_rows(feat), tokens)


def _similarity_rows(rows: Tensor, tokens: Tensor) -> Tensor:
    d = rows.shape[-1]
    logits = T.matmul(rows, T.transpose(tokens, (1, 0)))
    return T.softmax_rows(T.scale(logits, 1.0 / math.sqrt(d)))


def _ao_axes(scope: str) -> tuple[int, ...]:
    return {"global": (-2, -1), "row": (-1,), "column": (-2,)}[scope]


def attention_optimize(M, eps_sigma: float = 1e-8, scope: str = "global") -> Tensor:
    """Standardise a similarity map: ``(M - mean) / max(std, eps_sigma)``.

    Mean and population standard deviation are taken over all ``HW * l``
    entries of each map by default; ``scope="row"``/``"column"`` standardise
    per row or per token column instead.
    """
    M = T.as_tensor(M)
    axes = _ao_axes(scope)
    mu = M.data.mean(axis=axes, keepdims=True)
    centred = M.data - mu
    sigma = np.sqrt((centred * centred).mean(axis=axes, keepdims=True))
    floored = sigma <= eps_sigma
    denom = np.where(floored, eps_sigma, sigma)
    out = centred / denom

    def backward(g, need):
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * out).mean(axis=axes, keepdims=True)
        # floored maps have a constant divisor, so only the centring term remains
        return ((g - gm - np.where(floored, 0.0, out * gy)) / denom,)

    return T.record_op(out, (M,), backward)


def token_adjust(
    comp,
    tok: SpectralTokenSet,
    ao: bool = False,
    eps_sigma: float = 1e-8,
    scope: str = "global",
    inject: bool = True,
) -> Tensor:
    """Correction ``mlp_out(comp + M @ mlp_token(tokens))`` for one branch.

    Returns only the correction; callers add the residual. With
    ``inject=False`` the token term is dropped and the result is
    ``mlp_out(comp)``.
    """
    comp = T.as_tensor(comp)
    *_, d, H, W = comp.shape
    if tok.d != d:
        raise ShapeError(f"token set has d={tok.d}, component has {d} channels")
    rows = to_rows(comp)
    if inject:
        if tok.tokens.ndim != 2 or tok.tokens.shape[1] != d:
            raise ShapeError(f"tokens {tok.tokens.shape} do not match feature channels d={d}")
        M = _similarity_rows(rows, tok.tokens)
        if ao:
            M = attention_optimize(M, eps_sigma, scope)
        rows = T.add(rows, T.matmul(M, tok.mlp_token(tok.tokens)))
    return from_rows(tok.mlp_out(rows), H, W)


def set_layer_forward(
    x,
    tok_amp: SpectralTokenSet | None,
    tok_phase: SpectralTokenSet | None,
    cfg: AdapterConfig,
) -> Tensor:
    """Adapt one layer's output features.

    frozen: ``x`` itself. Spatial tokens: ``x + beta(x)`` using ``tok_amp``.
    Spectral: decompose, correct amplitude and phase separately, wrap the
    phase back into (-pi, pi], recompose.
    """
    x = T.as_tensor(x)
    if x.ndim < 3 or x.shape[-3] != cfg.d:
        raise ShapeError(f"config expects d={cfg.d} channels, features have shape {x.shape}")
    if not cfg.enabled:
        return x
    kw = dict(eps_sigma=cfg.eps_sigma, scope=cfg.ao_scope)
    if not cfg.use_spectral:
        return T.add(x, token_adjust(x, tok_amp, ao=cfg.ao_image, **kw))
    pair = spectral.decompose(x)
    amp = T.add(
        pair.amplitude,
        token_adjust(pair.amplitude, tok_amp, ao=cfg.ao_amplitude, inject=cfg.use_tokens, **kw),
    )
    phase = T.wrap_phase(
        T.add(
            pair.phase,
            token_adjust(pair.phase, tok_phase, ao=cfg.ao_phase, inject=cfg.use_tokens, **kw),
        )
    )
    return spectral.compose(spectral.SpectralPair(amp, phase), strict=cfg.strict_symmetry)


def adapt_layer(x, params: Mapping[str, Tensor] | None, layer: int, cfg: AdapterConfig) -> Tensor:
    """``set_layer_forward`` with token sets looked up by layer index."""
    if not cfg.enabled or params is None:
        return T.as_tensor(x)
    amp = token_set(params, layer, "amp")
    phase = token_set(params, layer, "phase") if cfg.use_spectral else None
    return set_layer_forward(x, amp, phase, cfg)


def with_zero_output(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Copy of ``params`` with every ``mlp_out.w2``/``mlp_out.b2`` zeroed."""
    out = {}
    for name, t in params.items():
        if name.endswith(("mlp_out.w2", "mlp_out.b2")):
            t = Tensor(np.zeros(t.shape), requires_grad=t.requires_grad)
        out[name] = t
    return out


__all__ = [
    "AdapterConfig",
    "ConfigError",
    "PRESETS",
    "preset",
    "MLP",
    "SpectralTokenSet",
    "init_token_set",
    "init_adapters",
    "token_set",
    "active_parameter_names",
    "similarity",
    "attention_optimize",
    "token_adjust",
    "set_layer_forward",
    "adapt_layer",
]
