"""Finite-difference gradient checks over the differentiable building blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import adapter as A
from . import spectral
from . import tensor as T
from .tensor import Tensor, gradcheck

GRAD_TOL = 1e-5
# Adapter-block probes are <w, y> with w ~ N(0, 1) * PROBE_SCALE / size. Keeping
# |f| near 1e-3 keeps the rounding noise of a central difference (about one ulp
# of f over 2h) under the 1e-8 floor of the error metric, which matters for
# parameters whose exact gradient is zero (e.g. the token MLP's output bias
# under global standardisation, whose rows sum to zero).
PROBE_SCALE = 1e-3


@dataclass
class Check:
    name: str
    fn: Callable
    inputs: tuple
    tol: float = GRAD_TOL


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol)


def _sum_weighted(y: Tensor, w: np.ndarray) -> Tensor:
    return T.sum(T.mul(y, Tensor(w)))


def randomized_adapters(rng, n_layers: int, l: int, d: int, scale: float = 0.3) -> dict[str, np.ndarray]:
    """Init plus N(0, scale) noise, so the output projections are non-zero and every path carries gradient."""
    params = A.init_adapters(n_layers, l, d, int(rng.integers(1 << 30)))
    return {k: v.data + rng.normal(0.0, scale, v.shape) for k, v in params.items()}


def adapter_layer_check(
    name: str, cfg: A.AdapterConfig, shape: tuple[int, ...], seed: int, fresh: bool = False
) -> Check:
    """Gradient of a weighted sum of ``set_layer_forward`` w.r.t. every active adapter parameter."""
    rng = np.random.default_rng(seed)
    d = shape[-3]
    if fresh:
        params = {k: v.data for k, v in A.init_adapters(1, cfg.l, d, seed).items()}
    else:
        params = randomized_adapters(rng, 1, cfg.l, d)
    names = A.active_parameter_names(cfg, 1)
    x = Tensor(rng.normal(size=shape))
    w = rng.normal(size=shape) * PROBE_SCALE / x.size

    def f(*thetas):
        p = {k: Tensor(v) for k, v in params.items()}
        p.update(dict(zip(names, thetas)))
        return _sum_weighted(A.adapt_layer(x, p, 0, cfg), w)

    return Check(name, f, tuple(params[n] for n in names))


def default_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng([seed, 3])
    checks: list[Check] = []

    def add(name, fn, *inputs):
        checks.append(Check(name, fn, tuple(np.asarray(v, dtype=np.float64) for v in inputs)))

    wa = rng.normal(size=(3, 4))
    add("affine", lambda x, w, b: _sum_weighted(T.affine(x, w, b), wa),
        rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=4))
    ws = rng.normal(size=(4, 6))
    add("softmax_rows", lambda x: _sum_weighted(T.softmax_rows(x), ws), rng.normal(size=(4, 6)))
    wn = rng.normal(size=(3, 5))
    add("nonlinearity", lambda x: _sum_weighted(T.nonlinearity(x), wn), rng.normal(size=(3, 5)))
    wt = rng.normal(size=(2, 5))
    add("atan2", lambda y, x: _sum_weighted(T.atan2(y, x), wt), rng.normal(size=(2, 5)), rng.normal(size=(2, 5)))
    wl = rng.normal(size=(2, 3, 4))
    add("log_softmax", lambda x: _sum_weighted(T.log_softmax(x, axis=1), wl), rng.normal(size=(2, 3, 4)))
    wc = rng.normal(size=(2, 5, 4))
    add("depthwise_conv3x3", lambda x, k: _sum_weighted(T.depthwise_conv3x3(x, k), wc),
        rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 3, 3)))
    wm = rng.normal(size=(6, 4))
    add("attention_optimize", lambda m: _sum_weighted(A.attention_optimize(m), wm), rng.normal(size=(6, 4)))

    wa2, wp2 = rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 4))

    def spectral_path(x):
        pair = spectral.decompose(x)
        return T.add(_sum_weighted(pair.amplitude, wa2), _sum_weighted(pair.phase, wp2))

    add("decompose", spectral_path, rng.normal(size=(2, 4, 4)))

    def roundtrip(x):
        return _sum_weighted(spectral.compose(spectral.decompose(x), strict=False), wa2)

    add("decompose_compose", roundtrip, rng.normal(size=(2, 4, 4)))

    labels = rng.integers(0, 3, size=(2, 2))
    from .train import cross_entropy

    add("cross_entropy", lambda z: cross_entropy(z, labels), rng.normal(size=(3, 2, 2)))
    add("constant_probe", lambda x: T.sum(T.sub(x, x)), rng.normal(size=(3,)))

    checks.append(adapter_layer_check("adapter_fresh_1x4x4", A.preset("set", l=3, d=1), (1, 4, 4), seed, fresh=True))
    checks.append(adapter_layer_check("adapter_set_2x4x4", A.preset("set", l=3, d=2), (2, 4, 4), seed + 1))
    checks.append(adapter_layer_check("adapter_phase_ao_2x4x4", A.preset("phase_amp_ao", l=3, d=2), (2, 4, 4), seed + 2))
    checks.append(adapter_layer_check("adapter_image_2x4x4", A.preset("image", l=3, d=2), (2, 4, 4), seed + 3))
    return checks


def run_checks(checks: Sequence[Check]) -> list[CheckResult]:
    return [CheckResult(c.name, gradcheck(c.fn, *c.inputs), c.tol) for c in checks]


def report(results: Sequence[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.name} max_rel_err={r.error:.3e} tol={r.tol:.0e}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
