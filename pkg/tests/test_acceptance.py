"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py``; the summary lines are
printed at the end of the session.
"""

import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from spectral_tokens import adapter as A
from spectral_tokens import backbone as B
from spectral_tokens import checks, cli, config
from spectral_tokens import spectral as S
from spectral_tokens import tensor as T
from spectral_tokens.tensor import Tensor, gradcheck

import oracles

SIZES = (1, 2, 3, 4, 5, 8)


def complex_of(grid):
    return grid.real.data + 1j * grid.imag.data


# ---------------------------------------------------------------- 1


def test_c1_spectral_oracle_equivalence(criterion):
    t0 = time.perf_counter()
    combos = list(itertools.product(SIZES, SIZES))
    worst, n_cases = 0.0, 0
    for seed in range(4 * len(combos)):  # 144 seeds, every (H, W) pair four times
        rng = np.random.default_rng(seed)
        H, W = combos[seed % len(combos)]
        d = int(rng.integers(1, 9))
        x = rng.normal(size=(d, H, W))
        X = S.dft2(x)
        worst = max(worst, np.max(np.abs(complex_of(X) - S.dft2_reference(x))))
        back = S.idft2(X).data
        worst = max(worst, np.max(np.abs(back - S.idft2_reference(complex_of(X)).real)))
        n_cases += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 10.0 and n_cases >= 100
    criterion("1 spectral oracle equivalence", ok, f"max_abs_err={worst:.2e} cases={n_cases} t={elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2


def test_c2_round_trip_and_parseval(criterion):
    t0 = time.perf_counter()
    rt, pv = 0.0, 0.0
    rng = np.random.default_rng(2)
    shapes = [(1, 1, 1), (2, 3, 5), (3, 8, 8), (4, 16, 12), (8, 32, 32)]
    for shape in shapes:
        for _ in range(4):
            x = rng.normal(scale=rng.uniform(0.1, 10.0), size=shape)
            pair = S.decompose(x)
            rt = max(rt, np.max(np.abs(S.compose(pair).data - x)))
            H, W = shape[-2:]
            energy = np.sum(x * x, axis=(-2, -1))
            spec = np.sum(pair.amplitude.data**2, axis=(-2, -1)) / (H * W)
            pv = max(pv, np.max(np.abs(spec - energy) / energy))
    elapsed = time.perf_counter() - t0
    ok = rt <= 1e-10 and pv <= 1e-9 and elapsed < 5.0
    criterion("2 round trip & Parseval", ok, f"round_trip={rt:.2e} parseval_rel={pv:.2e} t={elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 3


def test_c3_phase_stability(criterion):
    amp_err, phase_err = 0.0, 0.0
    rng = np.random.default_rng(3)
    for c in (2.5, 0.1, 7.0, 1e3):
        x = rng.normal(size=(4, 8, 8))
        p, q = S.decompose(x), S.decompose(c * x)
        mask = p.amplitude.data > 1e-6
        amp_err = max(amp_err, np.max(np.abs(q.amplitude.data[mask] / (c * p.amplitude.data[mask]) - 1)))
        phase_err = max(phase_err, np.max(np.abs(q.phase.data - p.phase.data)[mask]))
    ok = amp_err <= 1e-9 and phase_err <= 1e-9
    criterion("3 phase stability", ok, f"amp_rel={amp_err:.2e} phase_abs={phase_err:.2e}")
    assert ok


# ---------------------------------------------------------------- 4


def test_c4_identity_at_init(criterion):
    layer_err = 0.0
    rng = np.random.default_rng(4)
    for name in ("set", "tokens", "phase_amp_ao", "spectral"):
        cfg = A.preset(name, l=8, d=32)
        params = A.init_adapters(1, 8, 32, seed=int(rng.integers(1000)))
        x = rng.normal(size=(32, 16, 16))
        layer_err = max(layer_err, np.max(np.abs(A.adapt_layer(x, params, 0, cfg).data - x)))
    bcfg = B.BackboneConfig()
    model = B.init_model(bcfg, 0)
    adapters = A.init_adapters(bcfg.layers, 8, bcfg.d, seed=1)
    img = rng.random((3, 64, 64))
    logit_err = np.max(np.abs(B.forward(model, img, A.preset("set"), adapters).data - B.forward(model, img).data))
    ok = layer_err <= 1e-10 and logit_err <= 1e-9
    criterion("4 identity at init", ok, f"layer={layer_err:.2e} logits={logit_err:.2e}")
    assert ok


# ---------------------------------------------------------------- 5


def test_c5_attention_optimisation_statistics(criterion):
    mean_err = std_err = row_err = 0.0
    argmax_ok = True
    n_maps = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        l = int(rng.integers(2, 12))
        d = int(rng.integers(1, 9))
        H, W = (int(v) for v in rng.integers(1, 9, 2))
        feat = rng.normal(scale=rng.uniform(0.1, 20.0), size=(d, H, W))
        M = A.similarity(feat, rng.normal(size=(l, d))).data
        row_err = max(row_err, np.max(np.abs(M.mean(axis=1) - 1.0 / l)))
        if M.std() <= 1e-8:
            continue
        out = A.attention_optimize(M).data
        mean_err = max(mean_err, abs(out.mean()))
        std_err = max(std_err, abs(out.std() - 1.0))
        argmax_ok &= bool(np.array_equal(np.argmax(out, axis=1), np.argmax(M, axis=1)))
        n_maps += 1
    ok = mean_err <= 1e-9 and std_err <= 1e-9 and row_err <= 1e-12 and argmax_ok and n_maps > 100
    criterion(
        "5 attention-optimisation statistics",
        ok,
        f"mean={mean_err:.1e} std={std_err:.1e} row_mean={row_err:.1e} argmax={argmax_ok} maps={n_maps}",
    )
    assert ok


# ---------------------------------------------------------------- 6


def corrupt_ao(M, eps_sigma=1e-8, scope="global"):
    """Attention optimisation whose backward drops the variance term."""
    M = T.as_tensor(M)
    mu = M.data.mean(axis=(-2, -1), keepdims=True)
    sd = M.data.std(axis=(-2, -1), keepdims=True)
    out = (M.data - mu) / sd
    return T.record_op(out, (M,), lambda g, need: ((g - g.mean(axis=(-2, -1), keepdims=True)) / sd,))


def test_c6_gradient_correctness(criterion, monkeypatch):
    t0 = time.perf_counter()
    suite = [
        checks.adapter_layer_check("set", A.preset("set", l=4, d=2), (2, 4, 4), seed=6),
        checks.adapter_layer_check("phase+amp AO", A.preset("phase_amp_ao", l=4, d=2), (2, 4, 4), seed=7),
        checks.adapter_layer_check("set fresh", A.preset("set", l=4, d=2), (2, 4, 4), seed=8, fresh=True),
    ]
    n_params = sum(sum(v.size for v in c.inputs) for c in suite)
    results = checks.run_checks(suite)
    worst = max(r.error for r in results)
    elapsed = time.perf_counter() - t0
    # negative control: the same check must notice a wrong backward rule
    monkeypatch.setattr(A, "attention_optimize", corrupt_ao)
    control = checks.run_checks([checks.adapter_layer_check("corrupt", A.preset("set", l=4, d=2), (2, 4, 4), seed=6)])
    caught = control[0].error >= 1e-5
    ok = worst < 1e-5 and elapsed < 60.0 and caught
    criterion(
        "6 gradient correctness",
        ok,
        f"max_rel_err={worst:.2e} params={n_params} t={elapsed:.1f}s control_err={control[0].error:.1e}",
    )
    assert ok


# ---------------------------------------------------------------- 7


def branch_lists(params, branch):
    pre = f"layer0.{branch}."
    return {k[len(pre):]: v.tolist() for k, v in params.items() if k.startswith(pre)}


def test_c7_straight_line_oracle(criterion):
    worst = 0.0
    for seed, name in itertools.product(range(4), ("set", "tokens", "phase_amp_ao", "phase_ao")):
        rng = np.random.default_rng(seed)
        cfg = A.preset(name, l=4, d=3)
        params = checks.randomized_adapters(rng, 1, 4, 3)
        x = rng.normal(size=(3, 4, 5))
        out = A.adapt_layer(x, {k: Tensor(v) for k, v in params.items()}, 0, cfg).data
        ref = oracles.set_layer_forward(
            x.tolist(), branch_lists(params, "amp"), branch_lists(params, "phase"),
            ao_amp=cfg.ao_amplitude, ao_phase=cfg.ao_phase,
        )
        worst = max(worst, np.max(np.abs(out - np.array(ref))))
    ok = worst <= 1e-9
    criterion("7 straight-line oracle", ok, f"max_abs_err={worst:.2e}")
    assert ok


# ---------------------------------------------------------------- 8


def test_c8_toy_ablation(criterion, tmp_path):
    cfg = config.RunConfig(
        data_dir=str(tmp_path / "data"), ckpt_dir=str(tmp_path / "ckpt"), results_dir=str(tmp_path / "res")
    )
    cfg.ablation_configs = "frozen,image,tokens,set"
    t0 = time.process_time()
    cli.cmd_gen_data(cfg)
    cli.cmd_pretrain(cfg)
    out = cli.cmd_ablate(cfg)
    cpu = time.process_time() - t0
    summary = json.loads((Path(out) / "summary.json").read_text())["configs"]
    mean = {k: v["mean"] for k, v in summary.items()}
    spread = {k: v["spread"] for k, v in summary.items()}
    m1 = mean["image"] - mean["frozen"]
    s1 = max(spread["image"], spread["frozen"])
    m2 = mean["set"] - mean["tokens"]
    s2 = max(spread["set"], spread["tokens"])
    ok = m1 > s1 and m2 > s2 and cpu < 600.0
    detail = " ".join(f"{k}={mean[k]:.4f}±{spread[k]:.4f}" for k in mean)
    criterion(
        "8 toy ablation ordering",
        ok,
        f"{detail} | image-frozen={m1:+.4f} (spread {s1:.4f}) set-tokens={m2:+.4f} (spread {s2:.4f}) cpu={cpu:.0f}s",
    )
    assert ok


# ---------------------------------------------------------------- 9


SMALL = {
    "image_size": "16", "classes": "3", "n_pretrain": "8", "n_source": "4", "n_target": "3", "d": "6",
    "layers": "2", "tokens": "3", "pretrain_steps": "20", "steps": "8", "eval_every": "4", "lr": "3e-3",
    "ablation_configs": "frozen,image,set", "ablation_seeds": "0,1",
}


def snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def run_all(root: Path) -> dict:
    paths = {"data_dir": str(root / "data"), "ckpt_dir": str(root / "ckpt"), "results_dir": str(root / "res")}
    base = {**SMALL, **paths}
    cli.cmd_gen_data(config.load(None, base))
    cli.cmd_pretrain(config.load(None, base))
    backbone = (root / "ckpt" / cli.BACKBONE_FILE).read_bytes()
    cli.cmd_train(config.load(None, {**base, "preset": "set"}))
    cli.cmd_train(config.load(None, {**base, "preset": "image", "seed": "0"}))
    unchanged = (root / "ckpt" / cli.BACKBONE_FILE).read_bytes() == backbone
    cli.cmd_eval(config.load(None, base))
    cli.cmd_eval(config.load(None, {**base, "adapters": str(root / "ckpt" / "adapters-set-seed0.ckpt")}))
    cli.cmd_ablate(config.load(None, base))
    cli.cmd_gradcheck(config.load(None, base))
    cli.cmd_spectral_dump(config.load(None, {**base, "image": str(root / "data" / "source" / "00000.bin")}))
    return snapshot(root), unchanged


def test_c9_determinism(criterion, tmp_path, capsys):
    # same config and seed, two separate output trees with identical relative paths
    first, unchanged = run_all(tmp_path / "a")
    (tmp_path / "a").rename(tmp_path / "a_done")
    second, _ = run_all(tmp_path / "a")
    capsys.readouterr()
    differing = [k for k in first if first[k] != second.get(k)]
    ok = not differing and set(first) == set(second) and unchanged and len(first) > 20
    criterion("9 determinism", ok, f"files={len(first)} differing={differing[:3]} backbone_unchanged={unchanged}")
    assert ok
