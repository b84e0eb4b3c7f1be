import math

import numpy as np
import pytest

from spectral_tokens import adapter as A
from spectral_tokens import tensor as T
from spectral_tokens.adapter import AdapterConfig, ConfigError
from spectral_tokens.tensor import GradTape, Tensor, gradcheck

import oracles


def random_params(seed, l, d, n_layers=1, scale=0.3):
    rng = np.random.default_rng(seed)
    base = A.init_adapters(n_layers, l, d, seed)
    return {k: Tensor(v.data + rng.normal(0.0, scale, v.shape)) for k, v in base.items()}


def branch_lists(params, layer, branch):
    pre = f"layer{layer}.{branch}."
    return {k[len(pre):]: params[k].data.tolist() for k in params if k.startswith(pre)}


# ---------------------------------------------------------------- config


def test_presets_are_valid_and_distinct():
    cfgs = {name: A.preset(name) for name in A.PRESETS}
    assert len(set(cfgs.values())) == len(cfgs)
    assert not cfgs["frozen"].enabled


@pytest.mark.parametrize(
    "kw",
    [
        dict(l=0),
        dict(ao_scope="diagonal"),
        dict(use_tokens=False, ao_amplitude=True),
        dict(use_spectral=False, ao_amplitude=True),
        dict(ao_image=True, ao_amplitude=False),
    ],
)
def test_invalid_configs_rejected(kw):
    with pytest.raises(ConfigError):
        AdapterConfig(**kw)


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown"):
        A.preset("everything")


def test_init_zeroes_output_projection():
    params = A.init_adapters(2, 4, 6, seed=0)
    for name, t in params.items():
        if name.endswith(("mlp_out.w2", "mlp_out.b2")):
            assert not np.any(t.data)
        elif name.endswith(("w1", "w2", "tokens")):
            assert 0.01 < t.data.std() < 0.03


def test_active_parameter_names():
    assert A.active_parameter_names(A.preset("frozen"), 2) == []
    image = A.active_parameter_names(A.preset("image"), 1)
    assert all(".amp." in n for n in image) and len(image) == 9
    spectral_only = A.active_parameter_names(A.preset("spectral"), 1)
    assert all("mlp_out" in n for n in spectral_only) and len(spectral_only) == 8
    assert len(A.active_parameter_names(A.preset("set"), 3)) == 3 * 2 * 9


# ---------------------------------------------------------------- similarity


def test_zero_tokens_give_uniform_map():
    M = A.similarity(np.random.default_rng(0).normal(size=(3, 2, 2)), np.zeros((5, 3))).data
    np.testing.assert_array_equal(M, 0.2)


def test_single_token_map_is_all_ones():
    M = A.similarity(np.random.default_rng(0).normal(size=(3, 2, 2)), np.ones((1, 3))).data
    np.testing.assert_array_equal(M, 1.0)


def test_aligned_token_dominates():
    tokens = np.array([[1.0, 0.0], [0.0, 1.0]])
    feat = np.array([[[40.0]], [[0.0]]])
    M = A.similarity(feat, tokens).data
    expected = 1.0 / (1.0 + math.exp(-40.0 / math.sqrt(2)))
    assert M[0, 0] == pytest.approx(expected, rel=1e-15)
    assert M[0, 0] > 1 - 1e-12


def test_similarity_shape_errors():
    with pytest.raises(T.ShapeError):
        A.similarity(np.ones((3, 2, 2)), np.ones((4, 2)))


@pytest.mark.parametrize("seed", range(10))
def test_map_row_means_and_spread_bound(seed):
    rng = np.random.default_rng(seed)
    l = int(rng.integers(2, 9))
    M = A.similarity(rng.normal(scale=3, size=(4, 5, 3)), rng.normal(size=(l, 4))).data
    np.testing.assert_allclose(M.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(M.mean(axis=1), 1.0 / l, atol=1e-12)
    assert M.std() <= math.sqrt((1 / l) * (1 - 1 / l)) + 1e-12


# ---------------------------------------------------------------- attention optimisation


def test_uniform_map_normalises_to_zero():
    out = A.attention_optimize(np.full((6, 4), 0.25)).data
    np.testing.assert_array_equal(out, 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_ao_standardises_and_keeps_argmax(seed):
    rng = np.random.default_rng(seed)
    M = A.similarity(rng.normal(size=(3, 4, 4)), rng.normal(size=(5, 3))).data
    out = A.attention_optimize(M).data
    assert abs(out.mean()) < 1e-9
    assert abs(out.std() - 1.0) < 1e-9
    assert np.array_equal(np.argmax(out, axis=1), np.argmax(M, axis=1))


def test_ao_scopes():
    M = np.random.default_rng(1).random((6, 4))
    rows = A.attention_optimize(M, scope="row").data
    np.testing.assert_allclose(rows.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(rows.std(axis=1), 1.0, atol=1e-12)
    cols = A.attention_optimize(M, scope="column").data
    np.testing.assert_allclose(cols.std(axis=0), 1.0, atol=1e-12)


def test_ao_batched_maps_are_independent():
    rng = np.random.default_rng(2)
    M = rng.random((3, 6, 4))
    out = A.attention_optimize(M).data
    for b in range(3):
        np.testing.assert_allclose(out[b], A.attention_optimize(M[b]).data, atol=1e-14)


@pytest.mark.parametrize("scope", ["global", "row", "column"])
def test_ao_gradient(scope):
    rng = np.random.default_rng(3)
    w = rng.normal(size=(5, 3))
    f = lambda m: T.sum(T.mul(A.attention_optimize(m, scope=scope), Tensor(w)))  # noqa: E731
    assert gradcheck(f, rng.random((5, 3))) < 1e-6


def test_ao_gradient_on_floored_map():
    w = np.random.default_rng(4).normal(size=(3, 2))
    f = lambda m: T.sum(T.mul(A.attention_optimize(m, eps_sigma=1e-3), Tensor(w)))  # noqa: E731
    base = np.full((3, 2), 0.5)
    base[0, 0] += 1e-6
    assert gradcheck(f, base, h=1e-8) < 1e-5


# ---------------------------------------------------------------- token_adjust


def test_zero_output_projection_gives_zero_correction():
    params = A.with_zero_output(random_params(0, 3, 4))
    comp = np.random.default_rng(0).normal(size=(4, 3, 3))
    beta = A.token_adjust(comp, A.token_set(params, 0, "amp"), ao=True)
    np.testing.assert_array_equal(beta.data, 0.0)


def test_zero_tokens_without_ao_closed_form():
    params = random_params(1, 4, 3)
    params["layer0.amp.tokens"] = Tensor(np.zeros((4, 3)))
    tok = A.token_set(params, 0, "amp")
    comp = np.random.default_rng(1).normal(size=(3, 2, 2))
    beta = A.token_adjust(comp, tok, ao=False).data
    # uniform M: every row receives the mean of mlp_token(tokens) = mlp_token(0)
    inj = tok.mlp_token(np.zeros((1, 3))).data[0]
    rows = comp.reshape(3, 4).T + inj
    expected = tok.mlp_out(rows).data.T.reshape(3, 2, 2)
    np.testing.assert_allclose(beta, expected, atol=1e-14)


def test_token_adjust_gradient_1x4x4():
    params = {k: v.data for k, v in random_params(2, 3, 1).items()}
    names = [n for n in params if n.startswith("layer0.amp.")]
    comp = Tensor(np.random.default_rng(2).normal(size=(1, 4, 4)))

    def f(*thetas):
        p = {k: Tensor(v) for k, v in params.items()}
        p.update(zip(names, thetas))
        return T.sum(A.token_adjust(comp, A.token_set(p, 0, "amp"), ao=True))

    assert gradcheck(f, *[params[n] for n in names]) < 1e-5


# ---------------------------------------------------------------- set_layer_forward


def test_frozen_config_is_bit_identical():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3, 3)))
    out = A.set_layer_forward(x, None, None, A.preset("frozen", d=4))
    assert out is x


@pytest.mark.parametrize("name", ["spectral", "tokens", "set", "phase_amp_ao", "image", "rein"])
def test_identity_at_init(name):
    cfg = A.preset(name, l=5, d=6)
    params = A.init_adapters(1, 5, 6, seed=3)
    x = np.random.default_rng(3).normal(size=(6, 8, 8))
    np.testing.assert_allclose(A.adapt_layer(x, params, 0, cfg).data, x, atol=1e-10)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("name", ["set", "tokens", "phase_amp_ao"])
def test_matches_scalar_oracle(seed, name):
    cfg = A.preset(name, l=3, d=2)
    params = random_params(seed, 3, 2)
    x = np.random.default_rng(seed).normal(size=(2, 3, 4))
    out = A.adapt_layer(x, params, 0, cfg).data
    ref = oracles.set_layer_forward(
        x.tolist(), branch_lists(params, 0, "amp"), branch_lists(params, 0, "phase"),
        ao_amp=cfg.ao_amplitude, ao_phase=cfg.ao_phase,
    )
    assert np.max(np.abs(out - np.array(ref))) < 1e-9


def test_spatial_tokens_match_direct_computation():
    cfg = A.preset("image", l=3, d=2)
    params = random_params(5, 3, 2)
    x = np.random.default_rng(5).normal(size=(2, 3, 3))
    beta = oracles.token_adjust(x.tolist(), branch_lists(params, 0, "amp"), ao=True)
    np.testing.assert_allclose(A.adapt_layer(x, params, 0, cfg).data, x + np.array(beta), atol=1e-12)


def test_strict_symmetry_flags_phase_corrections():
    params = random_params(6, 3, 2)
    x = np.random.default_rng(6).normal(size=(2, 4, 4))
    with pytest.raises(A.spectral.SymmetryError):
        A.adapt_layer(x, params, 0, A.preset("set", l=3, d=2, strict_symmetry=True))
    assert np.all(np.isfinite(A.adapt_layer(x, params, 0, A.preset("set", l=3, d=2)).data))


def test_batched_layer_equals_per_sample():
    cfg = A.preset("set", l=3, d=2)
    params = random_params(7, 3, 2)
    x = np.random.default_rng(7).normal(size=(3, 2, 4, 4))
    batched = A.adapt_layer(x, params, 0, cfg).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], A.adapt_layer(x[b], params, 0, cfg).data, atol=1e-12)


def test_wrong_channel_count_rejected():
    with pytest.raises(T.ShapeError):
        A.set_layer_forward(np.ones((3, 2, 2)), None, None, A.preset("set", d=4))


def test_only_adapter_parameters_receive_gradients():
    cfg = A.preset("set", l=3, d=2)
    params = {k: v.trainable() for k, v in random_params(8, 3, 2).items()}
    x = Tensor(np.random.default_rng(8).normal(size=(2, 4, 4)))
    names = A.active_parameter_names(cfg, 1)
    with GradTape() as tape:
        y = T.sum(A.adapt_layer(x, params, 0, cfg))
    grads = tape.gradient(y, [params[n] for n in names] + [x])
    assert all(np.any(g) for g in grads[:-1])
    assert not np.any(grads[-1])
