import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from protoworld.core_math import softmax_neg_distance
from protoworld.errors import ConfigError, DimensionError, ParamFileError
from protoworld.gradcheck import LD, numeric_grad, random_model, ref_model_loss, rel_error
from protoworld.losses import FIXED, LEARNABLE, PrototypeSet
from protoworld.model import (
    DEFAULT_GAMMA,
    FILTERED,
    IDENTITY,
    LEAKY_RELU,
    UNKNOWN,
    InferenceConfig,
    Layer,
    ModelParams,
    backward,
    forward,
    infer,
    infer_batch,
    init_params,
    load_params,
    params_from_bytes,
    params_to_bytes,
    save_params,
)


def test_gamma_default():
    assert DEFAULT_GAMMA == 0.05
    assert InferenceConfig().gamma == 0.05


def test_inference_config_bounds():
    with pytest.raises(ConfigError):
        InferenceConfig(gamma=1.5)
    with pytest.raises(ConfigError):
        InferenceConfig(xi=-0.1)


def test_shape_validation(rng):
    protos = PrototypeSet(np.eye(2, 3), 0.0, FIXED)
    with pytest.raises(DimensionError):
        ModelParams([Layer(rng.normal(size=(4, 5)), np.zeros(4))], rng.normal(size=(3, 5)), rng.normal(size=(2, 4)), protos)
    with pytest.raises(DimensionError):
        ModelParams([], rng.normal(size=(3, 5)), rng.normal(size=(3, 5)), protos)
    params = ModelParams([], rng.normal(size=(3, 5)), rng.normal(size=(2, 5)), protos)
    with pytest.raises(DimensionError):
        forward(params, np.zeros(4))


# forward


def test_identity_extractor(rng):
    P = rng.normal(size=(3, 4))
    params = ModelParams([], P, rng.normal(size=(2, 4)), PrototypeSet(np.eye(2, 3), 0.0, FIXED))
    x = rng.normal(size=4)
    fw = forward(params, x)
    np.testing.assert_array_equal(fw.feature, x)
    np.testing.assert_allclose(fw.embedding, P @ x, atol=1e-15)


def test_cosine_logits_scale_invariant_through_linear_map(rng):
    layer = Layer(rng.normal(size=(5, 4)), np.zeros(5), IDENTITY)
    params = ModelParams([layer], rng.normal(size=(3, 5)), rng.normal(size=(3, 5)), PrototypeSet(np.eye(3), 0.0, FIXED))
    x = rng.normal(size=4)
    np.testing.assert_allclose(forward(params, 2 * x).logits, forward(params, x).logits, atol=1e-12)


@pytest.mark.parametrize("classifier", ["cosine", "linear"])
def test_forward_matches_naive_loops(classifier):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        params = random_model(rng, classifier=classifier)
        x = rng.normal(size=params.input_dim)
        fw = forward(params, x)
        feat, emb, logits = oracles.forward(params, x)
        for got, want in ((fw.feature, feat), (fw.embedding, emb), (fw.logits, logits)):
            worst = max(worst, float(np.max(np.abs(got - np.array(want)))))
    assert worst < 1e-10


def test_forward_batch_matches_rows(small_params, rng):
    X = rng.normal(size=(7, 6))
    fb = forward(small_params, X)
    for i in range(7):
        fi = forward(small_params, X[i])
        np.testing.assert_allclose(fb.embedding[i], fi.embedding, atol=1e-14)
        np.testing.assert_allclose(fb.logits[i], fi.logits, atol=1e-14)


# backward


def _end_to_end_model(rng, mode):
    """2 hidden layers, d = 4, K = 3; inputs resampled away from kinks."""
    while True:
        layers = [
            Layer(rng.normal(0, 0.6, (5, 3)), rng.normal(0, 0.3, 5), LEAKY_RELU),
            Layer(rng.normal(0, 0.5, (4, 5)), rng.normal(0, 0.3, 4), LEAKY_RELU),
        ]
        C = np.eye(3, 4) if mode == FIXED else rng.normal(size=(3, 4))
        params = ModelParams(layers, rng.normal(0, 0.5, (4, 4)), rng.normal(0, 0.5, (3, 4)), PrototypeSet(C, 0.0, mode))
        X = rng.normal(size=(3, 3))
        y = np.array([0, 1, 2])
        fw = forward(params, X)
        if min(np.min(np.abs(z)) for z in fw.pre_activations) < 1e-3:
            continue
        de = np.sum((fw.embedding - C[y]) ** 2, axis=1) / 4
        r = float(np.median(de))
        if np.min(np.abs(de - r)) < 1e-3:
            r = float(np.min(de)) / 2
        params.protos.radius = r
        return params, X, y


@pytest.mark.parametrize("mode", [FIXED, LEARNABLE])
def test_backward_end_to_end_against_finite_differences(mode):
    rng = np.random.default_rng(21)
    for _ in range(5):
        params, X, y = _end_to_end_model(rng, mode)
        _, grads = backward(params, X, y, lam=0.1)
        arrays = {k: v.astype(LD) for k, v in params.arrays().items()}

        def loss_with(name, value, r=LD(params.protos.radius)):
            arrs = dict(arrays)
            arrs[name] = value
            return ref_model_loss(arrs, r, X, y, 2, params.classifier, params.alpha, 0.1)

        for name, arr in params.arrays().items():
            if name == "centers" and mode == FIXED:
                assert not grads[name].any()
                continue
            num = numeric_grad(lambda v, name=name: loss_with(name, v), arr, 1e-5)
            assert rel_error(grads[name], num) < 1e-4, name
        num_r = numeric_grad(
            lambda v: ref_model_loss(arrays, v[0], X, y, 2, params.classifier, params.alpha, 0.1),
            np.array([params.protos.radius]),
            1e-5,
        )
        assert rel_error(grads["radius"], num_r[0]) < 1e-4


def test_backward_radius_gradient_zero_without_esc(small_params, rng):
    X = rng.normal(size=(4, 6)) * 3
    _, grads = backward(small_params, X, np.array([0, 1, 2, 0]), lam=0.0)
    assert grads["radius"] == 0.0
    _, grads = backward(small_params, X, np.array([0, 1, 2, 0]), lam=0.1)
    assert grads["radius"] < 0


def test_backward_frozen_extractor(small_params, rng):
    X = rng.normal(size=(4, 6))
    _, grads = backward(small_params, X, np.array([0, 1, 2, 0]), freeze_extractor=True)
    for name, g in grads.items():
        if name.startswith("layers."):
            assert not np.any(g), name
    assert np.any(grads["embed_proj"]) and np.any(grads["classifier"])


# infer


def _random_case(rng):
    params = random_model(rng, alpha=float(rng.uniform(1, 20)))
    x = rng.normal(0, 2, params.input_dim)
    cfg = InferenceConfig(gamma=float(rng.uniform(0, 0.6)), xi=float(rng.uniform(0, 1)))
    return params, x, cfg


def test_infer_matches_naive_rule_on_1000_cases():
    rng = np.random.default_rng(99)
    kinds = {"known": 0, "unknown": 0, "filtered": 0}
    for _ in range(1000):
        params, x, cfg = _random_case(rng)
        got = infer(params, x, cfg).decision
        assert got == oracles.decide(params, x, cfg.gamma, cfg.xi)
        kinds["known" if got >= 0 else ("unknown" if got == UNKNOWN else "filtered")] += 1
    assert all(v > 0 for v in kinds.values()), kinds


@given(st.integers(0, 2**32 - 1))
def test_prediction_invariants(seed):
    rng = np.random.default_rng(seed)
    params, x, cfg = _random_case(rng)
    X = np.vstack([x, rng.normal(0, 2, (5, params.input_dim))])
    batch = infer_batch(params, X, cfg)
    for i in range(len(batch)):
        p = batch[i]
        assert abs(p.class_scores.sum() - 1) < 1e-9
        assert abs(p.proto_posterior.sum() - 1) < 1e-9
        if p.decision >= 0:
            assert p.proto_posterior[p.decision] >= cfg.xi
            assert p.proto_posterior[p.decision] == p.proto_posterior.max()
        if p.decision == FILTERED:
            assert p.class_scores.max() < cfg.gamma
        else:
            assert p.class_scores.max() >= cfg.gamma


@given(st.integers(0, 2**32 - 1))
def test_xi_zero_never_unknown(seed):
    rng = np.random.default_rng(seed)
    params = random_model(rng)
    batch = infer_batch(params, rng.normal(0, 2, (20, params.input_dim)), InferenceConfig(gamma=0.05, xi=0.0))
    assert not np.any(batch.decisions == UNKNOWN)


@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_raising_xi_only_moves_toward_unknown(seed, a, b):
    rng = np.random.default_rng(seed)
    params = random_model(rng)
    X = rng.normal(0, 2, (20, params.input_dim))
    lo, hi = sorted((a, b))
    d_lo = infer_batch(params, X, InferenceConfig(0.05, lo)).decisions
    d_hi = infer_batch(params, X, InferenceConfig(0.05, hi)).decisions
    changed = d_lo != d_hi
    assert np.all(d_lo[changed] >= 0)
    assert np.all(d_hi[changed] == UNKNOWN)


def test_infer_is_pure(small_params, rng):
    x = rng.normal(size=6)
    a = infer(small_params, x)
    b = infer(small_params, x)
    assert a.decision == b.decision
    assert np.array_equal(a.proto_posterior, b.proto_posterior)
    assert np.array_equal(a.class_scores, b.class_scores)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=10), st.floats(-100, 100))
def test_posterior_argmax_shift_invariant(dist, shift):
    dist = np.array(dist)
    if len(np.unique(dist)) != len(dist):
        return
    assert np.argmax(softmax_neg_distance(dist)) == np.argmax(softmax_neg_distance(dist + shift))


def test_infer_rejects_batches(small_params):
    with pytest.raises(DimensionError):
        infer(small_params, np.zeros((2, 6)))


# parameter file


@pytest.mark.parametrize("mode,classifier", [(FIXED, "cosine"), (LEARNABLE, "linear")])
def test_save_load_save_identical(tmp_path, mode, classifier):
    params = init_params(5, 3, 4, hidden_sizes=(6, 4), proto_mode=mode, classifier=classifier, seed=2)
    params.protos.radius = 0.375
    save_params(params, tmp_path / "a.ocpl")
    loaded = load_params(tmp_path / "a.ocpl")
    save_params(loaded, tmp_path / "b.ocpl")
    assert (tmp_path / "a.ocpl").read_bytes() == (tmp_path / "b.ocpl").read_bytes()
    assert loaded.protos.mode == mode and loaded.classifier == classifier
    assert loaded.protos.radius == 0.375


def test_loaded_model_predicts_identically(tmp_path, small_params, rng):
    save_params(small_params, tmp_path / "p.ocpl")
    loaded = load_params(tmp_path / "p.ocpl")
    X = rng.normal(size=(50, 6))
    cfg = InferenceConfig(0.05, 0.3)
    a, b = infer_batch(small_params, X, cfg), infer_batch(loaded, X, cfg)
    assert np.array_equal(a.decisions, b.decisions)
    assert np.array_equal(a.proto_posterior, b.proto_posterior)
    assert np.array_equal(a.class_scores, b.class_scores)


def test_header_layout(small_params):
    data = params_to_bytes(small_params)
    assert data[:4] == b"OCPL"
    assert struct.unpack("<I", data[4:8]) == (1,)


def test_truncated_file_names_missing_section(small_params):
    data = params_to_bytes(small_params)
    seen = set()
    for cut in range(len(data)):
        with pytest.raises(ParamFileError) as err:
            params_from_bytes(data[:cut])
        assert err.value.section is not None
        assert err.value.section in str(err.value)
        seen.add(err.value.section)
    assert {"magic", "version", "header", "layers.0.weight", "embed_proj", "classifier", "centers"} <= seen


def test_bad_magic_version_and_trailing_bytes(small_params):
    data = params_to_bytes(small_params)
    with pytest.raises(ParamFileError, match="magic"):
        params_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(ParamFileError, match="version"):
        params_from_bytes(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(ParamFileError, match="trailing"):
        params_from_bytes(data + b"\0")
