import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advprobe import models, tensorcore
from advprobe.errors import ConsistencyError, DimensionError, DomainError, NumericError
from conftest import linear_arch, toy_arch


def make_classifier(arch, seed=0):
    return models.Classifier(tensorcore.init_weights(arch, seed), arch)


def make_oracle(arch, seed=0, **kw):
    return models.BlackBoxOracle(make_classifier(arch, seed), **kw)


# ---------------------------------------------------------------------------
# descriptors


def test_reference_archs_have_stated_asymmetry():
    wb = models.whitebox_arch(4)
    bb = models.blackbox_arch(4)

    def count(arch, kind):
        return sum(1 for l in arch.layers if l["kind"] == kind)

    assert count(bb, "maxpool") > count(wb, "maxpool")
    assert count(bb, "dropout") > count(wb, "dropout")
    assert wb.input_side == bb.input_side == 150
    # both must be shape-consistent at the reference input side
    tensorcore.param_shapes(wb)
    tensorcore.param_shapes(bb)


def test_descriptor_json_round_trip():
    arch = models.blackbox_arch(7)
    again = models.ArchDescriptor.from_json(arch.to_json())
    assert again == arch


def test_descriptor_json_rejects_unknown_layers():
    bad = (
        '{"name": "x", "input_side": 8, "channels": 3, "num_classes": 2, '
        '"layers": [{"kind": "attention"}]}'
    )
    with pytest.raises(models.FormatError):
        models.ArchDescriptor.from_json(bad)


# ---------------------------------------------------------------------------
# oracle contract


def test_predict_probs_is_distribution(rng):
    arch = toy_arch()
    oracle = make_oracle(arch)
    x = rng.random((8, 8, 3)).astype(np.float32)
    p = oracle.predict_probs(x)
    assert abs(p.sum() - 1.0) < 1e-6
    assert np.all(p > 0)


def test_predict_probs_deterministic(rng):
    arch = toy_arch()
    oracle = make_oracle(arch)
    x = rng.random((8, 8, 3)).astype(np.float32)
    assert np.array_equal(oracle.predict_probs(x), oracle.predict_probs(x))


def test_two_class_linear_oracle_matches_sigmoid(rng):
    arch = linear_arch(input_side=1, channels=2, num_classes=2)
    weights = tensorcore.ModelWeights(
        "linear",
        [
            np.array([[0.4, -0.3], [-0.7, 1.1]], dtype=np.float32),
            np.array([0.05, -0.1], dtype=np.float32),
        ],
    )
    oracle = models.BlackBoxOracle(models.Classifier(weights, arch))
    x = rng.random((1, 1, 2)).astype(np.float32)
    z = x.reshape(-1).astype(np.float64) @ weights.arrays[0].astype(np.float64)
    z = z + weights.arrays[1]
    sig = 1.0 / (1.0 + math.exp(-(z[1] - z[0])))
    p = oracle.predict_probs(x)
    assert p[1] == pytest.approx(sig, abs=1e-6)


def test_query_counter_counts_every_call(rng):
    oracle = make_oracle(toy_arch())
    x = rng.random((8, 8, 3)).astype(np.float32)
    assert oracle.query_count == 0
    oracle.predict_probs(x)
    oracle.predict_probs(x)
    oracle.predict_probs(np.clip(x + 0.01, 0, 1))
    assert oracle.query_count == 3


def test_query_counter_skips_cache_hits(rng):
    oracle = make_oracle(toy_arch(), cache_predictions=True)
    x = rng.random((8, 8, 3)).astype(np.float32)
    p1 = oracle.predict_probs(x)
    p2 = oracle.predict_probs(x)
    assert oracle.query_count == 1
    assert np.array_equal(p1, p2)
    oracle.predict_probs(np.clip(x + 0.01, 0, 1))
    assert oracle.query_count == 2


def test_oracle_input_validation(rng):
    oracle = make_oracle(toy_arch())
    with pytest.raises(DimensionError):
        oracle.predict_probs(np.zeros((7, 8, 3), np.float32))
    with pytest.raises(DomainError):
        oracle.predict_probs(np.full((8, 8, 3), 1.5, np.float32))
    bad = np.zeros((8, 8, 3), np.float32)
    bad[0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        oracle.predict_probs(bad)


def test_oracle_surface_exposes_no_model_internals():
    oracle = make_oracle(toy_arch())
    public = {n for n in dir(oracle) if not n.startswith("_")}
    assert public == {"predict_probs", "query_count", "num_classes"}
    for name in public:
        assert "weight" not in name and "grad" not in name and "descriptor" not in name


# ---------------------------------------------------------------------------
# white-box side


def test_white_box_gradient_matches_finite_differences(rng):
    arch = toy_arch(input_side=6, channels=1, num_classes=3)
    clf = make_classifier(arch, seed=4)
    x = rng.random((6, 6, 1))
    y = 1
    g = clf.input_gradient(x, y)
    assert g.shape == x.shape
    h = 1e-3
    for _ in range(40):
        c = tuple(rng.integers(0, s) for s in x.shape)
        xp = np.clip(x.copy(), 0, 1)
        xm = xp.copy()
        xp[c] = x[c] + h
        xm[c] = x[c] - h
        fd = (
            tensorcore.cross_entropy(tensorcore.forward_probs(clf.weights, arch, xp), y)
            - tensorcore.cross_entropy(tensorcore.forward_probs(clf.weights, arch, xm), y)
        ) / (2 * h)
        assert abs(fd - g[c]) <= max(1e-5, 1e-3 * max(abs(fd), abs(g[c])))


def test_dead_relu_region_has_zero_gradient():
    # negative kernel + zero bias on an all-ones image: every relu input is
    # strictly negative, so the input gradient vanishes
    arch = models.ArchDescriptor(
        name="dead",
        input_side=4,
        channels=1,
        num_classes=2,
        layers=[
            {"kind": "conv", "filters": 2, "size": 3, "stride": 1},
            {"kind": "relu"},
            {"kind": "flatten"},
            {"kind": "dense", "units": 2},
        ],
    )
    weights = tensorcore.init_weights(arch, seed=0)
    weights.arrays[0] = -np.abs(weights.arrays[0]) - 0.1
    clf = models.Classifier(weights, arch)
    g = clf.input_gradient(np.ones((4, 4, 1), np.float32), 0)
    assert np.all(g == 0)


def test_classifier_rejects_mismatched_weights():
    arch = toy_arch(input_side=8)
    with pytest.raises(ConsistencyError):
        models.Classifier(tensorcore.init_weights(toy_arch(input_side=6), 0), arch)


# ---------------------------------------------------------------------------
# most confused class


def test_most_confused_simple_argmax():
    assert models.most_confused_class(np.array([0.7, 0.2, 0.1]), 0) == 1


def test_most_confused_forced_two_class():
    assert models.most_confused_class(np.array([0.5, 0.5]), 0) == 1


def test_most_confused_tie_breaks_low_index():
    assert models.most_confused_class(np.array([0.4, 0.3, 0.3]), 0) == 1


def test_most_confused_rejects_single_class():
    with pytest.raises(DomainError):
        models.most_confused_class(np.array([1.0]), 0)


@settings(max_examples=80)
@given(
    st.lists(st.floats(min_value=1e-6, max_value=1.0), min_size=2, max_size=12),
    st.integers(min_value=0, max_value=11),
)
def test_most_confused_never_returns_true_label(raw, label_pick):
    p = np.array(raw)
    p /= p.sum()
    y = label_pick % len(p)
    assert models.most_confused_class(p, y) != y


# ---------------------------------------------------------------------------
# model save/load


def test_save_load_model_pair(tmp_path):
    arch = toy_arch(num_classes=3)
    clf = make_classifier(arch, seed=8)
    path = tmp_path / "target.advw"
    models.save_model(clf, path)
    loaded = models.load_model(path)
    assert loaded.descriptor == arch
    for a, b in zip(clf.weights.arrays, loaded.weights.arrays):
        assert np.array_equal(a, b)


def test_load_model_missing_descriptor(tmp_path):
    arch = toy_arch()
    clf = make_classifier(arch)
    path = tmp_path / "t.advw"
    tensorcore.save_weights(clf.weights, path)
    with pytest.raises(ConsistencyError):
        models.load_model(path)
