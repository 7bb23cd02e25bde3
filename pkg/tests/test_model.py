import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from drrspec.model import (LayerSpec, ModelParams, Spectrum, build_isotopenet_lite, classify,
                           load_checkpoint, predict_logits, predict_proba, receptive_field,
                           save_checkpoint, softmax, tic_normalize)
from helpers import reference_logits, tiny_model


def dense_model(W, b=None):
    W = np.asarray(W, dtype=np.float64)
    b = np.zeros(W.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    return ModelParams([LayerSpec("dense", filters=W.shape[0])], [{"W": W, "b": b}],
                       W.shape[1], W.shape[0])


def test_zero_weights_give_zero_logits():
    model = tiny_model(64)
    model = model.with_arrays([np.zeros_like(a) for a in model.arrays()])
    np.testing.assert_array_equal(predict_logits(model, np.ones(64)), [0.0, 0.0])


def test_dense_unit_input_selects_column(rng):
    W = rng.normal(size=(2, 5))
    e = np.zeros(5)
    e[3] = 1.0
    np.testing.assert_array_equal(predict_logits(dense_model(W), e), W[:, 3])


@pytest.mark.parametrize("seed", range(5))
def test_logits_match_loop_reimplementation(seed):
    rng = np.random.default_rng(seed)
    model = tiny_model(64, seed=seed, input_scale=float(rng.uniform(0.5, 3)))
    X = rng.normal(size=(3, 64))
    z = predict_logits(model, X)
    for row, zi in zip(X, z):
        np.testing.assert_allclose(zi, reference_logits(model, row), rtol=1e-11, atol=1e-12)


def test_isotopenet_lite_logits_match_reimplementation(rng):
    model = build_isotopenet_lite(256, seed=4)
    x = tic_normalize(rng.uniform(0, 1, size=256))
    np.testing.assert_allclose(predict_logits(model, x), reference_logits(model, x),
                               rtol=1e-10, atol=1e-12)


def test_length_mismatch_rejected():
    model = tiny_model(64)
    with pytest.raises(ValueError, match="does not match"):
        predict_logits(model, np.ones(63))
    with pytest.raises(ValueError):
        classify(model, Spectrum(np.ones(65)))


def test_classify_and_tie_rule():
    model = dense_model([[1.0], [0.5]])
    assert classify(model, [2.0]) == 0
    tie = dense_model([[0.0], [0.0]])
    assert classify(tie, [1.0]) == 0
    assert classify(dense_model([[1.0], [0.5]]), [-2.0]) == 1


@given(hnp.arrays(np.float64, st.integers(2, 6), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_properties(z, c):
    p = softmax(z)
    assert np.all(p > 0) and np.all(p < 1 + 1e-15)
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(softmax(z + c), p, rtol=1e-9, atol=1e-15)
    assert p[np.argmax(z)] == p.max()


def test_softmax_examples():
    np.testing.assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(softmax([np.log(3.0), 0.0]), [0.75, 0.25], rtol=1e-15)
    p = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(p)) and p[0] == 1.0 and p[1] < 1e-300


def test_predict_proba_rows_sum_to_one(rng):
    model = tiny_model(64)
    p = predict_proba(model, rng.normal(size=(5, 64)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)


def test_isotopenet_lite_structure():
    model = build_isotopenet_lite(2000, 2, bin_width=0.6)
    assert receptive_field(model.layers) >= 9
    kinds = [s.kind for s in model.layers]
    assert kinds == ["conv", "relu", "conv", "relu", "locally-connected", "relu", "dense"]
    assert model.layers[0].filters == 8 and model.layers[2].filters == 4
    lc = model.layers[4]
    assert (lc.stride, lc.filters) == (8, 4)
    assert model.params[-1]["W"].shape[0] == 2
    assert model.is_relu_only()
    z = predict_logits(model, np.zeros(2000))
    assert np.all(np.isfinite(z))


@pytest.mark.parametrize("bin_width,rf", [(0.6, 9), (1.0, 5), (0.25, 20)])
def test_receptive_field_reaches_envelope(bin_width, rf):
    model = build_isotopenet_lite(512, bin_width=bin_width)
    assert receptive_field(model.layers) >= rf


def test_too_short_input_rejected():
    with pytest.raises(ValueError):
        build_isotopenet_lite(100)
    with pytest.raises(ValueError):
        build_isotopenet_lite(300, bin_width=0.01)


def test_param_shape_validation():
    model = tiny_model(64)
    bad = [p if p is None else dict(p) for p in model.params]
    bad[0]["W"] = bad[0]["W"][:, :, :2]
    with pytest.raises(ValueError, match="layer 0 W"):
        ModelParams(model.layers, bad, 64, 2)
    with pytest.raises(ValueError, match="unknown layer kind"):
        LayerSpec("maxpool")


def test_tic_normalize():
    np.testing.assert_array_equal(tic_normalize([2.0, 2.0]), [0.5, 0.5])
    x = tic_normalize(np.arange(1.0, 9.0))
    np.testing.assert_allclose(tic_normalize(x), x, rtol=0, atol=1e-12)
    s = tic_normalize(Spectrum([1.0, 3.0], 900.0, 1.0))
    assert isinstance(s, Spectrum) and s.mz_start == 900.0
    np.testing.assert_array_equal(s.intensities, [0.25, 0.75])
    with pytest.raises(ValueError):
        tic_normalize([0.0, 0.0])


def test_checkpoint_round_trip_is_exact(tmp_path):
    model = build_isotopenet_lite(256, seed=9)
    save_checkpoint(tmp_path / "m.json", model, {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "m.json")
    assert meta == {"note": "x"}
    for a, b in zip(model.arrays(), back.arrays()):
        assert a.tobytes() == b.tobytes()
    assert back.layers == model.layers and back.input_scale == model.input_scale
    d = json.loads((tmp_path / "m.json").read_text())
    d["format"] = "other"
    (tmp_path / "bad.json").write_text(json.dumps(d))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.json")


def test_describe_mentions_relu_only():
    text = build_isotopenet_lite(256).describe()
    assert "ReLU-only: True" in text
