import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qmlp_ids.qnn_int import (
    AccumulatorBound,
    IntMlp,
    LoweredModelError,
    NotCalibrated,
    OutputLayer,
    ThresholdLayer,
    accumulator_bounds,
    derive_thresholds,
    interval_bounds,
    load_lowered,
    lower,
    requantize_reference,
    save_lowered,
    verify_equivalence,
)
from qmlp_ids.qnn_train import DimensionMismatch, FakeQuantMlp, calibrate_scales
from qmlp_ids.quant import QuantSpec

ACT4 = QuantSpec(4, False, 0.1)


def random_model(seed, dims=(40, 64, 32, 2), bits=4):
    rng = np.random.default_rng(seed)
    m = FakeQuantMlp.init(list(dims), seed=seed, weight_bits=bits, act_bits=bits)
    m.biases = [rng.normal(0, 0.5, b.shape) for b in m.biases]
    calibrate_scales(m, rng.integers(0, 256, (256, dims[0])))
    return m


def rank_codes(thresholds, acc):
    return (np.asarray(acc)[:, None] >= np.asarray(thresholds)[None, :]).sum(axis=1)


# -- threshold derivation ----------------------------------------------------

def test_aligned_scales_give_unit_thresholds():
    t = derive_thresholds(0.1, np.zeros(1), ACT4, np.array([-20]), np.array([40]))
    assert t[0].tolist() == list(range(1, 16))
    acc = np.arange(-20, 41)
    assert rank_codes(t[0], acc).tolist() == np.clip(acc, 0, 15).tolist()


def test_dead_neuron_thresholds_saturate():
    t = derive_thresholds(0.01, np.array([-100.0]), ACT4, np.array([-50]), np.array([70]))
    assert t[0].tolist() == [71] * 15


def test_always_saturated_neuron():
    t = derive_thresholds(0.01, np.array([100.0]), ACT4, np.array([-50]), np.array([70]))
    assert t[0].tolist() == [-50] * 15


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_thresholds_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = 4
    combined = float(rng.uniform(1e-4, 0.05))
    bias = rng.normal(0, 1.0, n)
    act = QuantSpec(int(rng.integers(2, 6)), False, float(rng.uniform(0.01, 0.3)))
    lo = rng.integers(-3000, 0, n)
    hi = rng.integers(1, 3000, n)
    t = derive_thresholds(combined, bias, act, lo, hi)
    assert t.shape == (n, act.qmax)
    assert np.all(np.diff(t, axis=1) >= 0)
    for j in range(n):
        acc = np.arange(lo[j], hi[j] + 1)
        expected = requantize_reference(acc, combined, bias[j], act)
        assert np.array_equal(rank_codes(t[j], acc), expected)


def test_rank_definition():
    thresholds = np.array([[3, 5, 9] + [100] * 12])
    layer = ThresholdLayer(np.array([[1]]), thresholds)
    m = IntMlp([1, 1, 2], QuantSpec(8, False, 1 / 255), 4, 4, [layer],
               OutputLayer(np.array([[1], [0]]), np.zeros(2, dtype=np.int64), 1.0))
    _, logits = m.infer([5])
    assert logits.tolist() == [2, 0]  # two thresholds <= 5


# -- lowering ----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_hidden_codes_bit_exact(seed):
    m = random_model(seed)
    im = lower(m)
    rng = np.random.default_rng(100 + seed)
    codes = rng.integers(0, 256, (2000, 40))
    _, steps = m._run(codes, codes_in=True, cache=True)
    x = codes
    for li, layer in enumerate(im.hidden):
        acc = x @ layer.weight.T
        x = np.stack([rank_codes(layer.thresholds[j], acc[:, j]) for j in range(acc.shape[1])], 1)
        float_codes = np.rint(steps[li + 1][0] / m.act_scales[li])
        assert np.array_equal(x, float_codes)


@pytest.mark.parametrize("bits", [2, 3, 4, 8])
def test_lowered_classes_equal_fake_quant(bits):
    m = random_model(bits, bits=bits)
    report = verify_equivalence(m, lower(m), 5000, seed=bits)
    assert report.mismatches == 0
    assert report.max_logit_error < 1e-9


def test_infer_matches_batch():
    m = random_model(3)
    im = lower(m)
    codes = np.random.default_rng(0).integers(0, 256, (300, 40))
    cls, logits = im.infer_batch(codes)
    for i in range(len(codes)):
        c, l = im.infer(codes[i])
        assert c == cls[i] and np.array_equal(l, logits[i])


def test_zero_input_zero_bias_predicts_normal():
    m = FakeQuantMlp.init(seed=0)
    m.biases = [np.zeros_like(b) for b in m.biases]
    calibrate_scales(m, np.random.default_rng(0).integers(0, 256, (64, 40)))
    im = lower(m)
    cls, logits = im.infer(np.zeros(40, dtype=np.int64))
    assert logits.tolist() == [0, 0] and cls == 0


def test_infer_dimension_mismatch():
    im = lower(random_model(0))
    with pytest.raises(DimensionMismatch):
        im.infer(np.zeros(39, dtype=np.int64))
    with pytest.raises(DimensionMismatch):
        im.infer_batch(np.zeros((3, 41), dtype=np.int64))


def test_lower_requires_calibration():
    with pytest.raises(NotCalibrated):
        lower(FakeQuantMlp.init(seed=0))
    with pytest.raises(NotCalibrated):
        lower(FakeQuantMlp.init(seed=0, quantized=False))


def test_lowered_invariants():
    im = lower(random_model(1))
    for layer in im.hidden:
        assert layer.thresholds.shape[1] == 15
        assert np.all(np.diff(layer.thresholds, axis=1) >= 0)
        assert layer.weight.min() >= -8 and layer.weight.max() <= 7
    assert im.output.output_scale > 0


# -- accumulator bounds ------------------------------------------------------

def test_single_weight_bound():
    lo, hi = interval_bounds(np.array([[7]]), 0, 255)
    assert (lo.tolist(), hi.tolist()) == ([0], [1785])


def test_mixed_sign_bound():
    lo, hi = interval_bounds(np.array([[7, -8, 3]]), 0, 255)
    assert lo.tolist() == [-8 * 255] and hi.tolist() == [10 * 255]


def test_default_model_accumulators_small():
    im = lower(random_model(2))
    bounds = accumulator_bounds(im)
    # worst case: 40 inputs * 8 * 255 = 81600 for layer 0
    assert all(max(abs(b.lo), abs(b.hi)) < 2**21 for b in bounds)
    assert all(b.fits(64) and b.fits(32) for b in bounds)


def test_reachable_accumulators_inside_bounds():
    m = random_model(4)
    im = lower(m)
    bounds = accumulator_bounds(im)
    rng = np.random.default_rng(0)
    # include the extreme corners of the input box
    codes = np.vstack([rng.integers(0, 256, (2000, 40)), np.zeros((1, 40)), np.full((1, 40), 255)])
    x = codes
    for b, layer in zip(bounds, im.hidden):
        acc = x @ layer.weight.T
        assert acc.min() >= b.lo and acc.max() <= b.hi
        x = (acc[:, :, None] >= layer.thresholds[None]).sum(axis=2)
    out = x @ im.output.weight.T + im.output.bias
    assert out.min() >= bounds[-1].lo and out.max() <= bounds[-1].hi


def test_bound_fits():
    assert AccumulatorBound(-(2**63), 2**63 - 1).fits(64)
    assert not AccumulatorBound(0, 2**31).fits(32)


@given(st.integers(-(2**20), 2**20), st.integers(-(2**20), 2**20),
       st.floats(1e-6, 1e3, allow_nan=False))
def test_argmax_invariant_under_positive_scale(a, b, scale):
    logits = np.array([a, b])
    assert (logits[1] > logits[0]) == (logits[1] * scale > logits[0] * scale)


# -- equivalence checker -----------------------------------------------------

def test_verify_empty():
    m = random_model(0)
    r = verify_equivalence(m, lower(m), 0)
    assert r.passed and r.samples == 0 and r.mismatches == 0


def test_verify_detects_corrupted_thresholds():
    m = random_model(5)
    im = lower(m)
    # force one neuron per hidden layer to be always saturated
    for layer in im.hidden:
        j = int(np.argmax(np.abs(im.output.weight).sum(axis=0))) if layer is im.hidden[-1] else 0
        layer.thresholds[j, :] = -(10**9)
    r = verify_equivalence(m, im, 20000, seed=1)
    assert r.mismatches >= 1
    assert len(r.witnesses) >= 1 and len(r.witnesses[0]) == 40


# -- file format -------------------------------------------------------------

def test_lowered_round_trip(tmp_path):
    m = random_model(6)
    im = lower(m, source_sha256="ab" * 32)
    p = tmp_path / "low.json"
    save_lowered(im, p)
    back = load_lowered(p)
    codes = np.random.default_rng(1).integers(0, 256, (500, 40))
    assert np.array_equal(back.infer_batch(codes)[1], im.infer_batch(codes)[1])
    doc = json.loads(p.read_text())
    assert doc["format"] == "qmlp-ids/lowered" and doc["version"] == 1
    assert doc["source_sha256"] == "ab" * 32
    assert doc["layers"][-1]["kind"] == "output"
    assert len(doc["accumulator_bounds"]) == 3


@pytest.mark.parametrize("mutate", [
    lambda d: d["layers"][0]["thresholds"][0].reverse(),
    lambda d: d["layers"][0]["weight"][0].__setitem__(0, 9),
    lambda d: d["layers"][-1].update(output_scale=0.0),
    lambda d: d["layers"][0].update(kind="output"),
    lambda d: d.update(version=2),
    lambda d: d["layers"][0]["thresholds"][0].pop(),
])
def test_lowered_validation(tmp_path, mutate):
    im = lower(random_model(7))
    doc = im.to_dict()
    mutate(doc)
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(LoweredModelError):
        load_lowered(p)
