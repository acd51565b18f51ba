import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qmlp_ids.quant import QuantSpec, dequantize, fake_quant, maxabs_scale, quantize, ste_mask

S4 = QuantSpec(4, True, 0.1)


def test_quantize_examples():
    assert quantize(0.0, S4) == 0
    assert quantize(0.34, S4) == 3
    assert quantize(5.0, S4) == 7
    assert quantize(-5.0, S4) == -8


def test_quantize_rounds_half_to_even():
    s = QuantSpec(8, True, 1.0)
    assert [quantize(x, s) for x in (0.5, 1.5, 2.5, -0.5, -1.5)] == [0, 2, 2, 0, -2]


def test_dequantize_examples():
    assert dequantize(0, S4) == 0.0
    assert dequantize(3, S4) == pytest.approx(0.3)
    assert dequantize(-8, QuantSpec(4, True, 0.25)) == -2.0


def test_fake_quant_example():
    assert fake_quant(0.34, S4) == pytest.approx(0.30)


def test_ste_out_of_range_is_zero():
    assert ste_mask(100 * S4.scale, S4) == 0.0
    assert ste_mask(0.3, S4) == 1.0


def test_ranges():
    assert (QuantSpec(4, True, 1).qmin, QuantSpec(4, True, 1).qmax) == (-8, 7)
    assert (QuantSpec(4, False, 1).qmin, QuantSpec(4, False, 1).qmax) == (0, 15)
    assert (QuantSpec(8, False, 1).qmin, QuantSpec(8, False, 1).qmax) == (0, 255)


@pytest.mark.parametrize("bad", [dict(bits=1, signed=True, scale=1.0),
                                 dict(bits=4, signed=True, scale=0.0),
                                 dict(bits=4, signed=True, scale=-1.0),
                                 dict(bits=4, signed=True, scale=math.inf)])
def test_invalid_spec(bad):
    with pytest.raises(ValueError):
        QuantSpec(**bad)


def test_maxabs_scale():
    w = np.array([[1.0, -1.0], [-1.0, 1.0]])
    assert maxabs_scale(w, 4) == pytest.approx(1 / 7)
    assert maxabs_scale(np.zeros((3, 3)), 4) == 1e-8


def test_array_quantize_dtype():
    q = quantize(np.array([0.04, 0.06, 10.0]), S4)
    assert q.dtype == np.int64 and q.tolist() == [0, 1, 7]


specs = st.builds(QuantSpec, st.integers(2, 12), st.booleans(),
                  st.floats(1e-4, 1e3, allow_nan=False, allow_infinity=False))


@given(specs, st.floats(-1e6, 1e6, allow_nan=False))
def test_quantize_saturates(spec, x):
    q = quantize(x, spec)
    assert spec.qmin <= q <= spec.qmax


@given(specs, st.floats(0, 1))
def test_round_trip_error_within_half_step(spec, u):
    x = spec.qmin * spec.scale + u * (spec.qmax - spec.qmin) * spec.scale
    assert abs(fake_quant(x, spec) - x) <= spec.scale / 2 * (1 + 1e-9)


@given(specs, st.floats(-1e6, 1e6, allow_nan=False))
def test_fake_quant_idempotent(spec, x):
    once = fake_quant(x, spec)
    assert fake_quant(once, spec) == once


@given(specs, st.data())
def test_grid_points_are_fixed(spec, data):
    code = data.draw(st.integers(spec.qmin, spec.qmax))
    x = dequantize(code, spec)
    assert quantize(x, spec) == code
    assert fake_quant(x, spec) == x


@given(specs, st.floats(-1e6, 1e6, allow_nan=False))
def test_ste_mask_matches_clip_range(spec, x):
    inside = spec.qmin * spec.scale <= x <= spec.qmax * spec.scale
    assert ste_mask(x, spec) == (1.0 if inside else 0.0)
