import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mbnn.fixedpoint import (
    FixedPoint8,
    FixedPointError,
    dequantize,
    dequantize_array,
    quantize,
    quantize_array,
)


def reference_quantize(x):
    # independent scalar oracle: scale, round half away from zero, saturate
    scaled = x * 128
    r = math.floor(abs(scaled) + 0.5) * (1 if scaled >= 0 else -1)
    return max(-128, min(127, r))


@pytest.mark.parametrize("x, raw, value", [
    (0.5, 64, 0.5),
    (1.0, 127, 0.9921875),
    (0.3, 38, 0.296875),
])
def test_quantize_examples(x, raw, value):
    q = quantize(x)
    assert q.raw == raw == reference_quantize(x)
    assert dequantize(q) == value


@pytest.mark.parametrize("raw, value", [(0, 0.0), (-128, -1.0), (38, 0.296875)])
def test_dequantize_examples(raw, value):
    assert dequantize(FixedPoint8(raw)) == value


def test_half_rounds_away_from_zero():
    assert quantize(0.5 / 128).raw == 1
    assert quantize(-0.5 / 128).raw == -1
    assert quantize(1.5 / 128).raw == 2


@pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
def test_non_finite_rejected(bad):
    with pytest.raises(FixedPointError):
        quantize(bad)
    with pytest.raises(FixedPointError):
        quantize_array([0.1, bad])


def test_raw_range_enforced():
    with pytest.raises(ValueError):
        FixedPoint8(128)
    with pytest.raises(ValueError):
        FixedPoint8(-129)


def test_positive_one_saturates_asymmetrically():
    assert quantize(1.0).raw == 127
    assert quantize(-1.0).raw == -128


@given(st.floats(min_value=-1.0, max_value=127 / 128))
def test_round_trip_error_bound(x):
    assert abs(dequantize(quantize(x)) - x) <= 2**-8


@given(st.floats(min_value=-1e6, max_value=1e6), st.floats(min_value=-1e6, max_value=1e6))
def test_monotone(a, b):
    lo, hi = sorted((a, b))
    assert quantize(lo).raw <= quantize(hi).raw


@given(st.floats(min_value=-1e9, max_value=1e9))
def test_matches_reference(x):
    assert quantize(x).raw == reference_quantize(x)


def test_array_matches_scalar():
    x = np.random.default_rng(0).uniform(-2, 2, 1000)
    raw = quantize_array(x)
    assert raw.dtype == np.int8
    assert [int(r) for r in raw] == [quantize(v).raw for v in x]
    np.testing.assert_array_equal(dequantize_array(raw), raw / 128.0)
