import json
from pathlib import Path

import numpy as np
import pytest

from mbnn.im2col import (
    ConfigurationError,
    ConvLayerSpec,
    DimensionError,
    fold_filters,
    fold_output,
    output_extent,
    unfold_output,
    unroll_filters,
    unroll_input,
    unroll_input_adjoint,
)

GOLDEN = Path(__file__).parent / "golden" / "im2col_order.json"


def direct_conv(x, w, padding, stride):
    """Nested-loop cross-correlation oracle: x (C, H, W), w (f, C, k2, k3)."""
    c_in, h, wd = x.shape
    f, _, k2, k3 = w.shape
    xp = np.zeros((c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, padding : padding + h, padding : padding + wd] = x
    o1 = (h - k2 + 2 * padding) // stride + 1
    o2 = (wd - k3 + 2 * padding) // stride + 1
    out = np.zeros((f, o1, o2))
    for j in range(f):
        for oy in range(o1):
            for ox in range(o2):
                acc = 0.0
                for c in range(c_in):
                    for r in range(k2):
                        for s in range(k3):
                            acc += xp[c, oy * stride + r, ox * stride + s] * w[j, c, r, s]
                out[j, oy, ox] = acc
    return out


def lowered_conv(x, w, spec):
    out_shape = spec.output_shape(*x.shape[-2:])
    return fold_output(unroll_input(x, spec) @ unroll_filters(w), out_shape, spec.filters)


@pytest.mark.parametrize("size, k, p, s, expected", [(3, 2, 0, 1, 2), (28, 2, 1, 1, 29), (14, 2, 1, 1, 15)])
def test_output_extent(size, k, p, s, expected):
    assert output_extent(size, k, p, s) == expected


def test_non_integer_extent_is_configuration_error():
    with pytest.raises(ConfigurationError):
        output_extent(4, 2, 0, 3)
    with pytest.raises(ConfigurationError):
        unroll_input(np.zeros((1, 4, 4)), ConvLayerSpec(filters=1, padding=0, stride=3))


def test_three_by_three_geometry():
    spec = ConvLayerSpec(filters=2, padding=0)
    d_m = unroll_input(np.arange(9.0).reshape(1, 3, 3), spec)
    assert d_m.shape == (4, 4)
    np.testing.assert_array_equal(d_m[0], [0, 1, 3, 4])
    np.testing.assert_array_equal(d_m[3], [4, 5, 7, 8])
    assert np.all(unroll_input(np.ones((1, 3, 3)), spec) == 1)


def test_mnist_conv1_geometry():
    assert unroll_input(np.zeros((1, 28, 28)), ConvLayerSpec(filters=16)).shape == (841, 4)


def test_unroll_filters_shapes():
    assert unroll_filters(np.ones((2, 1, 2, 2))).shape == (4, 2)
    np.testing.assert_array_equal(unroll_filters(np.ones((1, 1, 2, 2))), np.ones((4, 1)))
    assert unroll_filters(np.ones((16, 1, 2, 2))).shape == (4, 16)


def test_filter_column_order():
    w = np.arange(16.0).reshape(2, 2, 2, 2)
    f_m = unroll_filters(w)
    np.testing.assert_array_equal(f_m[:, 1], np.arange(8.0, 16.0))
    np.testing.assert_array_equal(fold_filters(f_m, ConvLayerSpec(filters=2, in_channels=2)), w)


def test_fold_output():
    assert fold_output(np.zeros((4, 2)), (2, 2), 2).shape == (2, 2, 2)
    assert not fold_output(np.zeros((4, 2)), (2, 2), 2).any()
    with pytest.raises(DimensionError):
        fold_output(np.zeros((5, 2)), (2, 2), 2)
    o = np.random.default_rng(0).normal(size=(3, 6, 4))
    np.testing.assert_array_equal(unfold_output(fold_output(o, (2, 3), 4)), o)


def test_random_small_case_matches_direct():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 6))
    w = np.where(rng.random((3, 2, 2, 2)) > 0.5, 1.0, -1.0)
    spec = ConvLayerSpec(filters=3, in_channels=2, padding=1)
    np.testing.assert_allclose(lowered_conv(x, w, spec), direct_conv(x, w, 1, 1), rtol=0, atol=1e-12)


def test_zero_input_gives_zero_output():
    w = np.where(np.random.default_rng(2).random((4, 1, 2, 2)) > 0.5, 1.0, -1.0)
    assert not lowered_conv(np.zeros((1, 6, 6)), w, ConvLayerSpec(filters=4)).any()


def test_batched_matches_unbatched():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 2, 8, 8))
    spec = ConvLayerSpec(filters=1, in_channels=2, stride=2)
    batched = unroll_input(x, spec)
    for i in range(3):
        np.testing.assert_array_equal(batched[i], unroll_input(x[i], spec))


def test_linear_in_input():
    rng = np.random.default_rng(4)
    spec = ConvLayerSpec(filters=1, in_channels=3)
    a, b = rng.normal(size=(2, 3, 5, 5))
    np.testing.assert_allclose(unroll_input(2 * a - 3 * b, spec),
                               2 * unroll_input(a, spec) - 3 * unroll_input(b, spec), atol=1e-12)


def test_adjoint_identity():
    # <unroll(x), y> == <x, adjoint(y)> for random x, y
    rng = np.random.default_rng(5)
    for padding, stride, size in ((0, 1, 5), (1, 1, 6), (1, 2, 6), (0, 2, 6)):
        spec = ConvLayerSpec(filters=1, in_channels=2, padding=padding, stride=stride)
        x = rng.normal(size=(2, size, size))
        cols = unroll_input(x, spec)
        y = rng.normal(size=cols.shape)
        lhs = (cols * y).sum()
        rhs = (x * unroll_input_adjoint(y, spec, size, size)).sum()
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_golden_ordering():
    """Row/column ordering of D_m and F_m is part of the crossbar row assignment contract."""
    golden = json.loads(GOLDEN.read_text())
    spec = ConvLayerSpec(filters=2, in_channels=2, padding=1, stride=1)
    x = np.arange(18.0).reshape(2, 3, 3)
    w = np.arange(16.0).reshape(2, 2, 2, 2)
    assert unroll_input(x, spec).tolist() == golden["d_m"]
    assert unroll_filters(w).tolist() == golden["f_m"]
