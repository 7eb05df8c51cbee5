import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glinpaint import tensor as T
from glinpaint.pconv import MaskPlane, partial_conv, pconv_step, update_mask, valid_counts
from glinpaint.tensor import ConvSpec, ShapeError, Tensor4

from oracles import dilate_loops


def square_hole(size, r):
    """size x size valid plane with a centred hole of inradius r (side 2r - 1)."""
    bits = np.ones((size, size), np.uint8)
    c = size // 2
    bits[c - r + 1 : c + r, c - r + 1 : c + r] = 0
    return MaskPlane(bits)


def closing_steps(m: MaskPlane) -> int:
    steps = 0
    while not m.bits.all():
        m = update_mask(m)
        steps += 1
    return steps


# ---------------------------------------------------------------- mask type


def test_mask_validation_and_views():
    with pytest.raises(ValueError):
        MaskPlane(np.full((4, 4), 2))
    with pytest.raises(ShapeError):
        MaskPlane(np.ones((1, 2, 4, 4)))
    m = MaskPlane(np.eye(4, dtype=np.uint8))
    assert (m.n, m.h, m.w) == (1, 4, 4)
    assert m.plane(3).shape == (3, 1, 4, 4)
    assert m.hole_fraction() == 0.75
    assert m.resized(8, 8).resized(4, 4) == m
    with pytest.raises(ShapeError):
        m.resized(6, 6)


# ---------------------------------------------------------------- partial conv


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.sampled_from([1, 3, 5]), stride=st.integers(1, 2),
       pad=st.integers(0, 2))
def test_all_valid_equals_conv2d(seed, k, stride, pad):
    rng = np.random.default_rng(seed)
    x = Tensor4(rng.standard_normal((2, 3, 9, 8)))
    spec = ConvSpec(Tensor4(rng.standard_normal((4, 3, k, k))), Tensor4(rng.standard_normal((1, 4, 1, 1))),
                    stride, pad)
    y = partial_conv(x, MaskPlane.full(9, 8, n=2), spec)
    assert np.abs(y.data - T.conv2d(x, spec).data).max() < 1e-6


def test_fully_invalid_window_outputs_zero_not_bias():
    x = Tensor4(np.ones((1, 1, 5, 5)))
    bits = np.ones((5, 5), np.uint8)
    bits[1:4, 1:4] = 0
    spec = ConvSpec(Tensor4.ones((1, 1, 3, 3)), Tensor4(np.full((1, 1, 1, 1), 0.7)), 1, 0)
    y = partial_conv(x, MaskPlane(bits), spec)
    # the centre 3x3 window is all hole
    assert y.data[0, 0, 1, 1] == 0.0
    assert y.data[0, 0, 0, 0] == pytest.approx(9.0 + 0.7)


def test_three_of_nine_valid_renormalizes_to_nine():
    x = Tensor4(np.ones((1, 1, 3, 3)))
    bits = np.zeros((3, 3), np.uint8)
    bits[0, 0] = bits[1, 2] = bits[2, 1] = 1
    y = partial_conv(x, MaskPlane(bits), ConvSpec(Tensor4.ones((1, 1, 3, 3)), Tensor4.zeros((1, 1, 1, 1))))
    assert y.dims == (1, 1, 1, 1)
    assert y.item() == pytest.approx(9.0, abs=1e-6)


def test_bias_is_added_unscaled():
    x = Tensor4(np.full((1, 1, 3, 3), 2.0))
    bits = np.zeros((3, 3), np.uint8)
    bits[1, 1] = 1
    y = partial_conv(x, MaskPlane(bits), ConvSpec(Tensor4.ones((1, 1, 3, 3)), Tensor4(np.full((1, 1, 1, 1), 0.5))))
    assert y.item() == pytest.approx(2.0 * 9 + 0.5)


def test_hole_values_do_not_leak():
    rng = np.random.default_rng(0)
    bits = (rng.random((6, 6)) < 0.5).astype(np.uint8)
    spec = ConvSpec(Tensor4(rng.standard_normal((2, 2, 3, 3))), Tensor4(rng.standard_normal((1, 2, 1, 1))), 1, 1)
    a = Tensor4(rng.standard_normal((1, 2, 6, 6)))
    b = Tensor4(np.where(bits == 1, a.data, 123.0))
    np.testing.assert_array_equal(partial_conv(a, MaskPlane(bits), spec).data,
                                  partial_conv(b, MaskPlane(bits), spec).data)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), alpha=st.floats(0.1, 10.0))
def test_scale_invariance_without_bias(seed, alpha):
    rng = np.random.default_rng(seed)
    x = Tensor4(rng.standard_normal((1, 2, 5, 5)), dtype=np.float64)
    m = MaskPlane((rng.random((5, 5)) < 0.5).astype(np.uint8))
    spec = ConvSpec(Tensor4(rng.standard_normal((3, 2, 3, 3)), dtype=np.float64), None, 1, 1)
    y1 = partial_conv(x, m, spec).data
    y2 = partial_conv(Tensor4(alpha * x.data), m, spec).data
    np.testing.assert_allclose(y2, alpha * y1, rtol=1e-9, atol=1e-12)


def test_partial_conv_errors():
    x = Tensor4.zeros((1, 2, 4, 4))
    with pytest.raises(ShapeError):
        partial_conv(x, MaskPlane.full(5, 5), ConvSpec(Tensor4.zeros((1, 2, 3, 3))))
    with pytest.raises(ShapeError):
        partial_conv(x, MaskPlane.full(4, 4), ConvSpec(Tensor4.zeros((1, 3, 3, 3))))


# ---------------------------------------------------------------- mask update


def test_update_examples():
    zeros = MaskPlane(np.zeros((5, 5), np.uint8))
    assert update_mask(zeros) == zeros
    ones = MaskPlane.full(5, 5)
    assert update_mask(ones) == ones
    bits = np.zeros((5, 5), np.uint8)
    bits[2, 2] = 1
    out = update_mask(MaskPlane(bits)).bits[0, 0]
    expect = np.zeros((5, 5), np.uint8)
    expect[1:4, 1:4] = 1
    np.testing.assert_array_equal(out, expect)


def test_valid_counts_exclude_padding():
    valid, inb = valid_counts(MaskPlane.full(3, 3), 3, 3, 1, 1)
    np.testing.assert_array_equal(inb[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])
    np.testing.assert_array_equal(valid, inb)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), p=st.floats(0.0, 1.0))
def test_update_is_monotone_and_matches_dilation(seed, p):
    bits = (np.random.default_rng(seed).random((9, 7)) < p).astype(np.uint8)
    out = update_mask(MaskPlane(bits)).bits[0, 0]
    assert (out >= bits).all()
    np.testing.assert_array_equal(out, dilate_loops(bits))


@pytest.mark.parametrize("r", range(1, 9))
def test_square_hole_closes_in_exactly_r_updates(r):
    m = square_hole(24, r)
    # oracle: count dilation rounds pixel by pixel
    bits, rounds = m.bits[0, 0], 0
    while not bits.all():
        bits = dilate_loops(bits)
        rounds += 1
    assert rounds == r
    assert closing_steps(m) == r


def test_pconv_step_pairs_output_and_mask():
    rng = np.random.default_rng(1)
    m = square_hole(8, 2)
    spec = ConvSpec(Tensor4(rng.standard_normal((2, 1, 3, 3))), None, 1, 1)
    y, m2 = pconv_step(Tensor4(rng.standard_normal((1, 1, 8, 8))), m, spec)
    assert m2 == update_mask(m)
    # locations still invalid after the update produced exact zeros
    assert not y.data[..., m2.bits[0, 0] == 0].any()
