import numpy as np
import pytest

from glinpaint import tensor as T
from glinpaint.iterative import BranchWeights, fuse, iterate_once, IterState, run_iterations, subvolume
from glinpaint.pconv import MaskPlane, update_mask
from glinpaint.tensor import ConvSpec, Tensor4


def branch(rng, c, zero=False):
    def conv():
        w = np.zeros((c, c, 3, 3)) if zero else rng.normal(0, 0.3, (c, c, 3, 3))
        return ConvSpec(Tensor4(w), None, 1, 1)

    def bn():
        return Tensor4(np.ones((1, c, 1, 1))), Tensor4(np.zeros((1, c, 1, 1)))

    return BranchWeights(conv(), conv(), bn(), bn())


def hole_mask(size, r):
    bits = np.ones((size, size), np.uint8)
    c = size // 2
    bits[c - r + 1 : c + r, c - r + 1 : c + r] = 0
    return MaskPlane(bits)


def feats(rng, c, size, n=1):
    return Tensor4(rng.standard_normal((n, c, size, size)))


def test_all_valid_masks_stay_full():
    rng = np.random.default_rng(0)
    full = MaskPlane.full(8, 8)
    _, hist = run_iterations(feats(rng, 2, 8), feats(rng, 2, 8), full, 3, branch(rng, 2), branch(rng, 2))
    assert len(hist) == 4 and all(m == full for m in hist)


def test_zero_weights_give_zero_features():
    rng = np.random.default_rng(1)
    cat, _ = run_iterations(feats(rng, 3, 8), feats(rng, 3, 8), hole_mask(8, 2), 2,
                            branch(rng, 3, zero=True), branch(rng, 3, zero=True))
    assert not cat.data.any()


def test_radius_two_hole_closes_after_one_iteration():
    # two partial convs per iteration, each closing one ring
    rng = np.random.default_rng(2)
    m0 = hole_mask(12, 2)
    _, hist = run_iterations(feats(rng, 2, 12), feats(rng, 2, 12), m0, 3, branch(rng, 2), branch(rng, 2))
    assert hist[1] == update_mask(update_mask(m0))
    assert hist[1].bits.all()


def test_output_channels_and_monotone_history():
    rng = np.random.default_rng(3)
    c, n_iter = 4, 5
    m0 = hole_mask(16, 7)
    cat, hist = run_iterations(feats(rng, c, 16, n=2), feats(rng, c, 16, n=2), MaskPlane(np.repeat(m0.bits, 2, 0)),
                               n_iter, branch(rng, c), branch(rng, c))
    assert cat.dims == (2, 2 * n_iter * c, 16, 16)
    fill = [m.bits.sum() for m in hist]
    assert fill == sorted(fill) and fill[0] < fill[-1]
    for a, b in zip(hist, hist[1:]):
        assert (b.bits >= a.bits).all()


def test_deterministic():
    rng = np.random.default_rng(4)
    args = (feats(rng, 2, 8), feats(rng, 2, 8), hole_mask(8, 3), 3, branch(rng, 2), branch(rng, 2))
    a, _ = run_iterations(*args)
    b, _ = run_iterations(*args)
    assert np.array_equal(a.data, b.data)


def test_iterate_once_advances_tau_and_shares_mask():
    rng = np.random.default_rng(5)
    s = iterate_once(IterState(feats(rng, 2, 8), feats(rng, 2, 8), hole_mask(8, 3)), branch(rng, 2), branch(rng, 2))
    assert s.tau == 1 and s.mask == update_mask(update_mask(hole_mask(8, 3)))


def test_rejects_bad_inputs():
    rng = np.random.default_rng(6)
    with pytest.raises(ValueError):
        run_iterations(feats(rng, 2, 8), feats(rng, 2, 8), hole_mask(8, 2), 1, branch(rng, 2), branch(rng, 2))
    with pytest.raises(T.ShapeError):
        run_iterations(feats(rng, 2, 8), feats(rng, 3, 8), hole_mask(8, 2), 2, branch(rng, 2), branch(rng, 3))
    with pytest.raises(ValueError):
        BranchWeights(ConvSpec(Tensor4.zeros((2, 2, 5, 5)), None, 1, 2), branch(rng, 2).pconv2,
                      branch(rng, 2).bn1, branch(rng, 2).bn2)


def test_fuse_zero_weights_and_shape():
    cat = Tensor4(np.random.default_rng(7).standard_normal((1, 6, 5, 5)))
    out = fuse(cat, ConvSpec(Tensor4.zeros((6, 6, 3, 3)), Tensor4.zeros((1, 6, 1, 1)), 1, 1))
    assert out.dims == cat.dims and not out.data.any()
    with pytest.raises(T.ShapeError):
        fuse(cat, ConvSpec(Tensor4.zeros((4, 6, 3, 3)), None, 1, 1))


def test_fuse_identity_kernel_and_subvolume_partition():
    rng = np.random.default_rng(8)
    cat = Tensor4(np.abs(rng.standard_normal((1, 6, 4, 4))))
    k = np.zeros((6, 6, 3, 3))
    for i in range(6):
        k[i, i, 1, 1] = 1.0
    out = fuse(cat, ConvSpec(Tensor4(k), None, 1, 1))
    np.testing.assert_allclose(out.data, cat.data, atol=1e-6)
    parts = [subvolume(out, t, 3) for t in (1, 2, 3)]
    assert all(p.c == 2 for p in parts)
    np.testing.assert_array_equal(T.concat(parts, axis=1).data, out.data)
    with pytest.raises(IndexError):
        subvolume(out, 0, 3)
