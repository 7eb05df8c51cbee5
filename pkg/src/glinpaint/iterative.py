"""Two-branch iterative inpainting over the working-resolution features."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .attention import feature_attention
from .pconv import MaskPlane, pconv_step
from .tensor import ConvSpec, Tensor4


@dataclass
class BranchWeights:
    """Two resolution-preserving 3x3 partial convs, each followed by batchnorm."""

    pconv1: ConvSpec
    pconv2: ConvSpec
    bn1: tuple[Tensor4, Tensor4]  # gamma, beta
    bn2: tuple[Tensor4, Tensor4]

    def __post_init__(self):
        for spec in (self.pconv1, self.pconv2):
            if spec.kernel_size != (3, 3) or spec.stride != 1 or spec.padding != 1:
                raise ValueError("branch partial convs must be 3x3, stride 1, pad 1")


@dataclass
class IterState:
    low: Tensor4
    high: Tensor4
    mask: MaskPlane
    tau: int = 0


def branch_forward(x: Tensor4, mask: MaskPlane, w: BranchWeights,
                   frozen_bn: bool = False) -> tuple[Tensor4, MaskPlane]:
    for spec, (gamma, beta) in ((w.pconv1, w.bn1), (w.pconv2, w.bn2)):
        x, mask = pconv_step(x, mask, spec)
        x = T.leaky_relu(T.batchnorm(x, gamma, beta, frozen=frozen_bn))
    return feature_attention(x), mask


def iterate_once(s: IterState, w_low: BranchWeights, w_high: BranchWeights,
                 frozen_bn: bool = False) -> IterState:
    """Advance both branches one step; they share one mask stream."""
    low, m_low = branch_forward(s.low, s.mask, w_low, frozen_bn)
    high, m_high = branch_forward(s.high, s.mask, w_high, frozen_bn)
    assert m_low == m_high  # identical kernel geometry
    return IterState(low, high, m_low, s.tau + 1)


def run_iterations(low0: Tensor4, high0: Tensor4, mask0: MaskPlane, n_iter: int,
                   w_low: BranchWeights, w_high: BranchWeights,
                   frozen_bn: bool = False) -> tuple[Tensor4, list[MaskPlane]]:
    """Returns F_cat = [low(1); high(1); ...; low(T); high(T)] and masks H(0)..H(T)."""
    if n_iter < 2:
        raise ValueError("need at least 2 iterations (reinpainting reads neighbours)")
    if low0.dims != high0.dims:
        raise T.ShapeError(f"low/high volumes differ: {low0.dims} vs {high0.dims}")
    state = IterState(low0, high0, mask0)
    parts, history = [], [mask0]
    for _ in range(n_iter):
        state = iterate_once(state, w_low, w_high, frozen_bn)
        parts += [state.low, state.high]
        history.append(state.mask)
    return T.concat(parts, axis=1), history


def fuse(cat: Tensor4, spec: ConvSpec) -> Tensor4:
    """3x3 conv over the concatenated iterations, then leaky ReLU."""
    if cat.c != spec.in_channels or spec.out_channels != spec.in_channels:
        raise T.ShapeError(f"fuse conv {spec.in_channels}->{spec.out_channels} on {cat.c} channels")
    return T.leaky_relu(T.conv2d(cat, spec))


def subvolume(f_int: Tensor4, tau: int, n_iter: int) -> Tensor4:
    """Sub-volume ``tau`` in 1..T of the fused features."""
    if not 1 <= tau <= n_iter:
        raise IndexError(f"sub-volume {tau} outside 1..{n_iter}")
    width = f_int.c // n_iter
    return T.slice_axis(f_int, 1, (tau - 1) * width, tau * width)
