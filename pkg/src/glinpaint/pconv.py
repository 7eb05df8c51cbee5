"""Binary validity masks, partial convolution and the mask-update rule.

Mask convention: 1 marks a valid (known or already filled) pixel, 0 a hole.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import ConvSpec, Tensor4


class MaskPlane:
    """Binary (n, 1, h, w) validity map. A 2-D array is read as a single sample."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        a = np.asarray(bits)
        if a.ndim == 2:
            a = a[None, None]
        elif a.ndim == 3:
            a = a[:, None]
        if a.ndim != 4 or a.shape[1] != 1:
            raise T.ShapeError(f"mask must be (h,w), (n,h,w) or (n,1,h,w); got {np.shape(bits)}")
        if not np.isin(a, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        self.bits = a.astype(np.uint8)

    @classmethod
    def full(cls, h: int, w: int, n: int = 1) -> "MaskPlane":
        return cls(np.ones((n, 1, h, w), np.uint8))

    @property
    def n(self) -> int:
        return self.bits.shape[0]

    @property
    def h(self) -> int:
        return self.bits.shape[2]

    @property
    def w(self) -> int:
        return self.bits.shape[3]

    def plane(self, n: int | None = None, dtype=np.float32) -> np.ndarray:
        """Float copy; a single-sample mask is repeated to ``n`` samples when asked."""
        p = self.bits.astype(dtype)
        if n is not None and n != self.n:
            if self.n != 1:
                raise T.ShapeError(f"mask batch {self.n} vs {n}")
            p = np.repeat(p, n, axis=0)
        return p

    def hole_fraction(self) -> float:
        return 1.0 - float(self.bits.mean())

    def resized(self, h: int, w: int) -> "MaskPlane":
        """Nearest resampling by an integer factor."""
        if (h, w) == (self.h, self.w):
            return self
        if h > self.h:
            f = h // self.h
            if f * self.h != h or f * self.w != w:
                raise T.ShapeError(f"cannot upsample mask {self.h}x{self.w} to {h}x{w}")
            return MaskPlane(np.repeat(np.repeat(self.bits, f, axis=2), f, axis=3))
        f = self.h // h
        if f * h != self.h or f * w != self.w:
            raise T.ShapeError(f"cannot downsample mask {self.h}x{self.w} to {h}x{w}")
        return MaskPlane(self.bits[:, :, ::f, ::f])

    def __ge__(self, other: "MaskPlane") -> bool:
        return bool((self.bits >= other.bits).all())

    def __eq__(self, other) -> bool:
        return isinstance(other, MaskPlane) and np.array_equal(self.bits, other.bits)

    def __repr__(self) -> str:
        return f"MaskPlane(n={self.n}, h={self.h}, w={self.w}, holes={self.hole_fraction():.3f})"


def _window_sum(plane: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    p = np.pad(plane, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(p, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh = (plane.shape[2] + 2 * padding - kh) // stride + 1
    ow = (plane.shape[3] + 2 * padding - kw) // stride + 1
    return win[:, :, :oh, :ow].sum(axis=(4, 5))


def valid_counts(m: MaskPlane, kh: int, kw: int, stride: int, padding: int):
    """Per output location: (# valid pixels, # in-bounds pixels) under the kernel."""
    valid = _window_sum(m.bits.astype(np.int64), kh, kw, stride, padding)
    inb = _window_sum(np.ones((1, 1, m.h, m.w), np.int64), kh, kw, stride, padding)
    return valid, inb


def partial_conv(x: Tensor4, m: MaskPlane, spec: ConvSpec) -> Tensor4:
    """Masked convolution renormalized by the valid fraction of each window.

    Zero padding lies outside the image, so it counts neither as valid nor
    toward the window size: a window's scale is (in-bounds pixels) /
    (valid pixels). Windows whose in-bounds pixels are all holes output
    exactly 0, bias included; a window lying wholly in the padding has no
    holes and acts as in a plain conv. The mask is a constant of
    differentiation.
    """
    if (m.h, m.w) != (x.h, x.w):
        raise T.ShapeError(f"mask {m.h}x{m.w} vs input {x.h}x{x.w}")
    if x.c != spec.in_channels:
        raise T.ShapeError(f"partial_conv: {x.c} channels vs kernel {spec.in_channels}")
    kh, kw = spec.kernel_size
    valid, inb = valid_counts(m, kh, kw, spec.stride, spec.padding)
    hit = (valid > 0) | (inb == 0)
    ratio = np.where(valid > 0, inb / np.maximum(valid, 1), 0.0)
    y = T.conv2d(T.mul_plane(x, m.plane(x.n, x.dtype)), spec, use_bias=False)
    y = T.mul_plane(y, ratio)
    if spec.bias is not None:
        y = T.add_bias(y, spec.bias, plane=hit)
    return y


def update_mask(m: MaskPlane, kh: int = 3, kw: int = 3, stride: int = 1, padding: int = 1) -> MaskPlane:
    """A location becomes valid iff its window holds a valid pixel (or no image pixel at all)."""
    valid, inb = valid_counts(m, kh, kw, stride, padding)
    return MaskPlane(((valid > 0) | (inb == 0)).astype(np.uint8))


def pconv_step(x: Tensor4, m: MaskPlane, spec: ConvSpec) -> tuple[Tensor4, MaskPlane]:
    """Partial convolution together with its paired mask update."""
    kh, kw = spec.kernel_size
    return partial_conv(x, m, spec), update_mask(m, kh, kw, spec.stride, spec.padding)
