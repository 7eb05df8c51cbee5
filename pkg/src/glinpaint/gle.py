"""Gaussian/Laplacian pyramid operators and the learned GLE feature extractor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .pconv import MaskPlane
from .tensor import ConvSpec, Tensor4

GAUSS3 = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 16.0

PYRAMID_LEVELS = 5


def gaussian_blur3(x: Tensor4) -> Tensor4:
    """Fixed depthwise 3x3 binomial blur, stride 1, reflect padding of 1.

    Reflect padding keeps constants constant at the border; size-1 axes
    fall back to edge replication.
    """
    n, c, h, w = x.dims
    xp = T.pad(x, 1, 1, 1, 1, mode="reflect")
    k = Tensor4(GAUSS3.reshape(1, 1, 3, 3), dtype=x.dtype)
    y = T.conv2d(T.reshape(xp, (n * c, 1, h + 2, w + 2)), ConvSpec(k))
    return T.reshape(y, (n, c, h, w))


def _pad_even(x: Tensor4) -> Tensor4:
    bottom, right = x.h % 2, x.w % 2
    if bottom or right:
        return T.pad(x, 0, bottom, 0, right, mode="reflect")
    return x


def gaussian_level(image: Tensor4) -> Tensor4:
    """Blur, then keep even rows and columns. Odd sizes are reflect-padded first."""
    return T.downsample_nearest(gaussian_blur3(_pad_even(image)), 2)


def _crop_to(x: Tensor4, h: int, w: int) -> Tensor4:
    if x.h != h:
        x = T.slice_axis(x, 2, 0, h)
    if x.w != w:
        x = T.slice_axis(x, 3, 0, w)
    return x


def laplacian_level(image: Tensor4, coarse: Tensor4) -> Tensor4:
    """Residual ``image - up(coarse)``, held in float64.

    For float32 levels the wider residual makes ``laplacian_collapse`` give
    back ``image`` bit for bit: the float64 round-off is far below half a
    float32 ulp, so the final rounding lands on the original value.
    """
    up = T.upsample_nearest(T.cast(coarse, np.float64), 2)
    if up.h < image.h or up.w < image.w:
        raise T.ShapeError(f"coarse level {coarse.dims} too small for {image.dims}")
    return T.sub(T.cast(image, np.float64), _crop_to(up, image.h, image.w))


def laplacian_collapse(residual: Tensor4, coarse: Tensor4) -> Tensor4:
    """``residual + up(coarse)`` in the residual's precision, returned in the coarse level's."""
    up = T.upsample_nearest(T.cast(coarse, residual.dtype), 2)
    return T.cast(T.add(residual, _crop_to(up, residual.h, residual.w)), coarse.dtype)


# ---------------------------------------------------------------- learned stage


@dataclass
class GLEWeights:
    """``conv_gs``: c -> 2c, 7x7, stride 2, pad 3. ``conv_up``: 2c -> c, 7x7, stride 1, pad 3."""

    conv_gs: ConvSpec
    conv_up: ConvSpec

    def __post_init__(self):
        c = self.conv_gs.in_channels
        if self.conv_gs.out_channels != 2 * c:
            raise T.ShapeError("conv_gs must double the channel count")
        if (self.conv_up.in_channels, self.conv_up.out_channels) != (2 * c, c):
            raise T.ShapeError("conv_up must map 2c back to c channels")


def gle_forward(prev: Tensor4, w: GLEWeights, ablate: bool = False) -> tuple[Tensor4, Tensor4]:
    """One GLE module: returns (difference features, smoothed half-resolution stream).

    With ``ablate`` the blur and the upsample/subtract are stripped: the two
    convolutions are chained directly and their output is the level feature.
    """
    if prev.c != w.conv_gs.in_channels:
        raise T.ShapeError(f"GLE input has {prev.c} channels, weights expect {w.conv_gs.in_channels}")
    down = T.conv2d(prev, w.conv_gs)
    if ablate:
        return T.conv2d(down, w.conv_up), down
    nxt = gaussian_blur3(down)
    up = T.upsample_nearest(nxt, 2)
    back = T.conv2d(up, w.conv_up)
    if back.dims != prev.dims:
        raise T.ShapeError(f"GLE subtraction: {prev.dims} vs {back.dims}")
    return T.sub(prev, back), nxt


@dataclass
class FeaturePyramid:
    levels: list[Tensor4]  # F1..F6
    level_masks: list[MaskPlane]

    def __getitem__(self, i: int) -> Tensor4:
        """1-based level access: ``p[1]`` is F1."""
        return self.levels[i - 1]


@dataclass
class PyramidWeights:
    stem: ConvSpec  # 7 -> c0, 3x3, stride 1, pad 1
    modules: list[GLEWeights]  # five
    proj: list[ConvSpec]  # six 1x1 projections to the working width


def extract_pyramid(image: Tensor4, struct_image: Tensor4, mask: MaskPlane,
                    w: PyramidWeights, ablate_gle: bool = False) -> FeaturePyramid:
    """Stem conv + ReLU, then five chained GLE modules.

    Hole pixels of both images are zeroed; the mask rides along as a 7th
    input channel.
    """
    n, _, h, wd = image.dims
    if struct_image.dims != image.dims or (mask.h, mask.w) != (h, wd):
        raise T.ShapeError("image, structure image and mask must share spatial dims")
    if h % 32 or wd % 32:
        raise T.ShapeError(f"spatial dims {h}x{wd} must be divisible by 32")
    if len(w.modules) != PYRAMID_LEVELS:
        raise ValueError(f"expected {PYRAMID_LEVELS} GLE modules")
    plane = mask.plane(n)
    x = T.concat([T.mul_plane(image, plane), T.mul_plane(struct_image, plane),
                  Tensor4(np.asarray(plane, dtype=image.dtype))], axis=1)
    stream = T.relu(T.conv2d(x, w.stem))
    levels = []
    for gw in w.modules:
        f, stream = gle_forward(stream, gw, ablate=ablate_gle)
        levels.append(f)
    levels.append(stream)
    masks = [mask.resized(f.h, f.w) for f in levels]
    return FeaturePyramid(levels, masks)


def split_pyramid(p: FeaturePyramid, proj: list[ConvSpec], mask: MaskPlane,
                  work_hw: tuple[int, int]) -> tuple[Tensor4, Tensor4, MaskPlane]:
    """Project each level with a 1x1 conv, resample to ``work_hw``, concat F1-F3 and F4-F6."""
    hw, ww = work_hw
    feats = [T.resample_nearest(T.conv2d(f, spec), hw, ww) for f, spec in zip(p.levels, proj)]
    low = T.concat(feats[:3], axis=1)
    high = T.concat(feats[3:], axis=1)
    return low, high, mask.resized(hw, ww)
