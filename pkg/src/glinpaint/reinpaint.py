"""Reinpainting enhancement, fill-weighted feature merge, and image reconstruction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .iterative import subvolume
from .pconv import MaskPlane, pconv_step
from .tensor import ConvSpec, Tensor4


@dataclass
class ReinpaintWeights:
    branch1: list[ConvSpec]  # 3*S -> S -> S -> S
    branch2: list[ConvSpec]  # 2*S -> S -> S -> S


def _conv_relu_stack(x: Tensor4, specs: list[ConvSpec]) -> Tensor4:
    for spec in specs:
        x = T.relu(T.conv2d(x, spec))
    return x


def reinpaint_step(f_int: Tensor4, history: list[MaskPlane], tau: int, n_iter: int,
                   w: ReinpaintWeights) -> Tensor4:
    """Enhanced sub-volume ``tau``.

    Branch 1 reads (tau-1, tau, tau+1) and is gated by H(tau-1); branch 2
    reads (tau, tau+1) and is gated by the newly filled ring H(tau)-H(tau-1).
    Both add onto sub-volume ``tau``. Sub-volume 0 does not exist and enters
    as zeros; ``tau == T`` passes through unchanged.
    """
    if not 1 <= tau <= n_iter:
        raise IndexError(f"tau {tau} outside 1..{n_iter}")
    cur = subvolume(f_int, tau, n_iter)
    if tau == n_iter:
        return cur
    nxt = subvolume(f_int, tau + 1, n_iter)
    prev = subvolume(f_int, tau - 1, n_iter) if tau > 1 else Tensor4.zeros(cur.dims, dtype=cur.dtype)
    n = f_int.n
    before = history[tau - 1].plane(n, cur.dtype)
    ring = history[tau].plane(n, cur.dtype) - before
    b1 = T.mul_plane(_conv_relu_stack(T.concat([prev, cur, nxt], axis=1), w.branch1), before)
    b2 = T.mul_plane(_conv_relu_stack(T.concat([cur, nxt], axis=1), w.branch2), ring)
    return T.add(T.add(b1, b2), cur)


def reinpaint_all(f_int: Tensor4, history: list[MaskPlane], n_iter: int,
                  w: ReinpaintWeights | None) -> list[Tensor4]:
    """All T enhanced sub-volumes; ``w=None`` bypasses enhancement."""
    if w is None:
        return [subvolume(f_int, t, n_iter) for t in range(1, n_iter + 1)]
    return [reinpaint_step(f_int, history, t, n_iter, w) for t in range(1, n_iter + 1)]


def merge_coefficients(history: list[MaskPlane], n: int, dtype=np.float32) -> list[np.ndarray]:
    """Per-iteration blend planes: H(tau) / sum H, falling back to the last iteration."""
    planes = [m.plane(n, np.float64) for m in history[1:]]
    total = np.sum(planes, axis=0)
    filled = total > 0
    coefs = [np.where(filled, p / np.where(filled, total, 1.0), 0.0) for p in planes]
    coefs[-1] = np.where(filled, coefs[-1], 1.0)
    return [c.astype(dtype) for c in coefs]


def feature_merge(feats: list[Tensor4], history: list[MaskPlane]) -> Tensor4:
    """Mean of the per-iteration volumes over the iterations in which each pixel was filled."""
    if len(feats) != len(history) - 1:
        raise ValueError(f"{len(feats)} volumes for {len(history)} masks")
    coefs = merge_coefficients(history, feats[0].n, feats[0].dtype)
    out = T.mul_plane(feats[0], coefs[0])
    for f, c in zip(feats[1:], coefs[1:]):
        out = T.add(out, T.mul_plane(f, c))
    return out


@dataclass
class ResidualBlock:
    conv1: ConvSpec
    bn: tuple[Tensor4, Tensor4]
    conv2: ConvSpec


@dataclass
class ReconstructWeights:
    up: list[ConvSpec]  # three partial convs after each x2 upsample
    up_bn: list[tuple[Tensor4, Tensor4]]
    res: list[ResidualBlock]
    head: list[ConvSpec]  # 3x3, 3x3, 1x1 -> 3 channels


def reconstruct(merged: Tensor4, mask: MaskPlane, w: ReconstructWeights,
                frozen_bn: bool = False) -> Tensor4:
    """Three (x2 nearest up, partial conv, BN, leaky ReLU) blocks, residual blocks, head, sigmoid.

    ``mask`` is the working-resolution validity of ``merged``; it is
    upsampled alongside the features and updated by each partial conv.
    """
    x = merged
    for spec, (gamma, beta) in zip(w.up, w.up_bn):
        x = T.upsample_nearest(x, 2)
        mask = mask.resized(x.h, x.w)
        x, mask = pconv_step(x, mask, spec)
        x = T.leaky_relu(T.batchnorm(x, gamma, beta, frozen=frozen_bn))
    for blk in w.res:
        y = T.relu(T.batchnorm(T.conv2d(x, blk.conv1), *blk.bn, frozen=frozen_bn))
        x = T.add(x, T.conv2d(y, blk.conv2))
    for i, spec in enumerate(w.head):
        x = T.conv2d(x, spec)
        if i < len(w.head) - 1:
            x = T.relu(x)
    return T.sigmoid(x)


def composite(out: Tensor4, image: Tensor4, mask: MaskPlane) -> Tensor4:
    """Known pixels from ``image``, holes from ``out``."""
    p = mask.plane(image.n, image.dtype)
    return T.add(T.mul_plane(image, p), T.mul_plane(out, 1 - p))
