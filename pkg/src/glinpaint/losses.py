"""Training objective: pixel, perceptual, style and total-variation terms."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .pconv import MaskPlane, update_mask
from .tensor import ConvSpec, Tensor4

Stage = Callable[[Tensor4], Tensor4]


@dataclass
class FeatureExtractor:
    """Fixed stack of feature stages; the output of each stage is compared."""

    stages: list[Stage]

    def __call__(self, x: Tensor4) -> list[Tensor4]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def _conv_pool_stage(spec: ConvSpec) -> Stage:
    return lambda x: T.maxpool2(T.relu(T.conv2d(x, spec)))


EXTRACTOR_CHANNELS = (16, 32, 64)
EXTRACTOR_SEED = 20240521


def default_extractor_weights(seed: int = EXTRACTOR_SEED, channels=EXTRACTOR_CHANNELS,
                              dtype=np.float32) -> dict[str, Tensor4]:
    rng = np.random.default_rng(seed)
    out, cin = {}, 3
    for i, c in enumerate(channels):
        std = np.sqrt(2.0 / (cin * 9))
        out[f"extractor.{i}.weight"] = Tensor4(rng.normal(0.0, std, (c, cin, 3, 3)), dtype=dtype)
        out[f"extractor.{i}.bias"] = Tensor4(np.zeros((1, c, 1, 1)), dtype=dtype)
        cin = c
    return out


def extractor_from_weights(weights: dict[str, Tensor4]) -> FeatureExtractor:
    """Build conv-ReLU-maxpool stages from ``extractor.{i}.weight/bias`` entries."""
    stages, i = [], 0
    while f"extractor.{i}.weight" in weights:
        spec = ConvSpec(weights[f"extractor.{i}.weight"], weights.get(f"extractor.{i}.bias"), 1, 1)
        stages.append(_conv_pool_stage(spec))
        i += 1
    if not stages:
        raise ValueError("no extractor.{i}.weight entries found")
    return FeatureExtractor(stages)


def default_extractor(seed: int = EXTRACTOR_SEED, dtype=np.float32) -> FeatureExtractor:
    """Three seeded conv3x3-ReLU-maxpool stages with 16/32/64 channels."""
    return extractor_from_weights(default_extractor_weights(seed, dtype=dtype))


@dataclass
class LossWeights:
    valid: float = 1.0
    hole: float = 6.0
    perc: float = 0.05
    style: float = 120.0
    tv: float = 0.1

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("loss weights must be non-negative")


def _l1_mean(a: Tensor4, b: Tensor4) -> Tensor4:
    return T.mean_all(T.abs_(T.sub(a, b)))


def perceptual_loss(out: Tensor4, gt: Tensor4, fx: FeatureExtractor) -> Tensor4:
    total = None
    for fo, fg in zip(fx(out), fx(gt)):
        term = _l1_mean(fg, fo)
        total = term if total is None else T.add(total, term)
    return total


def gram(feat: Tensor4) -> Tensor4:
    """(n, C, H, W) -> (n, 1, C, C) Gram matrices scaled by 1/(C*H*W)."""
    n, c, h, w = feat.dims
    flat = T.reshape(feat, (n, 1, c, h * w))
    return T.scale(T.matmul(flat, T.permute(flat, (0, 1, 3, 2))), 1.0 / (c * h * w))


def style_loss(out: Tensor4, gt: Tensor4, fx: FeatureExtractor) -> Tensor4:
    """Sum over stages of mean |Gram difference| (the mean supplies the 1/C^2)."""
    total = None
    for fo, fg in zip(fx(out), fx(gt)):
        term = _l1_mean(gram(fg), gram(fo))
        total = term if total is None else T.add(total, term)
    return total


def tv_region(mask: MaskPlane) -> np.ndarray:
    """Holes dilated by one pixel, as a 0/1 (n, 1, h, w) array."""
    holes = MaskPlane(1 - mask.bits)
    return update_mask(holes, 3, 3, 1, 1).bits


def tv_loss(out: Tensor4, mask: MaskPlane, ref: Tensor4 | None = None) -> Tensor4:
    """Absolute neighbour differences over pairs inside the dilated hole region, over N elements.

    With ``ref`` the differences are taken on ``out - ref``, so the term
    vanishes whenever the two images differ by a constant.
    """
    if ref is not None:
        out = T.sub(out, ref)
    region = tv_region(mask).astype(np.float64)
    terms = []
    if out.w > 1:
        pairs = region[:, :, :, 1:] * region[:, :, :, :-1]
        d = T.sub(T.slice_axis(out, 3, 1, out.w), T.slice_axis(out, 3, 0, out.w - 1))
        terms.append(T.sum_all(T.mul_plane(T.abs_(d), pairs)))
    if out.h > 1:
        pairs = region[:, :, 1:, :] * region[:, :, :-1, :]
        d = T.sub(T.slice_axis(out, 2, 1, out.h), T.slice_axis(out, 2, 0, out.h - 1))
        terms.append(T.sum_all(T.mul_plane(T.abs_(d), pairs)))
    total = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
    return T.scale(total, 1.0 / out.data.size)


def valid_loss(out: Tensor4, gt: Tensor4, mask: MaskPlane) -> Tensor4:
    """Mean over all elements of |out - gt| on known pixels."""
    return T.mean_all(T.abs_(T.mul_plane(T.sub(out, gt), mask.plane(out.n, out.dtype))))


def hole_loss(out: Tensor4, gt: Tensor4, mask: MaskPlane) -> Tensor4:
    return T.mean_all(T.abs_(T.mul_plane(T.sub(out, gt), 1 - mask.plane(out.n, out.dtype))))


TERMS = ("valid", "hole", "perc", "style", "tv")


def composite_loss(terms: dict[str, Tensor4], weights: LossWeights) -> Tensor4:
    lam = asdict(weights)
    total = None
    for name in TERMS:
        t = T.scale(terms[name], lam[name])
        total = t if total is None else T.add(total, t)
    return total


@dataclass
class InpaintingLoss:
    weights: LossWeights = field(default_factory=LossWeights)
    extractor: FeatureExtractor = field(default_factory=default_extractor)

    def terms(self, out: Tensor4, gt: Tensor4, mask: MaskPlane) -> dict[str, Tensor4]:
        return {
            "valid": valid_loss(out, gt, mask),
            "hole": hole_loss(out, gt, mask),
            "perc": perceptual_loss(out, gt, self.extractor),
            "style": style_loss(out, gt, self.extractor),
            "tv": tv_loss(out, mask, gt),
        }

    def __call__(self, out: Tensor4, gt: Tensor4, mask: MaskPlane) -> tuple[Tensor4, dict[str, float]]:
        parts = self.terms(out, gt, mask)
        return composite_loss(parts, self.weights), {k: v.item() for k, v in parts.items()}
