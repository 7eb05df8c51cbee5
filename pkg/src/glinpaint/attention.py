"""Feature attention: cosine scores, spatial softmax, patch-deconvolution blend."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, Tensor4

PATCH = 3


@dataclass
class AttentionScores:
    """Softmax scores stored as (1, H*W, H, W): channel = query location, plane = sources."""

    scores: Tensor4
    h: int
    w: int

    def as_array(self) -> np.ndarray:
        """(H*W, H, W) view; each [q] slice sums to one."""
        return self.scores.data[0]


def cosine_scores(feats: Tensor4) -> Tensor4:
    """Cosine similarity of every location pair, laid out (1, H*W, H, W).

    Zero feature vectors normalize to zero, so their similarity to anything is 0.
    """
    if feats.n != 1:
        raise T.ShapeError("cosine_scores works per sample (n == 1)")
    _, c, h, w = feats.dims
    u = T.reshape(T.channel_normalize(feats), (1, 1, c, h * w))
    z = T.matmul(T.permute(u, (0, 1, 3, 2)), u)  # [query, source]
    return T.reshape(z, (1, h * w, h, w))


def attention_scores(raw: Tensor4) -> AttentionScores:
    return AttentionScores(T.softmax_spatial(raw), raw.h, raw.w)


def _overlap_count(h: int, w: int) -> np.ndarray:
    rows = 1 + (np.arange(h) > 0) + (np.arange(h) < h - 1)
    cols = 1 + (np.arange(w) > 0) + (np.arange(w) < w - 1)
    return (rows[:, None] * cols[None, :]).astype(np.float64)[None, None]


def attend_reconstruct(feats: Tensor4, s: AttentionScores) -> Tensor4:
    """Blend 3x3 feature patches by attention score.

    Patches centred on each source location (reflect-padded borders) act as
    transposed-convolution filters over the score maps; each output pixel is
    then divided by how many patches overlap it.
    """
    if feats.n != 1:
        raise T.ShapeError("attend_reconstruct works per sample (n == 1)")
    _, c, h, w = feats.dims
    if (s.h, s.w) != (h, w) or s.scores.c != h * w:
        raise T.ShapeError("scores do not match the feature map")
    r = PATCH // 2
    patches = T.unfold_patches(T.pad(feats, r, r, r, r, mode="reflect"), PATCH)  # (HW, c, 3, 3)
    by_source = T.reshape(T.permute(T.reshape(s.scores, (1, 1, h * w, h * w)), (0, 1, 3, 2)),
                          (1, h * w, h, w))
    out = T.deconv2d(by_source, ConvSpec(patches, padding=r))
    return T.mul_plane(out, 1.0 / _overlap_count(h, w))


def feature_attention(feats: Tensor4) -> Tensor4:
    """Per-sample attention over a batch."""
    outs = []
    for i in range(feats.n):
        f = T.slice_axis(feats, 0, i, i + 1) if feats.n > 1 else feats
        outs.append(attend_reconstruct(f, attention_scores(cosine_scores(f))))
    return outs[0] if len(outs) == 1 else T.concat(outs, axis=0)
