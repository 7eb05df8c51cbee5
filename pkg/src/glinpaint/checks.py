"""Registry of finite-difference gradient checks, grouped by module."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import attend_reconstruct, attention_scores, cosine_scores, feature_attention
from .gle import GLEWeights, gaussian_blur3, gle_forward, laplacian_level
from .gradcheck import gradcheck
from .iterative import BranchWeights, fuse, run_iterations
from .losses import (default_extractor, gram, hole_loss, perceptual_loss, style_loss, tv_loss,
                     valid_loss)
from .network import InpaintNet, NetConfig
from .pconv import MaskPlane, partial_conv
from .reinpaint import ReinpaintWeights, composite, feature_merge, reinpaint_step
from .tensor import ConvSpec, Tensor4

POINTWISE_TOL = 1e-4
DEFAULT_TOL = 1e-3
SEEDS = (0, 1, 2, 3, 4)

# (fn, inputs) for one seed
Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor4], list[Tensor4]]]


@dataclass
class Case:
    module: str
    name: str
    build: Builder
    tol: float = DEFAULT_TOL
    max_entries: int | None = None


@dataclass
class CaseResult:
    module: str
    name: str
    errors: list[float]
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return max(self.errors) < self.tol


def _t(rng, *dims, lo=-1.0, hi=1.0, grad=True) -> Tensor4:
    return Tensor4(rng.uniform(lo, hi, dims), requires_grad=grad, dtype=np.float64)


def _mask(rng, n, h, w, p=0.6) -> MaskPlane:
    bits = (rng.random((n, 1, h, w)) < p).astype(np.uint8)
    bits[..., 0, 0] = 1
    return MaskPlane(bits)


def _spec(rng, cout, cin, k, stride=1, padding=None, bias=True) -> ConvSpec:
    return ConvSpec(_t(rng, cout, cin, k, k, lo=-0.5, hi=0.5),
                    _t(rng, 1, cout, 1, 1, lo=-0.2, hi=0.2) if bias else None,
                    stride, k // 2 if padding is None else padding)


def _spec_inputs(spec: ConvSpec) -> list[Tensor4]:
    return [spec.weight] + ([spec.bias] if spec.bias is not None else [])


def _with(spec: ConvSpec, ts) -> ConvSpec:
    return ConvSpec(ts[0], ts[1] if spec.bias is not None else None, spec.stride, spec.padding)


# ---------------------------------------------------------------- tensor-core


def _unary(op, lo=-2.0, hi=2.0):
    def build(rng):
        x = _t(rng, 2, 3, 4, 5, lo=lo, hi=hi)
        # keep clear of kinks at zero
        x.data[np.abs(x.data) < 0.05] += 0.1
        return op, [x]
    return build


def _binary(op):
    def build(rng):
        return op, [_t(rng, 2, 3, 4, 5), _t(rng, 2, 3, 4, 5)]
    return build


def _conv_case(stride, padding, k, bias=True):
    def build(rng):
        spec = _spec(rng, 4, 3, k, stride, padding, bias)
        x = _t(rng, 2, 3, 7, 6)
        return (lambda x, *p: T.conv2d(x, _with(spec, p))), [x, *_spec_inputs(spec)]
    return build


def _deconv_case(stride, padding):
    def build(rng):
        spec = _spec(rng, 4, 3, 3, stride, padding, bias=False)
        x = _t(rng, 2, 4, 5, 4)
        return (lambda x, w: T.deconv2d(x, ConvSpec(w, None, stride, padding))), [x, spec.weight]
    return build


def _bn_case(frozen):
    def build(rng):
        x = _t(rng, 3, 4, 5, 5)
        # frozen affine parameters are constants, so only x is checked
        g = _t(rng, 1, 4, 1, 1, lo=0.5, hi=1.5, grad=not frozen)
        b = _t(rng, 1, 4, 1, 1, grad=not frozen)
        return (lambda x, g, b: T.batchnorm(x, g, b, frozen=frozen)), [x, g, b]
    return build


def _plane_case(rng):
    plane = rng.uniform(0, 1, (2, 1, 4, 5))
    return (lambda x: T.mul_plane(x, plane)), [_t(rng, 2, 3, 4, 5)]


def _bias_case(rng):
    plane = rng.random((2, 1, 4, 5)) < 0.5
    return (lambda x, b: T.add_bias(x, b, plane)), [_t(rng, 2, 3, 4, 5), _t(rng, 1, 3, 1, 1)]


def _maxpool_case(rng):
    # distinct values so the argmax never ties under perturbation
    x = Tensor4(rng.permutation(2 * 3 * 6 * 8).reshape(2, 3, 6, 8) * 0.01, requires_grad=True,
                dtype=np.float64)
    return T.maxpool2, [x]


TENSOR_CASES = [
    Case("tensor", "add", _binary(T.add), POINTWISE_TOL),
    Case("tensor", "sub", _binary(T.sub), POINTWISE_TOL),
    Case("tensor", "mul", _binary(T.mul), POINTWISE_TOL),
    Case("tensor", "scale", _unary(lambda x: T.scale(x, -1.7)), POINTWISE_TOL),
    Case("tensor", "relu", _unary(T.relu), POINTWISE_TOL),
    Case("tensor", "leaky_relu", _unary(T.leaky_relu), POINTWISE_TOL),
    Case("tensor", "sigmoid", _unary(T.sigmoid, -4, 4), POINTWISE_TOL),
    Case("tensor", "tanh", _unary(T.tanh), POINTWISE_TOL),
    Case("tensor", "abs", _unary(T.abs_), POINTWISE_TOL),
    Case("tensor", "sum_all", _unary(T.sum_all), POINTWISE_TOL),
    Case("tensor", "mean_all", _unary(T.mean_all), POINTWISE_TOL),
    Case("tensor", "mul_plane", _plane_case, POINTWISE_TOL),
    Case("tensor", "add_bias", _bias_case, POINTWISE_TOL),
    Case("tensor", "cast", _unary(lambda x: T.cast(x, np.float64)), POINTWISE_TOL),
    Case("tensor", "reshape", _unary(lambda x: T.reshape(x, (1, 6, 5, 4)))),
    Case("tensor", "permute", _unary(lambda x: T.permute(x, (0, 2, 3, 1)))),
    Case("tensor", "concat", _binary(lambda a, b: T.concat([a, b], axis=1))),
    Case("tensor", "slice", _unary(lambda x: T.slice_axis(x, 2, 1, 3))),
    Case("tensor", "matmul", lambda rng: (T.matmul, [_t(rng, 2, 1, 3, 4), _t(rng, 2, 1, 4, 5)])),
    Case("tensor", "upsample", _unary(lambda x: T.upsample_nearest(x, 2))),
    Case("tensor", "downsample", _unary(lambda x: T.downsample_nearest(x, 2))),
    Case("tensor", "resample", _unary(lambda x: T.resample_nearest(x, 8, 10))),
    Case("tensor", "pad_reflect", _unary(lambda x: T.pad(x, 1, 2, 2, 1, "reflect"))),
    Case("tensor", "pad_edge", _unary(lambda x: T.pad(x, 2, 0, 1, 3, "edge"))),
    Case("tensor", "conv2d", _conv_case(1, 1, 3)),
    Case("tensor", "conv2d_stride2", _conv_case(2, 3, 7), max_entries=60),
    Case("tensor", "conv2d_1x1_nobias", _conv_case(1, 0, 1, bias=False)),
    Case("tensor", "deconv2d", _deconv_case(1, 1)),
    Case("tensor", "deconv2d_stride2", _deconv_case(2, 0)),
    Case("tensor", "maxpool2", _maxpool_case),
    Case("tensor", "batchnorm", _bn_case(False)),
    Case("tensor", "batchnorm_frozen", _bn_case(True)),
    Case("tensor", "channel_normalize", _unary(T.channel_normalize)),
    Case("tensor", "softmax_spatial", _unary(T.softmax_spatial, -3, 3)),
    Case("tensor", "unfold_patches", lambda rng: (lambda x: T.unfold_patches(x, 3), [_t(rng, 1, 2, 5, 4)])),
]


# ---------------------------------------------------------------- gle


def _gle_case(ablate):
    def build(rng):
        gs, up = _spec(rng, 4, 2, 7, 2, 3), _spec(rng, 2, 4, 7, 1, 3)
        x = _t(rng, 1, 2, 8, 8)

        def fn(x, gw, gb, uw, ub):
            f, nxt = gle_forward(x, GLEWeights(_with(gs, (gw, gb)), _with(up, (uw, ub))), ablate)
            return T.concat([T.reshape(f, (1, 1, 1, f.data.size)),
                             T.reshape(nxt, (1, 1, 1, nxt.data.size))], axis=3)
        return fn, [x, *_spec_inputs(gs), *_spec_inputs(up)]
    return build


GLE_CASES = [
    Case("gle", "gaussian_blur3", lambda rng: (gaussian_blur3, [_t(rng, 2, 3, 6, 5)])),
    Case("gle", "laplacian_level",
         lambda rng: (laplacian_level, [_t(rng, 1, 2, 8, 8), _t(rng, 1, 2, 4, 4)])),
    Case("gle", "gle_forward", _gle_case(False), max_entries=24),
    Case("gle", "gle_forward_ablated", _gle_case(True), max_entries=24),
]


# ---------------------------------------------------------------- partial conv / attention


def _pconv_case(rng):
    spec = _spec(rng, 3, 2, 3)
    m = _mask(rng, 2, 6, 6, p=0.4)
    return (lambda x, w, b: partial_conv(x, m, ConvSpec(w, b, 1, 1))), [_t(rng, 2, 2, 6, 6), *_spec_inputs(spec)]


def _attend_case(rng):
    f = _t(rng, 1, 3, 4, 4)
    return (lambda f, s: attend_reconstruct(f, attention_scores(s))), [f, _t(rng, 1, 16, 4, 4, lo=-2, hi=2)]


PCONV_CASES = [Case("pconv", "partial_conv", _pconv_case)]

ATTENTION_CASES = [
    Case("attention", "cosine_scores", lambda rng: (cosine_scores, [_t(rng, 1, 3, 4, 3)])),
    Case("attention", "attend_reconstruct", _attend_case),
    Case("attention", "feature_attention", lambda rng: (feature_attention, [_t(rng, 2, 3, 4, 4)])),
]


# ---------------------------------------------------------------- iterative / reinpaint


def _branch(rng, c):
    p1, p2 = _spec(rng, c, c, 3), _spec(rng, c, c, 3)
    bn = [(_t(rng, 1, c, 1, 1, lo=0.5, hi=1.5), _t(rng, 1, c, 1, 1)) for _ in range(2)]
    return p1, p2, bn


def _iter_case(rng):
    c = 3
    lo, hi = _branch(rng, c), _branch(rng, c)
    m = _mask(rng, 1, 4, 4, p=0.5)
    flat = [lo[0].weight, lo[0].bias, lo[1].weight, lo[1].bias, *lo[2][0], *lo[2][1],
            hi[0].weight, hi[0].bias, hi[1].weight, hi[1].bias, *hi[2][0], *hi[2][1]]

    def fn(xl, xh, *ps):
        def bw(q):
            return BranchWeights(ConvSpec(q[0], q[1], 1, 1), ConvSpec(q[2], q[3], 1, 1),
                                 (q[4], q[5]), (q[6], q[7]))
        cat, _ = run_iterations(xl, xh, m, 2, bw(ps[:8]), bw(ps[8:]))
        return cat
    return fn, [_t(rng, 1, c, 4, 4), _t(rng, 1, c, 4, 4), *flat]


def _fuse_case(rng):
    spec = _spec(rng, 4, 4, 3)
    return (lambda x, w, b: fuse(x, ConvSpec(w, b, 1, 1))), [_t(rng, 1, 4, 4, 4), *_spec_inputs(spec)]


def _reinpaint_case(rng):
    s, n_iter = 2, 3
    b1 = [_spec(rng, s, 3 * s, 3), _spec(rng, s, s, 3), _spec(rng, s, s, 3)]
    b2 = [_spec(rng, s, 2 * s, 3), _spec(rng, s, s, 3), _spec(rng, s, s, 3)]
    hist = []
    for r in (2, 1, 0, -1):  # shrinking centered hole
        b = np.ones((1, 1, 5, 5), np.uint8)
        if r >= 0:
            b[..., 2 - r : 3 + r, 2 - r : 3 + r] = 0
        hist.append(MaskPlane(b))
    tau = int(rng.integers(1, n_iter))

    def fn(f, *ps):
        w = ReinpaintWeights([ConvSpec(ps[2 * i], ps[2 * i + 1], 1, 1) for i in range(3)],
                             [ConvSpec(ps[6 + 2 * i], ps[7 + 2 * i], 1, 1) for i in range(3)])
        return reinpaint_step(f, hist, tau, n_iter, w)
    params = [t for sp in b1 + b2 for t in _spec_inputs(sp)]
    return fn, [_t(rng, 1, s * n_iter, 5, 5), *params]


def _merge_case(rng):
    hist = [_mask(rng, 1, 4, 4, p=0.3)]
    for _ in range(3):
        hist.append(MaskPlane(np.maximum(hist[-1].bits, (rng.random((1, 1, 4, 4)) < 0.4).astype(np.uint8))))
    return (lambda *fs: feature_merge(list(fs), hist)), [_t(rng, 1, 2, 4, 4) for _ in range(3)]


def _composite_case(rng):
    m = _mask(rng, 1, 4, 4)
    return (lambda o, i: composite(o, i, m)), [_t(rng, 1, 3, 4, 4), _t(rng, 1, 3, 4, 4)]


ITERATIVE_CASES = [
    Case("iterative", "run_iterations", _iter_case, max_entries=4),
    Case("iterative", "fuse", _fuse_case),
]

REINPAINT_CASES = [
    Case("reinpaint", "reinpaint_step", _reinpaint_case, max_entries=12),
    Case("reinpaint", "feature_merge", _merge_case, POINTWISE_TOL),
    Case("reinpaint", "composite", _composite_case, POINTWISE_TOL),
]


# ---------------------------------------------------------------- losses


def _loss_case(term):
    def build(rng):
        m = _mask(rng, 1, 8, 8)
        gt = Tensor4(rng.uniform(0, 1, (1, 3, 8, 8)), dtype=np.float64)
        out = _t(rng, 1, 3, 8, 8, lo=0, hi=1)
        fx = default_extractor(dtype=np.float64)
        fns = {
            "valid": lambda o: valid_loss(o, gt, m),
            "hole": lambda o: hole_loss(o, gt, m),
            "perc": lambda o: perceptual_loss(o, gt, fx),
            "style": lambda o: style_loss(o, gt, fx),
            "tv": lambda o: tv_loss(o, m),
        }
        return fns[term], [out]
    return build


LOSS_CASES = [Case("losses", f"{t}_loss", _loss_case(t), max_entries=40) for t in
              ("valid", "hole", "perc", "style", "tv")]
LOSS_CASES.append(Case("losses", "gram", lambda rng: (gram, [_t(rng, 2, 3, 4, 5)])))


# ---------------------------------------------------------------- end to end

E2E_NET = {"stem_channels": 2, "proj_channels": 2, "recon_channels": [4, 4, 4],
           "head_channels": [4, 4], "n_res_blocks": 1, "T": 3}
E2E_SIZE = 32


def _e2e_case(rng):
    """Whole network at 32x32 with T=3; a random subset of parameters is perturbed."""
    net = InpaintNet(NetConfig(**E2E_NET), seed=int(rng.integers(1 << 31)), dtype=np.float64)
    img = Tensor4(rng.uniform(0, 1, (1, 3, E2E_SIZE, E2E_SIZE)), dtype=np.float64)
    st = Tensor4(rng.uniform(0, 1, (1, 3, E2E_SIZE, E2E_SIZE)), dtype=np.float64)
    bits = np.ones((1, 1, E2E_SIZE, E2E_SIZE), np.uint8)
    y, x = rng.integers(4, 16, 2)
    bits[..., y : y + 12, x : x + 12] = 0
    mask = MaskPlane(bits)
    names = sorted(rng.choice(sorted(net.params), size=12, replace=False))

    def fn(*ts):
        for k, t in zip(names, ts):
            net.params[k] = t
        return net(img, st, mask)
    return fn, [net.params[k] for k in names]


E2E_CASES = [Case("e2e", "pipeline_32x32_T3", _e2e_case, max_entries=2)]

CASES = (TENSOR_CASES + GLE_CASES + PCONV_CASES + ATTENTION_CASES + ITERATIVE_CASES
         + REINPAINT_CASES + LOSS_CASES + E2E_CASES)
MODULES = sorted({c.module for c in CASES})


def run_case(case: Case, seeds=SEEDS) -> CaseResult:
    t0 = time.perf_counter()
    errs = []
    for s in seeds:
        rng = np.random.default_rng([s, 7919])
        fn, inputs = case.build(rng)
        errs.append(gradcheck(fn, inputs, seed=s, max_entries=case.max_entries))
    return CaseResult(case.module, case.name, errs, case.tol, time.perf_counter() - t0)


def run_checks(module: str | None = None, seeds=SEEDS) -> list[CaseResult]:
    if module is not None and module not in MODULES:
        raise ValueError(f"unknown module {module!r}; choose from {MODULES}")
    return [run_case(c, seeds) for c in CASES if module is None or c.module == module]


def report(results: list[CaseResult]) -> str:
    lines = []
    for r in results:
        flag = "ok  " if r.passed else "FAIL"
        lines.append(f"{flag} {r.module:>9}.{r.name:<22} max rel err {max(r.errors):.2e} "
                     f"(tol {r.tol:.0e}, {r.seconds:.2f} s)")
    return "\n".join(lines)
