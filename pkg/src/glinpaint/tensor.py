"""Rank-4 tensors with a recording tape for reverse-mode differentiation.

Every tensor is (batch, channels, height, width). Operations are plain
functions; when a :class:`Tape` is active and any input requires grad, the
op appends a node holding its backward rule. ``backward(loss, tape)`` then
walks the tape in reverse.

Binary ops never broadcast. Channel-broadcast of a mask plane is its own
named op (:func:`mul_plane`) so shape bugs stay loud.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor4:
    """Dense (n, c, h, w) real array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None, _where: str = "constructor"):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 dims, got shape {arr.shape}")
        _check_finite(arr, _where)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def zeros(cls, dims, requires_grad=False, dtype=DEFAULT_DTYPE):
        return cls(np.zeros(dims, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def ones(cls, dims, requires_grad=False, dtype=DEFAULT_DTYPE):
        return cls(np.ones(dims, dtype=dtype), requires_grad=requires_grad)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    shape = dims

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.dims}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor4":
        return Tensor4(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor4):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor4{tag}(dims={self.dims}, dtype={self.dtype}, requires_grad={self.requires_grad})"


# ---------------------------------------------------------------- tape

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Node:
    inputs: tuple[Tensor4, ...]
    output: Tensor4
    backward: Backward
    op: str


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside are recorded. A tape may be
    consumed by exactly one backward pass.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor4) -> None:
        backward(loss, self)


_TAPES: list[Tape] = []


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _emit(out: np.ndarray, inputs: Sequence[Tensor4], rule: Backward, op: str) -> Tensor4:
    t = Tensor4(out, _where=op)
    tape = current_tape()
    if tape is not None and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        tape.nodes.append(Node(tuple(inputs), t, rule, op))
    return t


def backward(loss: Tensor4, tape: Tape) -> None:
    """Populate ``.grad`` of every grad-requiring ancestor of ``loss``.

    Gradients add into any existing ``.grad`` buffer.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a backward pass; re-record the forward graph")
    if loss.dims != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a (1,1,1,1) loss, got {loss.dims}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor requiring grad")
    if not any(node.output is loss for node in tape.nodes):
        raise TapeError("loss was not produced on this tape")
    tape.consumed = True

    pending: dict[int, tuple[Tensor4, np.ndarray]] = {id(loss): (loss, np.ones_like(loss.data))}
    for node in reversed(tape.nodes):
        entry = pending.pop(id(node.output), None)
        if entry is None:
            continue
        g = entry[1]
        _accumulate(node.output, g)
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.data.shape:
                raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input {inp.data.shape}")
            prev = pending.get(id(inp))
            pending[id(inp)] = (inp, gi if prev is None else prev[1] + gi)
    for t, g in pending.values():
        _accumulate(t, g)


def _accumulate(t: Tensor4, g: np.ndarray) -> None:
    _check_finite(g, "backward")
    g = g.astype(t.data.dtype, copy=False)
    t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------- pointwise


def _same(a: Tensor4, b: Tensor4, op: str) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"{op}: dims {a.dims} vs {b.dims} (no broadcasting)")


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    _same(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor4, b: Tensor4) -> Tensor4:
    _same(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor4, b: Tensor4) -> Tensor4:
    _same(a, b, "mul")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor4, alpha: float) -> Tensor4:
    a = x.data.dtype.type(alpha)
    return _emit(x.data * a, (x,), lambda g: (g * a,), "scale")


def relu(x: Tensor4) -> Tensor4:
    pos = x.data > 0
    return _emit(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def leaky_relu(x: Tensor4, slope: float = 0.2) -> Tensor4:
    k = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _emit(x.data * k, (x,), lambda g: (g * k,), "leaky_relu")


def sigmoid(x: Tensor4) -> Tensor4:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _emit(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(x: Tensor4) -> Tensor4:
    t = np.tanh(x.data)
    return _emit(t, (x,), lambda g: (g * (1 - t * t),), "tanh")


def abs_(x: Tensor4) -> Tensor4:
    sgn = np.sign(x.data)
    return _emit(np.abs(x.data), (x,), lambda g: (g * sgn,), "abs")


_UNARY = {"relu": relu, "leaky_relu": leaky_relu, "sigmoid": sigmoid, "tanh": tanh, "abs": abs_}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def pointwise(kind: str, x: Tensor4, y: Tensor4 | float | None = None) -> Tensor4:
    """Dispatch an elementwise op by name.

    ``scale`` takes a float as ``y``; binary kinds take a same-dims tensor.
    """
    if kind in _UNARY:
        return _UNARY[kind](x)
    if kind in _BINARY:
        if not isinstance(y, Tensor4):
            raise TypeError(f"{kind} needs a second tensor")
        return _BINARY[kind](x, y)
    if kind == "scale":
        return scale(x, float(y))  # type: ignore[arg-type]
    raise ValueError(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor4) -> Tensor4:
    s = x.data.sum(dtype=np.float64).astype(x.dtype).reshape(1, 1, 1, 1)
    return _emit(s, (x,), lambda g: (np.full_like(x.data, g.reshape(())),), "sum_all")


def mean_all(x: Tensor4) -> Tensor4:
    return scale(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------- plane ops


def mul_plane(x: Tensor4, plane: np.ndarray) -> Tensor4:
    """Multiply by a constant (n or 1, 1, h, w) plane broadcast over channels."""
    p = np.asarray(plane, dtype=x.dtype)
    if p.ndim != 4 or p.shape[1] != 1 or p.shape[2:] != x.dims[2:] or p.shape[0] not in (1, x.n):
        raise ShapeError(f"mul_plane: plane {p.shape} does not fit {x.dims}")
    return _emit(x.data * p, (x,), lambda g: (g * p,), "mul_plane")


def add_bias(x: Tensor4, bias: Tensor4, plane: np.ndarray | None = None) -> Tensor4:
    """Add a per-channel bias (1, c, 1, 1), optionally only where ``plane`` is 1."""
    if bias.dims != (1, x.c, 1, 1):
        raise ShapeError(f"add_bias: bias {bias.dims} for input {x.dims}")
    if plane is None:
        out = x.data + bias.data

        def rule(g):
            return g, g.sum(axis=(0, 2, 3), keepdims=True)
    else:
        p = np.asarray(plane, dtype=x.dtype)
        out = x.data + bias.data * p

        def rule(g):
            return g, (g * p).sum(axis=(0, 2, 3), keepdims=True)
    return _emit(out, (x, bias), rule, "add_bias")


# ---------------------------------------------------------------- layout


def cast(x: Tensor4, dtype) -> Tensor4:
    """Change precision; the gradient is cast back."""
    src = x.data.dtype
    return _emit(x.data.astype(dtype), (x,), lambda g: (g.astype(src),), "cast")


def reshape(x: Tensor4, dims: Sequence[int]) -> Tensor4:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4 or int(np.prod(dims)) != x.data.size:
        raise ShapeError(f"reshape {x.dims} -> {dims}")
    src = x.dims
    return _emit(x.data.reshape(dims), (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor4, axes: Sequence[int]) -> Tensor4:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "permute")


def concat(xs: Sequence[Tensor4], axis: int = 1) -> Tensor4:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of nothing")
    for t in xs[1:]:
        a = list(t.dims)
        b = list(xs[0].dims)
        a[axis] = b[axis] = 0
        if a != b:
            raise ShapeError(f"concat axis {axis}: {xs[0].dims} vs {t.dims}")
    bounds = np.cumsum([0] + [t.dims[axis] for t in xs])

    def rule(g):
        idx = [slice(None)] * 4
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _emit(np.concatenate([t.data for t in xs], axis=axis), xs, rule, "concat")


def slice_axis(x: Tensor4, axis: int, start: int, stop: int) -> Tensor4:
    if not 0 <= start < stop <= x.dims[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.dims}")
    idx = [slice(None)] * 4
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def rule(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _emit(x.data[idx].copy(), (x,), rule, "slice")


def matmul(a: Tensor4, b: Tensor4) -> Tensor4:
    """Matrix product over the last two dims; leading dims must match exactly."""
    if a.dims[:2] != b.dims[:2] or a.dims[3] != b.dims[2]:
        raise ShapeError(f"matmul {a.dims} @ {b.dims}")
    return _emit(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.swapaxes(2, 3), a.data.swapaxes(2, 3) @ g), "matmul")


# ---------------------------------------------------------------- resampling


def upsample_nearest(x: Tensor4, factor: int) -> Tensor4:
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return _emit(x.data.copy(), (x,), lambda g: (g,), "upsample_nearest")
    n, c, h, w = x.dims
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return _emit(out, (x,),
                 lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),),
                 "upsample_nearest")


def downsample_nearest(x: Tensor4, factor: int) -> Tensor4:
    """Keep every ``factor``-th row and column starting at 0."""
    if factor < 1:
        raise ValueError("factor must be >= 1")

    def rule(g):
        full = np.zeros_like(x.data)
        full[:, :, ::factor, ::factor] = g
        return (full,)

    return _emit(x.data[:, :, ::factor, ::factor].copy(), (x,), rule, "downsample_nearest")


def resample_nearest(x: Tensor4, h: int, w: int) -> Tensor4:
    """Nearest resampling to (h, w) when the ratio is a power-of-two style integer factor."""
    if (x.h, x.w) == (h, w):
        return x
    if h > x.h:
        if h % x.h or w % x.w or h // x.h != w // x.w:
            raise ShapeError(f"cannot upsample {x.dims} to {(h, w)} by an integer factor")
        return upsample_nearest(x, h // x.h)
    if x.h % h or x.w % w or x.h // h != x.w // w:
        raise ShapeError(f"cannot downsample {x.dims} to {(h, w)} by an integer factor")
    return downsample_nearest(x, x.h // h)


def _pad_index(size: int, pad_lo: int, pad_hi: int, mode: str) -> np.ndarray:
    idx = np.arange(-pad_lo, size + pad_hi)
    if mode == "edge" or size == 1:
        return np.clip(idx, 0, size - 1)
    if mode == "reflect":
        period = 2 * (size - 1)
        idx = np.abs(idx) % period
        return np.where(idx >= size, period - idx, idx)
    raise ValueError(f"unknown pad mode {mode!r}")


def pad(x: Tensor4, top: int, bottom: int, left: int, right: int, mode: str = "reflect") -> Tensor4:
    """Index padding (``reflect`` or ``edge``); reflect degrades to edge on size-1 axes."""
    ri = _pad_index(x.h, top, bottom, mode)
    ci = _pad_index(x.w, left, right, mode)
    out = x.data[:, :, ri][:, :, :, ci]

    def rule(g):
        gr = np.zeros((x.n, x.c, x.h, g.shape[3]), dtype=g.dtype)
        np.add.at(gr, (slice(None), slice(None), ri), g)
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), slice(None), ci), gr)
        return (gx,)

    return _emit(out, (x,), rule, f"pad_{mode}")


# ---------------------------------------------------------------- convolution


@dataclass
class ConvSpec:
    """Kernel (out, in, kh, kw), optional bias (1, out, 1, 1), stride, zero padding."""

    weight: Tensor4
    bias: Tensor4 | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"bad stride/padding {self.stride}/{self.padding}")
        if self.bias is not None and self.bias.dims != (1, self.out_channels, 1, 1):
            raise ShapeError(f"bias {self.bias.dims} for kernel {self.weight.dims}")

    @property
    def out_channels(self) -> int:
        return self.weight.dims[0]

    @property
    def in_channels(self) -> int:
        return self.weight.dims[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.dims[2], self.weight.dims[3]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel_size
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        if oh <= 0 or ow <= 0 or h + 2 * self.padding < kh or w + 2 * self.padding < kw:
            raise ShapeError(f"non-positive conv output for input {h}x{w}, kernel {kh}x{kw}, "
                             f"stride {self.stride}, pad {self.padding}")
        return oh, ow

    def transposed_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel_size
        oh = (h - 1) * self.stride - 2 * self.padding + kh
        ow = (w - 1) * self.stride - 2 * self.padding + kw
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"non-positive deconv output for input {h}x{w}")
        return oh, ow


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def _corr(xp: np.ndarray, wt: np.ndarray, stride: int, oh: int, ow: int) -> np.ndarray:
    kh, kw = wt.shape[2:]
    cols = _windows(xp, kh, kw, stride, oh, ow)  # n, c, oh, ow, kh, kw
    out = np.tensordot(cols, wt, axes=([1, 4, 5], [1, 2, 3]))  # n, oh, ow, out
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _scatter(g: np.ndarray, wt: np.ndarray, stride: int, hp: int, wp: int) -> np.ndarray:
    """Adjoint of ``_corr`` w.r.t. its (padded) input; overlaps sum."""
    n, _, oh, ow = g.shape
    _, cin, kh, kw = wt.shape
    cols = np.tensordot(wt, g, axes=([0], [1]))  # cin, kh, kw, n, oh, ow
    cols = np.ascontiguousarray(cols.transpose(1, 2, 3, 0, 4, 5))  # kh, kw, n, cin, oh, ow
    out = np.zeros((n, cin, hp, wp), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += cols[i, j]
    return out


def _kernel_grad(g: np.ndarray, xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    oh, ow = g.shape[2:]
    cols = _windows(xp, kh, kw, stride, oh, ow)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # out, cin, kh, kw


def _zero_pad(a: np.ndarray, p: int) -> np.ndarray:
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p))) if p else a


def conv2d(x: Tensor4, spec: ConvSpec, use_bias: bool = True) -> Tensor4:
    """Cross-correlation with zero padding, plus bias."""
    if x.c != spec.in_channels:
        raise ShapeError(f"conv2d: input has {x.c} channels, kernel expects {spec.in_channels}")
    oh, ow = spec.output_hw(x.h, x.w)
    p, s = spec.padding, spec.stride
    wt = spec.weight
    kh, kw = spec.kernel_size
    xp = _zero_pad(x.data, p)
    out = _corr(xp, wt.data.astype(x.dtype, copy=False), s, oh, ow)

    def rule(g):
        gx = None
        if x.requires_grad:
            gx = _scatter(g, wt.data, s, xp.shape[2], xp.shape[3])
            gx = gx[:, :, p : p + x.h, p : p + x.w]
        gw = _kernel_grad(g, xp, kh, kw, s) if wt.requires_grad else None
        return gx, gw

    y = _emit(out, (x, wt), rule, "conv2d")
    if use_bias and spec.bias is not None:
        y = add_bias(y, spec.bias)
    return y


def deconv2d(x: Tensor4, spec: ConvSpec) -> Tensor4:
    """Transposed convolution: the adjoint of ``conv2d`` (bias is not applied).

    ``x`` carries ``spec.out_channels`` channels; the result carries
    ``spec.in_channels``.
    """
    if x.c != spec.out_channels:
        raise ShapeError(f"deconv2d: input has {x.c} channels, kernel emits {spec.out_channels}")
    oh, ow = spec.transposed_hw(x.h, x.w)
    p, s = spec.padding, spec.stride
    wt = spec.weight
    kh, kw = spec.kernel_size
    hp, wp = oh + 2 * p, ow + 2 * p
    # trailing rows the strided scatter cannot reach stay zero
    full = _scatter(x.data, wt.data.astype(x.dtype, copy=False), s,
                    max(hp, (x.h - 1) * s + kh), max(wp, (x.w - 1) * s + kw))
    out = full[:, :, p : p + oh, p : p + ow]

    def rule(g):
        gp = np.zeros((g.shape[0], g.shape[1], full.shape[2], full.shape[3]), dtype=g.dtype)
        gp[:, :, p : p + oh, p : p + ow] = g
        gx = _corr(gp, wt.data, s, x.h, x.w) if x.requires_grad else None
        gw = _kernel_grad(x.data, gp, kh, kw, s) if wt.requires_grad else None
        return gx, gw

    return _emit(np.ascontiguousarray(out), (x, wt), rule, "deconv2d")


def maxpool2(x: Tensor4) -> Tensor4:
    """2x2 max pooling, stride 2 (odd trailing row/column dropped)."""
    n, c, h, w = x.dims
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"maxpool2 on {x.dims}")
    blocks = x.data[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h2, w2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        gb = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        gx = np.zeros_like(x.data)
        gx[:, :, : 2 * h2, : 2 * w2] = gb
        return (gx,)

    return _emit(out, (x,), rule, "maxpool2")


# ---------------------------------------------------------------- normalization

BN_EPS = 1e-5


def batchnorm(x: Tensor4, gamma: Tensor4, beta: Tensor4, frozen: bool = False) -> Tensor4:
    """Per-channel standardization over (n, h, w) with an affine map.

    Statistics always come from the batch. With ``frozen`` the affine
    parameters are treated as constants and receive no gradient.
    """
    if gamma.dims != (1, x.c, 1, 1) or beta.dims != (1, x.c, 1, 1):
        raise ShapeError(f"batchnorm: gamma {gamma.dims}, beta {beta.dims} for input {x.dims}")
    d = x.data
    m = d.shape[0] * d.shape[2] * d.shape[3]
    mu = d.mean(axis=(0, 2, 3), keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def grad_x(g):
        gxhat = g * gamma.data
        return inv * (gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True) / m
                      - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True) / m)

    out = out.astype(x.dtype, copy=False)
    if frozen:
        return _emit(out, (x,), lambda g: (grad_x(g),), "batchnorm")

    def rule(g):
        gx = grad_x(g) if x.requires_grad else None
        return (gx, (g * xhat).sum(axis=(0, 2, 3), keepdims=True),
                g.sum(axis=(0, 2, 3), keepdims=True))

    return _emit(out, (x, gamma, beta), rule, "batchnorm")


# ---------------------------------------------------------------- attention helpers


def channel_normalize(x: Tensor4, eps: float = 1e-8) -> Tensor4:
    """Divide each (n, :, i, j) vector by max(norm, eps)."""
    d = x.data
    norm = np.sqrt((d * d).sum(axis=1, keepdims=True))
    big = norm > eps
    den = np.where(big, norm, eps)
    u = d / den

    def rule(g):
        # d(x/|x|) = (g - u <u, g>) / |x| where the norm is active; g/eps otherwise
        proj = (u * g).sum(axis=1, keepdims=True)
        return (np.where(big, (g - u * proj) / den, g / eps),)

    return _emit(u.astype(x.dtype, copy=False), (x,), rule, "channel_normalize")


def softmax_spatial(x: Tensor4) -> Tensor4:
    """Softmax over the (h, w) plane of every (n, c) slice, max-subtracted."""
    d = x.data
    e = np.exp(d - d.max(axis=(2, 3), keepdims=True))
    s = e / e.sum(axis=(2, 3), keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=(2, 3), keepdims=True)),)

    return _emit(s, (x,), rule, "softmax_spatial")


def unfold_patches(x: Tensor4, k: int) -> Tensor4:
    """All k x k patches of a single-sample map, one per location, valid mode.

    (1, c, h, w) -> (L, c, k, k) with L = (h-k+1)(w-k+1) in row-major order.
    """
    if x.n != 1:
        raise ShapeError("unfold_patches expects a single sample")
    _, c, h, w = x.dims
    oh, ow = h - k + 1, w - k + 1
    win = sliding_window_view(x.data[0], (k, k), axis=(1, 2))  # c, oh, ow, k, k
    out = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c, k, k))

    def rule(g):
        gg = g.reshape(oh, ow, c, k, k)
        gx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                gx[0, :, i : i + oh, j : j + ow] += gg[:, :, :, i, j].transpose(2, 0, 1)
        return (gx,)

    return _emit(out, (x,), rule, "unfold_patches")


# ---------------------------------------------------------------- T4F files

T4F_MAGIC = b"T4F1"


def t4f_bytes(t: Tensor4 | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor4) else np.asarray(t)
    if arr.ndim != 4:
        raise ShapeError("T4F holds rank-4 arrays only")
    head = T4F_MAGIC + struct.pack("<4I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def t4f_parse(buf: bytes, offset: int = 0) -> tuple[Tensor4, int]:
    """Parse one T4F block at ``offset``; return the tensor and the next offset."""
    if buf[offset : offset + 4] != T4F_MAGIC:
        raise ValueError("bad T4F magic")
    dims = struct.unpack_from("<4I", buf, offset + 4)
    count = int(np.prod(dims))
    start = offset + 20
    end = start + 4 * count
    if end > len(buf):
        raise ValueError("truncated T4F block")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start).astype(np.float32).reshape(dims)
    return Tensor4(arr), end


def save_t4f(t: Tensor4 | np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(t4f_bytes(t))


def load_t4f(path: str | Path) -> Tensor4:
    buf = Path(path).read_bytes()
    t, end = t4f_parse(buf)
    if end != len(buf):
        raise ValueError("trailing bytes after T4F block")
    return t
