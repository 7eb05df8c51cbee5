"""Central finite-difference checks of the tape's analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor4, backward, mul, sum_all


def _weighted_loss(out: Tensor4, proj: Tensor4) -> Tensor4:
    return sum_all(mul(out, proj))


def gradcheck(
    fn: Callable[..., Tensor4],
    inputs: Sequence[Tensor4],
    seed: int = 0,
    eps: float | None = None,
    max_entries: int | None = None,
    dtype=np.float64,
    floor: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn(*inputs)`` is reduced to a scalar through a fixed random projection
    (a plain sum would hide errors in ops whose outputs sum to a constant,
    softmax for instance). Inputs flagged ``requires_grad`` are checked;
    ``max_entries`` caps how many entries of each are perturbed, sampled
    with ``seed``. The check runs in ``dtype`` (float64 by default) with
    step 1e-5, or 1e-3 in float32.

    Per-entry error is |a - n| / max(|a| + |n|, floor * G), G being the
    largest analytic gradient magnitude among the checked inputs. Entries
    whose true gradient is essentially zero (a bias feeding batchnorm, say)
    would otherwise report pure round-off as relative error.
    """
    rng = np.random.default_rng(seed)
    xs = [Tensor4(t.data.astype(dtype), requires_grad=t.requires_grad) for t in inputs]
    if eps is None:
        eps = 1e-5 if np.dtype(dtype) == np.float64 else 1e-3

    with Tape() as tape:
        out = fn(*xs)
        proj = Tensor4(rng.uniform(0.5, 1.5, out.dims) * rng.choice([-1.0, 1.0], out.dims), dtype=dtype)
        loss = _weighted_loss(out, proj)
    backward(loss, tape)

    def value() -> float:
        return float(_weighted_loss(fn(*xs), proj).data.astype(np.float64).reshape(()))

    checked = [t for t in xs if t.requires_grad and t.grad is not None]
    scale = max([float(np.abs(t.grad).max()) for t in checked], default=0.0)
    denom_floor = max(floor * scale, 1e-12)
    worst = 0.0
    for t in xs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            if not np.isfinite(numeric):
                raise NonFiniteError("non-finite finite-difference estimate")
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(denom_floor, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
