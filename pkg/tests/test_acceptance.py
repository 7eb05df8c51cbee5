"""End-to-end acceptance checks; each prints one PASS/FAIL line.

The two training experiments are marked slow. Budgets for the ablation can
be raised with GLINPAINT_ABLATION_EPOCHS.
"""

import math
import os
import time

import numpy as np
import pytest

from glinpaint import tensor as T
from glinpaint.attention import attend_reconstruct, attention_scores, cosine_scores, feature_attention
from glinpaint.checks import run_checks
from glinpaint.experiments import ablation, ablation_order, overfit
from glinpaint.gle import gaussian_level, gle_forward, laplacian_collapse, laplacian_level
from glinpaint.iterative import run_iterations
from glinpaint.losses import (InpaintingLoss, LossWeights, composite_loss, default_extractor, hole_loss,
                              valid_loss)
from glinpaint.metrics import mean_l1, psnr, ssim
from glinpaint.pconv import MaskPlane, partial_conv, update_mask
from glinpaint.tensor import ConvSpec, Tensor4
from glinpaint.train import Checkpoint, Sample, TrainConfig, train
from glinpaint.data import synthetic_image

from oracles import dilate_loops, l1_loops, psnr_loops, ssim_loops
from test_gle import gle_weights
from test_iterative import branch

ABLATION_EPOCHS = int(os.environ.get("GLINPAINT_ABLATION_EPOCHS", "30"))


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def test_criterion_01_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = run_checks()
    secs = time.perf_counter() - t0
    failed = [f"{r.module}.{r.name} ({max(r.errors):.1e})" for r in results if not r.passed]
    worst = max(max(r.errors) / r.tol for r in results)
    ok = not failed and secs < 60 and all(len(r.errors) == 5 for r in results)
    verdict(1, ok, f"{len(results)} checks x 5 seeds, worst err/tol {worst:.3f}, {secs:.1f} s"
            + (f", failed: {failed}" if failed else ""))


def test_criterion_02_partial_conv_equivalence(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        k = int(rng.choice([1, 3, 5, 7]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 2))
        n, cin, cout = (int(v) for v in rng.integers(1, 4, 3))
        h, w = (int(v) for v in rng.integers(k, 17, 2))
        x = Tensor4(rng.standard_normal((n, cin, h, w)))
        bias = Tensor4(rng.standard_normal((1, cout, 1, 1))) if rng.random() < 0.5 else None
        spec = ConvSpec(Tensor4(rng.standard_normal((cout, cin, k, k))), bias, stride, pad)
        diff = np.abs(partial_conv(x, MaskPlane.full(h, w, n=n), spec).data - T.conv2d(x, spec).data).max()
        worst = max(worst, float(diff))
    verdict(2, worst <= 1e-6, f"100 random pairs, max abs diff {worst:.2e}")


def test_criterion_03_mask_front(verdict):
    steps = []
    for r in range(1, 9):
        bits = np.ones((24, 24), np.uint8)
        bits[12 - r + 1 : 12 + r, 12 - r + 1 : 12 + r] = 0
        m, n_upd, oracle = MaskPlane(bits), 0, bits
        while not m.bits.all():
            m, oracle = update_mask(m), dilate_loops(oracle)
            np.testing.assert_array_equal(m.bits[0, 0], oracle)
            n_upd += 1
        steps.append(n_upd)
    rng = np.random.default_rng(3)
    monotone = True
    for _ in range(100):
        m0 = MaskPlane((rng.random((8, 8)) < rng.uniform(0.05, 0.9)).astype(np.uint8))
        x = Tensor4(rng.standard_normal((1, 1, 8, 8)))
        _, hist = run_iterations(x, x, m0, 3, branch(rng, 1), branch(rng, 1))
        monotone &= all((b.bits >= a.bits).all() for a, b in zip(hist, hist[1:]))
    ok = steps == list(range(1, 9)) and monotone
    verdict(3, ok, f"closing steps for r=1..8: {steps}; 100 histories monotone: {monotone}")


def test_criterion_04_pyramid_identity(verdict):
    rng = np.random.default_rng(4)
    exact = 0
    for _ in range(50):
        h, w = (int(v) for v in rng.integers(2, 65, 2))
        x = Tensor4(rng.uniform(0, 1, (1, 3, h, w)).astype(np.float32))
        g = gaussian_level(x)
        exact += np.array_equal(laplacian_collapse(laplacian_level(x, g), g).data, x.data)
    x = Tensor4(rng.uniform(-1, 1, (1, 4, 16, 16)))
    f, _ = gle_forward(x, gle_weights(rng, 4, zero=True))
    ident = np.array_equal(f.data, x.data)
    verdict(4, exact == 50 and ident, f"bit-exact reconstructions {exact}/50; zero-weight GLE identity {ident}")


def test_criterion_05_loss_calibration(verdict):
    rng = np.random.default_rng(5)
    gt = Tensor4(rng.random((2, 3, 32, 32)))
    m = MaskPlane((rng.random((2, 1, 32, 32)) < 0.7).astype(np.uint8))
    _, parts = InpaintingLoss(extractor=default_extractor())(Tensor4(gt.data.copy()), gt, m)
    zeros = all(v == 0.0 for v in parts.values())
    terms = {k: Tensor4(np.full((1, 1, 1, 1), float(v)), dtype=np.float64)
             for k, v in zip(("valid", "hole", "perc", "style", "tv"), (1, 2, 3, 4, 5))}
    total = composite_loss(terms, LossWeights()).item()
    worst = 0.0
    for _ in range(20):
        a, b = Tensor4(rng.random((1, 3, 16, 16))), Tensor4(rng.random((1, 3, 16, 16)))
        mm = MaskPlane((rng.random((16, 16)) < rng.random()).astype(np.uint8))
        s = valid_loss(a, b, mm).item() + hole_loss(a, b, mm).item()
        worst = max(worst, abs(s - float(np.abs(a.data - b.data).mean())))
    ok = zeros and total == 493.65 and worst <= 1e-6
    verdict(5, ok, f"terms at equality {parts}; composite {total!r}; valid+hole vs mean L1 {worst:.1e}")


def test_criterion_06_attention(verdict):
    rng = np.random.default_rng(6)
    worst_sum = worst_self = worst_const = 0.0
    for _ in range(20):
        f = Tensor4(rng.standard_normal((1, 4, 6, 5)))
        z = cosine_scores(f)
        s = attention_scores(z).as_array()
        worst_sum = max(worst_sum, float(np.abs(s.sum(axis=(1, 2)) - 1).max()))
        diag = np.diag(z.data[0].reshape(30, 30))
        worst_self = max(worst_self, float(np.abs(diag - 1).max()))
        c = float(rng.uniform(-2, 2))
        const = Tensor4(np.full((1, 3, 6, 5), c), dtype=np.float64)
        worst_const = max(worst_const, float(np.abs(feature_attention(const).data - c).max()))
        scores = attention_scores(Tensor4(rng.standard_normal((1, 30, 6, 5)), dtype=np.float64))
        worst_const = max(worst_const, float(np.abs(attend_reconstruct(const, scores).data - c).max()))
    ok = worst_sum <= 1e-6 and worst_self <= 1e-6 and worst_const <= 1e-6
    verdict(6, ok, f"slice sum err {worst_sum:.1e}; self-similarity err {worst_self:.1e}; "
            f"constant err {worst_const:.1e}")


def test_criterion_07_metric_oracle(verdict):
    rng = np.random.default_rng(7)
    errs = np.zeros(3)
    for _ in range(10):
        a = rng.random((1, 3, 16, 16))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.3), a.shape), 0, 1)
        errs = np.maximum(errs, [abs(psnr(a, b) - psnr_loops(a, b)), abs(mean_l1(a, b) - l1_loops(a, b)),
                                 abs(ssim(a, b) - ssim_loops(a, b))])
    closed = psnr(np.zeros((1, 3, 8, 8)), np.full((1, 3, 8, 8), 0.5))
    ok = errs[0] <= 1e-4 and errs[1] <= 1e-4 and errs[2] <= 1e-3 and abs(closed - 6.0206) <= 1e-3
    verdict(7, ok, f"psnr err {errs[0]:.1e}, l1 err {errs[1]:.1e}, ssim err {errs[2]:.1e}; "
            f"closed form {closed:.4f} dB")


@pytest.mark.slow
def test_criterion_08_overfit(verdict):
    rep = overfit(steps=1500)
    ok = rep.gain_composite >= 10 and rep.steps <= 2000 and rep.seconds < 600
    verdict(8, ok, f"{rep.steps} steps in {rep.seconds:.0f} s; composite PSNR "
            f"{rep.psnr_composite[0]:.2f} -> {rep.psnr_composite[1]:.2f} dB ({rep.gain_composite:+.2f}); "
            f"raw output {rep.psnr_raw[0]:.2f} -> {rep.psnr_raw[1]:.2f} dB ({rep.gain_raw:+.2f})")


@pytest.mark.slow
def test_criterion_09_ablation_direction(verdict):
    res = ablation(epochs=ABLATION_EPOCHS, log=None)
    inversions = ablation_order(res)
    table = ", ".join(f"{k} {v['l1']:.5f}" for k, v in res.items())
    detail = f"{ABLATION_EPOCHS} epochs; mean L1: {table}"
    detail += f"; inversions logged: {inversions}" if inversions else "; ordering holds"
    # inversions are findings, not failures
    verdict(9, all(math.isfinite(v["l1"]) for v in res.values()), detail)


def test_criterion_10_determinism(verdict, tmp_path):
    cfg = TrainConfig(lr_train=1e-3, batch_size=2, epochs_train=2, epochs_finetune=1, T=3, seed=5,
                      net={"stem_channels": 2, "proj_channels": 2, "recon_channels": [4, 4, 4],
                           "head_channels": [4, 4], "n_res_blocks": 1})
    data = [Sample(synthetic_image(i, 64)) for i in range(3)]
    a, b = train(cfg, data), train(cfg, data)
    same_curve = [r["loss"] for r in a.history] == [r["loss"] for r in b.history]
    a.checkpoint.save(tmp_path / "a.bin")
    Checkpoint.load(tmp_path / "a.bin").save(tmp_path / "b.bin")
    same_bytes = (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    verdict(10, same_curve and same_bytes,
            f"{len(a.history)}-step loss curves identical: {same_curve}; checkpoint round trip identical: {same_bytes}")
