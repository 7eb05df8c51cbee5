"""Small training experiments: single-image overfit and the ablation sweep."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import MaskSpec, generate_mask, synthetic_image
from .metrics import psnr
from .network import InpaintNet
from .tensor import Tensor4
from .train import Sample, TrainConfig, corrupt, evaluate, inpaint_with, train

# widths small enough for a CPU to run thousands of 64x64 steps in minutes
SMALL_NET = {"stem_channels": 4, "proj_channels": 8, "recon_channels": [32, 16, 8],
             "head_channels": [8, 8], "n_res_blocks": 2}


@dataclass
class OverfitReport:
    steps: int
    seconds: float
    psnr_raw: tuple[float, float]  # (initial, final) network output vs ground truth
    psnr_composite: tuple[float, float]
    losses: list[float] = field(default_factory=list)

    @property
    def gain_raw(self) -> float:
        return self.psnr_raw[1] - self.psnr_raw[0]

    @property
    def gain_composite(self) -> float:
        return self.psnr_composite[1] - self.psnr_composite[0]


def _psnrs(net: InpaintNet, image: Tensor4, mask) -> tuple[float, float]:
    x, st = corrupt(image, mask)
    raw = net(x, st, mask)
    return psnr(raw, image), psnr(inpaint_with(net, image, mask), image)


def overfit(steps: int = 1500, lr: float = 1e-3, T: int = 3, size: int = 64, seed: int = 0,
            image_seed: int = 3, mask_seed: int = 11, net: dict | None = None,
            log_every: int = 0) -> OverfitReport:
    """Train on one synthetic image with one fixed 10-20% mask and measure PSNR before and after."""
    image = synthetic_image(image_seed, size)
    mask = generate_mask(MaskSpec("10-20", seed=mask_seed), size, size)
    cfg = TrainConfig(lr_train=lr, batch_size=1, epochs_train=steps, epochs_finetune=0, T=T,
                      seed=seed, net=dict(net or SMALL_NET), fixed_masks=True)
    before = _psnrs(InpaintNet(cfg.net_config(), seed=seed), image, mask)

    def show(rec):
        if log_every and rec["step"] % log_every == 0:
            print(f"step {rec['step']:5d}  loss {rec['loss']:.4f}", flush=True)

    t0 = time.perf_counter()
    res = train(cfg, [Sample(image, mask)], on_step=show)
    secs = time.perf_counter() - t0
    after = _psnrs(res.net, image, mask)
    return OverfitReport(steps, secs, (before[0], after[0]), (before[1], after[1]),
                         [r["loss"] for r in res.history])


ABLATIONS = {
    "full": {"gle": True, "reinpaint": True},
    "no-gle": {"gle": False, "reinpaint": True},
    "no-reinpaint": {"gle": True, "reinpaint": False},
    "neither": {"gle": False, "reinpaint": False},
}


def synthetic_set(n: int = 20, size: int = 64, offset: int = 0) -> list[Tensor4]:
    return [synthetic_image(offset + i, size) for i in range(n)]


def ablation(epochs: int = 30, lr: float = 1e-3, T: int = 3, n_train: int = 20, n_eval: int = 20,
             seed: int = 0, net: dict | None = None, variants=None,
             log=print) -> dict[str, dict]:
    """Train each ablation variant on the same images and budget; report held-out mean L1.

    Training images are synthetic seeds 0..n_train-1; evaluation uses seeds
    1000.. under 10-20% and 30-40% masks, so each variant sees identical data.
    """
    train_set = [Sample(img) for img in synthetic_set(n_train)]
    eval_set = synthetic_set(n_eval, offset=1000)
    out = {}
    for name in variants or ABLATIONS:
        cfg = TrainConfig(lr_train=lr, batch_size=4, epochs_train=epochs, epochs_finetune=0, T=T,
                          seed=seed, net=dict(net or SMALL_NET), ablation=ABLATIONS[name],
                          mask_classes=["10-20", "20-30", "30-40"])
        t0 = time.perf_counter()
        res = train(cfg, train_set)
        table = evaluate(lambda img, m: inpaint_with(res.net, img, m), eval_set, ["10-20", "30-40"], seed=7)
        l1 = float(np.mean([r["l1"] for r in table.values()]))
        out[name] = {"l1": l1, "table": table, "final_loss": res.history[-1]["loss"],
                     "seconds": time.perf_counter() - t0}
        if log:
            log(f"{name:>13}: mean L1 {l1:.5f}  final loss {out[name]['final_loss']:.4f}  "
                f"({out[name]['seconds']:.0f} s)")
    return out


def ablation_order(results: dict[str, dict], tol: float = 0.05) -> list[str]:
    """Inversions of full <= single <= neither (within relative ``tol``), as readable strings."""
    l1 = {k: v["l1"] for k, v in results.items()}
    found = []
    for single in ("no-gle", "no-reinpaint"):
        if single not in l1:
            continue
        if "full" in l1 and l1["full"] > l1[single] * (1 + tol):
            found.append(f"full ({l1['full']:.5f}) worse than {single} ({l1[single]:.5f})")
        if "neither" in l1 and l1[single] > l1["neither"] * (1 + tol):
            found.append(f"{single} ({l1[single]:.5f}) worse than neither ({l1['neither']:.5f})")
    return found
