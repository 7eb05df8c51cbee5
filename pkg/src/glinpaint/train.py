"""Adam, checkpoints, the two-phase training schedule, inference and evaluation."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .data import (DatasetManifest, MaskSpec, generate_mask, load_image, load_manifest, load_mask,
                   save_image, structural_map)
from .losses import InpaintingLoss, LossWeights
from .metrics import mean_l1, psnr, ssim
from .network import InpaintNet, NetConfig
from .pconv import MaskPlane
from .reinpaint import composite
from .tensor import NonFiniteError, Tape, Tensor4, backward, mul_plane, t4f_bytes, t4f_parse

log = logging.getLogger(__name__)

# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    lr_train: float = 1e-4
    lr_finetune: float = 1e-5
    batch_size: int = 4
    epochs_train: int = 40
    epochs_finetune: int = 20
    T: int = 6
    loss: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    ablation: dict = field(default_factory=lambda: {"gle": True, "reinpaint": True})
    train_manifest: str | None = None
    val_manifest: str | None = None
    net: dict = field(default_factory=dict)  # NetConfig widths
    mask_classes: list[str] = field(default_factory=lambda: ["10-20"])
    fixed_masks: bool = False  # same mask for an item every epoch
    grad_clip: float = 5.0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if self.lr_train <= 0 or self.lr_finetune <= 0:
            raise ValueError("learning rates must be positive")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.ablation = {"gle": bool(self.ablation.get("gle", True)),
                         "reinpaint": bool(self.ablation.get("reinpaint", True))}

    def net_config(self) -> NetConfig:
        return NetConfig.from_dict({**self.net, "T": self.T, "gle": self.ablation["gle"],
                                    "reinpaint": self.ablation["reinpaint"]})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = asdict(self.loss)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- Adam

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor4], state: AdamState, lr: float,
              frozen: Iterable[str] = ()) -> None:
    """Bias-corrected Adam update of every parameter holding a gradient.

    Raises before touching anything if a gradient is non-finite.
    """
    frozen = set(frozen)
    live = {k: p for k, p in params.items() if k not in frozen and p.grad is not None}
    for k, p in live.items():
        if not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient for {k}; step aborted")
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for k, p in live.items():
        g = p.grad
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * v + (1 - BETA2) * g * g
        state.m[k], state.v[k] = m.astype(p.data.dtype), v.astype(p.data.dtype)
        upd = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.data = (p.data - upd).astype(p.data.dtype)


def clip_grad_norm(params: dict[str, Tensor4], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values() if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        k = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * k).astype(p.data.dtype)
    return norm


# ---------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"GLIP"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, Tensor4]
    adam: AdamState
    config: dict
    epoch: int = 0

    def to_bytes(self) -> bytes:
        out = bytearray(CKPT_MAGIC)
        out += struct.pack("<II", CKPT_VERSION, len(self.params))
        for name, t in self.params.items():
            out += _entry(name, t.data)
        opt = [("trainer.step", np.full((1, 1, 1, 1), self.adam.step, np.float32)),
               ("trainer.epoch", np.full((1, 1, 1, 1), self.epoch, np.float32))]
        opt += [(f"adam.m.{k}", a) for k, a in self.adam.m.items()]
        opt += [(f"adam.v.{k}", a) for k, a in self.adam.v.items()]
        out += struct.pack("<I", len(opt))
        for name, a in opt:
            out += _entry(name, a)
        cfg = json.dumps(self.config, sort_keys=True).encode("utf-8")
        out += struct.pack("<I", len(cfg)) + cfg
        return bytes(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != CKPT_MAGIC:
            raise ValueError("not a checkpoint (bad magic)")
        version, count = struct.unpack_from("<II", buf, 4)
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = 12
        params = {}
        for _ in range(count):
            name, t, off = _read_entry(buf, off)
            params[name] = Tensor4(t.data, requires_grad=True, name=name)
        (n_opt,) = struct.unpack_from("<I", buf, off)
        off += 4
        adam, epoch = AdamState(), 0
        for _ in range(n_opt):
            name, t, off = _read_entry(buf, off)
            if name == "trainer.step":
                adam.step = int(t.item())
            elif name == "trainer.epoch":
                epoch = int(t.item())
            elif name.startswith("adam.m."):
                adam.m[name[7:]] = t.data
            elif name.startswith("adam.v."):
                adam.v[name[7:]] = t.data
            else:
                raise ValueError(f"unknown optimizer entry {name}")
        (n_cfg,) = struct.unpack_from("<I", buf, off)
        off += 4
        config = json.loads(buf[off : off + n_cfg].decode("utf-8"))
        if off + n_cfg != len(buf):
            raise ValueError("trailing bytes in checkpoint")
        return cls(params, adam, config, epoch)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def network(self) -> InpaintNet:
        cfg = self.train_config()
        net = InpaintNet(cfg.net_config(), seed=cfg.seed)
        if set(net.params) != set(self.params):
            missing = set(net.params) ^ set(self.params)
            raise ValueError(f"checkpoint parameters do not match the network: {sorted(missing)[:5]}")
        for k, p in net.params.items():
            if p.dims != self.params[k].dims:
                raise ValueError(f"shape mismatch for {k}: {p.dims} vs {self.params[k].dims}")
            p.data = self.params[k].data.copy()
        return net


def _entry(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw + t4f_bytes(arr)


def _read_entry(buf: bytes, off: int):
    (n,) = struct.unpack_from("<H", buf, off)
    name = buf[off + 2 : off + 2 + n].decode("utf-8")
    t, off = t4f_parse(buf, off + 2 + n)
    return name, t, off


def snapshot(net: InpaintNet, adam: AdamState, cfg: TrainConfig, epoch: int) -> Checkpoint:
    params = {k: Tensor4(p.data.copy(), name=k) for k, p in net.params.items()}
    state = AdamState({k: a.copy() for k, a in adam.m.items()}, {k: a.copy() for k, a in adam.v.items()}, adam.step)
    return Checkpoint(params, state, cfg.to_dict(), epoch)


# ---------------------------------------------------------------- training


@dataclass
class Sample:
    image: Tensor4
    mask: MaskPlane | None = None
    structure: Tensor4 | None = None


def samples_from_manifest(m: DatasetManifest) -> list[Sample]:
    return [Sample(*m.load(i), m.load_structure(i)) for i in range(len(m))]


def corrupt(image: Tensor4, mask: MaskPlane) -> tuple[Tensor4, Tensor4]:
    """Zero the holes and derive the structure map from what remains."""
    masked = mul_plane(image, mask.plane(image.n, image.dtype))
    return masked, structural_map(masked)


def mask_for(cfg: TrainConfig, item: int, epoch: int, h: int, w: int) -> MaskPlane:
    key = [cfg.seed, item] if cfg.fixed_masks else [cfg.seed, item, epoch]
    seed = int(np.random.SeedSequence(key).generate_state(1)[0])
    cls = cfg.mask_classes[int(seed % len(cfg.mask_classes))]
    return generate_mask(MaskSpec(cls, seed=seed), h, w)


def batch_for(samples: list[Sample], idx: list[int], cfg: TrainConfig, epoch: int,
              cache: dict | None = None):
    """Stack ground truth, corrupted inputs, structure maps and masks for ``idx``.

    ``cache`` memoizes per-item inputs whose mask does not change with the epoch.
    """
    imgs, masked, structs, masks = [], [], [], []
    for i in idx:
        s = samples[i]
        static = s.mask is not None or cfg.fixed_masks
        if cache is not None and static and i in cache:
            m, x, st = cache[i]
        else:
            m = s.mask if s.mask is not None else mask_for(cfg, i, epoch, s.image.h, s.image.w)
            x, st = corrupt(s.image, m)
            if s.structure is not None:
                st = s.structure
            if cache is not None and static:
                cache[i] = (m, x, st)
        imgs.append(s.image.data)
        masked.append(x.data)
        structs.append(st.data)
        masks.append(m.bits)
    cat = lambda xs: Tensor4(np.concatenate(xs, axis=0))  # noqa: E731
    return cat(imgs), cat(masked), cat(structs), MaskPlane(np.concatenate(masks, axis=0))


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss or gradient; carries the last good checkpoint."""

    def __init__(self, msg: str, checkpoint: Checkpoint):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    net: InpaintNet


def train(cfg: TrainConfig, samples: list[Sample] | None = None, resume: Checkpoint | None = None,
          loss_fn: InpaintingLoss | None = None, stop_after_epoch: int | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Phase 1 at ``lr_train``; phase 2 at ``lr_finetune`` with batchnorm affine weights frozen.

    Data order and masks are pure functions of (seed, epoch, item), so a
    run resumed from a checkpoint continues exactly as the uninterrupted one.
    """
    if samples is None:
        if not cfg.train_manifest:
            raise ValueError("no training data: give samples or train_manifest")
        samples = samples_from_manifest(load_manifest(cfg.train_manifest))
    if not samples:
        raise ValueError("empty training set")
    loss_fn = loss_fn or InpaintingLoss(cfg.loss)

    if resume is not None:
        net = resume.network()
        adam = AdamState({k: a.copy() for k, a in resume.adam.m.items()},
                         {k: a.copy() for k, a in resume.adam.v.items()}, resume.adam.step)
        start = resume.epoch
    else:
        net = InpaintNet(cfg.net_config(), seed=cfg.seed)
        adam, start = AdamState(), 0

    total = cfg.epochs_train + cfg.epochs_finetune
    end = total if stop_after_epoch is None else min(total, stop_after_epoch)
    history: list[dict] = []
    cache: dict = {}
    last_good = snapshot(net, adam, cfg, start)
    for epoch in range(start, end):
        finetune = epoch >= cfg.epochs_train
        net.bn_frozen = finetune
        lr = cfg.lr_finetune if finetune else cfg.lr_train
        frozen = net.bn_param_names() if finetune else ()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        for b in range(0, len(order), cfg.batch_size):
            idx = [int(i) for i in order[b : b + cfg.batch_size]]
            gt, masked, st, m = batch_for(samples, idx, cfg, epoch, cache)
            for p in net.params.values():
                p.zero_grad()
            try:
                with Tape() as tape:
                    out = net(masked, st, m)
                    loss, terms = loss_fn(out, gt, m)
                backward(loss, tape)
                norm = clip_grad_norm(net.params, cfg.grad_clip)
                adam_step(net.params, adam, lr, frozen=frozen)
            except NonFiniteError as e:
                log.error("epoch %d: %s", epoch, e)
                raise TrainingAborted(str(e), last_good) from e
            rec = {"epoch": epoch, "step": adam.step, "phase": "finetune" if finetune else "train",
                   "loss": loss.item(), "grad_norm": norm, **terms}
            history.append(rec)
            if on_step:
                on_step(rec)
        last_good = snapshot(net, adam, cfg, epoch + 1)
    return TrainResult(last_good, history, net)


# ---------------------------------------------------------------- inference / evaluation


def infer(ckpt: Checkpoint, image: Tensor4, mask: MaskPlane, T: int | None = None) -> Tensor4:
    """Inpaint ``image`` under ``mask`` and composite onto the known pixels."""
    cfg = ckpt.train_config()
    if T is not None and T != cfg.T:
        raise ValueError(f"checkpoint was trained with T={cfg.T}, asked for T={T}")
    if (mask.h, mask.w) != (image.h, image.w):
        raise ValueError("mask and image sizes differ")
    if image.h % 32 or image.w % 32:
        raise ValueError("image dims must be divisible by 32")
    net = ckpt.network()
    return inpaint_with(net, image, mask)


def inpaint_with(net: InpaintNet, image: Tensor4, mask: MaskPlane) -> Tensor4:
    masked, st = corrupt(image, mask)
    out = net(masked, st, mask)
    return composite(out, Tensor4(image.data.astype(out.dtype, copy=False)), mask)


def infer_files(ckpt_path, image_path, mask_path, out_path, T: int | None = None) -> Tensor4:
    image = load_image(image_path)
    mask = load_mask(mask_path, (image.h, image.w))
    res = infer(Checkpoint.load(ckpt_path), image, mask, T)
    save_image(res, out_path)
    return res


Predictor = Callable[[Tensor4, MaskPlane], Tensor4]


def evaluate(predict: Predictor, images: list[Tensor4], classes: Iterable[str],
             seed: int = 0, with_border: bool = False) -> dict[str, dict[str, float]]:
    """Mean PSNR / SSIM / L1 per mask ratio class over ``images``.

    ``predict`` receives the ground-truth image and mask (it must not look at
    hole pixels; ``corrupt`` zeroes them) and returns the composited result.
    """
    table = {}
    for cls in classes:
        rows = []
        for i, img in enumerate(images):
            m = generate_mask(MaskSpec(cls, with_border, seed=seed * 100003 + i), img.h, img.w)
            pred = predict(img, m)
            rows.append((psnr(pred, img), ssim(pred, img), mean_l1(pred, img)))
        arr = np.array(rows, dtype=np.float64)
        table[cls] = {"psnr": float(np.mean(arr[:, 0])), "ssim": float(np.mean(arr[:, 1])),
                      "l1": float(np.mean(arr[:, 2])), "n": len(rows)}
    return table


def checkpoint_predictor(ckpt: Checkpoint) -> Predictor:
    net = ckpt.network()
    return lambda img, m: inpaint_with(net, img, m)


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"


def metrics_text(table: dict) -> str:
    lines = [f"{'class':>8} {'n':>4} {'psnr':>12} {'ssim':>10} {'l1':>10}"]
    for cls, r in table.items():
        lines.append(f"{cls:>8} {r['n']:>4} {_fmt(r['psnr']):>12} {_fmt(r['ssim']):>10} {_fmt(r['l1']):>10}")
    return "\n".join(lines)


def metrics_json(table: dict) -> str:
    """JSON with infinite PSNR written as the string ``"inf"``."""
    clean = {c: {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in r.items()}
             for c, r in table.items()}
    return json.dumps(clean, indent=2, sort_keys=True)
