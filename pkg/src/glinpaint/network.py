"""Full three-stage inpainting network with named parameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .gle import GLEWeights, PYRAMID_LEVELS, PyramidWeights, extract_pyramid, split_pyramid
from .iterative import BranchWeights, fuse, run_iterations
from .pconv import MaskPlane
from .reinpaint import (ReconstructWeights, ReinpaintWeights, ResidualBlock, composite,
                        feature_merge, reconstruct, reinpaint_all)
from .tensor import ConvSpec, Tensor4

WORK_FACTOR = 8  # working resolution is H/8 x W/8


@dataclass
class NetConfig:
    """Layer widths. Defaults are the full-size network; experiments shrink them."""

    stem_channels: int = 64
    proj_channels: int = 64  # per pyramid level; a branch carries 3x this
    recon_channels: tuple[int, int, int] = (128, 64, 32)
    head_channels: tuple[int, int] = (16, 8)
    n_res_blocks: int = 3
    T: int = 6
    gle: bool = True
    reinpaint: bool = True

    def __post_init__(self):
        self.recon_channels = tuple(self.recon_channels)
        self.head_channels = tuple(self.head_channels)
        if self.T < 2:
            raise ValueError("T must be >= 2")

    @property
    def branch_channels(self) -> int:
        return 3 * self.proj_channels

    @property
    def sub_channels(self) -> int:
        return 2 * self.branch_channels

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recon_channels"] = list(self.recon_channels)
        d["head_channels"] = list(self.head_channels)
        return d


@dataclass
class Forward:
    """Everything a forward pass produces that callers may want to inspect."""

    out: Tensor4
    mask_history: list[MaskPlane]
    f_int: Tensor4
    merged: Tensor4
    pyramid_levels: list[Tensor4] = field(default_factory=list)


class InpaintNet:
    """Parameters live in ``self.params`` (name -> Tensor4), initialized He-normal from ``seed``."""

    def __init__(self, cfg: NetConfig | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg or NetConfig()
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor4] = {}
        self.bn_frozen = False
        self._build(np.random.default_rng(seed))

    # ------------------------------------------------------------ construction

    def _conv(self, rng, name: str, cin: int, cout: int, k: int, stride=1, padding=None, bias=True):
        std = np.sqrt(2.0 / (cin * k * k))
        self.params[f"{name}.weight"] = Tensor4(rng.normal(0.0, std, (cout, cin, k, k)),
                                                requires_grad=True, name=f"{name}.weight", dtype=self.dtype)
        if bias:
            self.params[f"{name}.bias"] = Tensor4(np.zeros((1, cout, 1, 1)), requires_grad=True,
                                                  name=f"{name}.bias", dtype=self.dtype)
        self._geom[name] = (stride, k // 2 if padding is None else padding)

    def _bn(self, name: str, c: int):
        self.params[f"{name}.gamma"] = Tensor4(np.ones((1, c, 1, 1)), requires_grad=True,
                                               name=f"{name}.gamma", dtype=self.dtype)
        self.params[f"{name}.beta"] = Tensor4(np.zeros((1, c, 1, 1)), requires_grad=True,
                                              name=f"{name}.beta", dtype=self.dtype)

    def _build(self, rng):
        cfg = self.cfg
        self._geom: dict[str, tuple[int, int]] = {}
        c = cfg.stem_channels
        self._conv(rng, "stem", 7, c, 3)
        for i in range(PYRAMID_LEVELS):
            self._conv(rng, f"gle.{i}.conv_gs", c, 2 * c, 7, stride=2, padding=3)
            self._conv(rng, f"gle.{i}.conv_up", 2 * c, c, 7, stride=1, padding=3)
            c *= 2
        for i in range(PYRAMID_LEVELS + 1):
            cin = cfg.stem_channels * 2 ** min(i, PYRAMID_LEVELS)
            self._conv(rng, f"proj.{i}", cin, cfg.proj_channels, 1)
        b = cfg.branch_channels
        for br in ("low", "high"):
            for j in (1, 2):
                self._conv(rng, f"iter.{br}.pconv{j}", b, b, 3)
                self._bn(f"iter.{br}.bn{j}", b)
        cat = 2 * cfg.T * b
        self._conv(rng, "fuse", cat, cat, 3)
        s = cfg.sub_channels
        for j, cin in enumerate((3 * s, s, s)):
            self._conv(rng, f"reinp.b1.{j}", cin, s, 3)
        for j, cin in enumerate((2 * s, s, s)):
            self._conv(rng, f"reinp.b2.{j}", cin, s, 3)
        cin = s
        for j, cout in enumerate(cfg.recon_channels):
            self._conv(rng, f"recon.up.{j}", cin, cout, 3)
            self._bn(f"recon.up_bn.{j}", cout)
            cin = cout
        for j in range(cfg.n_res_blocks):
            self._conv(rng, f"recon.res.{j}.conv1", cin, cin, 3)
            self._bn(f"recon.res.{j}.bn", cin)
            self._conv(rng, f"recon.res.{j}.conv2", cin, cin, 3)
        for j, cout in enumerate(cfg.head_channels):
            self._conv(rng, f"recon.head.{j}", cin, cout, 3)
            cin = cout
        self._conv(rng, f"recon.head.{len(cfg.head_channels)}", cin, 3, 1)

    # ------------------------------------------------------------ views

    def conv(self, name: str) -> ConvSpec:
        stride, padding = self._geom[name]
        return ConvSpec(self.params[f"{name}.weight"], self.params.get(f"{name}.bias"), stride, padding)

    def bn(self, name: str) -> tuple[Tensor4, Tensor4]:
        return self.params[f"{name}.gamma"], self.params[f"{name}.beta"]

    def pyramid_weights(self) -> PyramidWeights:
        mods = [GLEWeights(self.conv(f"gle.{i}.conv_gs"), self.conv(f"gle.{i}.conv_up"))
                for i in range(PYRAMID_LEVELS)]
        return PyramidWeights(self.conv("stem"), mods, [self.conv(f"proj.{i}") for i in range(PYRAMID_LEVELS + 1)])

    def branch_weights(self, br: str) -> BranchWeights:
        return BranchWeights(self.conv(f"iter.{br}.pconv1"), self.conv(f"iter.{br}.pconv2"),
                             self.bn(f"iter.{br}.bn1"), self.bn(f"iter.{br}.bn2"))

    def reinpaint_weights(self) -> ReinpaintWeights:
        return ReinpaintWeights([self.conv(f"reinp.b1.{j}") for j in range(3)],
                                [self.conv(f"reinp.b2.{j}") for j in range(3)])

    def reconstruct_weights(self) -> ReconstructWeights:
        cfg = self.cfg
        k = len(cfg.recon_channels)
        return ReconstructWeights(
            [self.conv(f"recon.up.{j}") for j in range(k)],
            [self.bn(f"recon.up_bn.{j}") for j in range(k)],
            [ResidualBlock(self.conv(f"recon.res.{j}.conv1"), self.bn(f"recon.res.{j}.bn"),
                           self.conv(f"recon.res.{j}.conv2")) for j in range(cfg.n_res_blocks)],
            [self.conv(f"recon.head.{j}") for j in range(len(cfg.head_channels) + 1)],
        )

    def bn_param_names(self) -> list[str]:
        return [k for k in self.params if k.endswith(".gamma") or k.endswith(".beta")]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def astype(self, dtype) -> "InpaintNet":
        """Copy of the network with parameters cast to ``dtype``."""
        other = object.__new__(InpaintNet)
        other.cfg = self.cfg
        other.dtype = np.dtype(dtype)
        other.bn_frozen = self.bn_frozen
        other._geom = dict(self._geom)
        other.params = {k: Tensor4(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return other

    # ------------------------------------------------------------ forward

    def forward(self, image: Tensor4, struct_image: Tensor4, mask: MaskPlane) -> Forward:
        cfg = self.cfg
        n, _, h, w = image.dims
        image = Tensor4(image.data.astype(self.dtype, copy=False))
        struct_image = Tensor4(struct_image.data.astype(self.dtype, copy=False))
        pw = self.pyramid_weights()
        pyr = extract_pyramid(image, struct_image, mask, pw, ablate_gle=not cfg.gle)
        low, high, h0 = split_pyramid(pyr, pw.proj, mask, (h // WORK_FACTOR, w // WORK_FACTOR))
        if h0.n != n:
            h0 = MaskPlane(np.repeat(h0.bits, n, axis=0))
        cat, history = run_iterations(low, high, h0, cfg.T, self.branch_weights("low"),
                                      self.branch_weights("high"), frozen_bn=self.bn_frozen)
        f_int = fuse(cat, self.conv("fuse"))
        feats = reinpaint_all(f_int, history, cfg.T, self.reinpaint_weights() if cfg.reinpaint else None)
        merged = feature_merge(feats, history)
        out = reconstruct(merged, history[-1], self.reconstruct_weights(), frozen_bn=self.bn_frozen)
        return Forward(out, history, f_int, merged, pyr.levels)

    def __call__(self, image: Tensor4, struct_image: Tensor4, mask: MaskPlane) -> Tensor4:
        return self.forward(image, struct_image, mask).out

    def inpaint(self, image: Tensor4, struct_image: Tensor4, mask: MaskPlane) -> Tensor4:
        """Network output composited onto the known pixels."""
        out = self(image, struct_image, mask)
        return composite(out, Tensor4(image.data.astype(out.dtype, copy=False)), mask)
