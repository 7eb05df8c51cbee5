"""Image and mask I/O, synthetic free-form masks, structure maps, manifests."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import tensor as T
from .gle import gaussian_blur3
from .pconv import MaskPlane
from .tensor import Tensor4

RATIO_CLASSES = {
    "0-10": (0.0, 0.1),
    "10-20": (0.1, 0.2),
    "20-30": (0.2, 0.3),
    "30-40": (0.3, 0.4),
    "40-50": (0.4, 0.5),
    "50-60": (0.5, 0.6),
}
BORDER = 8


# ---------------------------------------------------------------- images


def load_image(path: str | Path, size: int | tuple[int, int] | None = None) -> Tensor4:
    """8-bit RGB (PNG or PPM) -> (1, 3, h, w) in [0, 1], optional bilinear resize."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise ValueError(f"cannot read image {path}: {e}") from e
    t = Tensor4(arr.transpose(2, 0, 1)[None])
    if size is not None:
        t = resize_image(t, size)
    return t


def resize_image(t: Tensor4, size: int | tuple[int, int]) -> Tensor4:
    h, w = (size, size) if isinstance(size, int) else size
    if (t.h, t.w) == (h, w):
        return t
    out = np.empty((t.n, t.c, h, w), np.float32)
    for i in range(t.n):
        for c in range(t.c):
            im = Image.fromarray(t.data[i, c].astype(np.float32), mode="F")
            out[i, c] = np.asarray(im.resize((w, h), Image.BILINEAR))
    return Tensor4(np.clip(out, 0.0, 1.0))


def to_uint8(t: Tensor4, index: int = 0) -> np.ndarray:
    return np.clip(np.rint(t.data[index].transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def save_image(t: Tensor4, path: str | Path, index: int = 0) -> None:
    """Write sample ``index`` as 8-bit RGB; format from the suffix (.png, .ppm)."""
    if t.c != 3:
        raise T.ShapeError(f"save_image needs 3 channels, got {t.c}")
    Image.fromarray(to_uint8(t, index), mode="RGB").save(path)


def load_mask(path: str | Path, size: int | tuple[int, int] | None = None,
              invert: bool = False) -> MaskPlane:
    """Grayscale mask file; values >= 128 are valid (or holes with ``invert``)."""
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if size is not None:
                h, w = (size, size) if isinstance(size, int) else size
                im = im.resize((w, h), Image.NEAREST)
            arr = np.asarray(im)
    except (OSError, ValueError) as e:
        raise ValueError(f"cannot read mask {path}: {e}") from e
    valid = arr >= 128
    return MaskPlane((~valid if invert else valid).astype(np.uint8))


def save_mask(m: MaskPlane, path: str | Path, index: int = 0) -> None:
    Image.fromarray((m.bits[index, 0] * 255).astype(np.uint8), mode="L").save(path)


# ---------------------------------------------------------------- masks


@dataclass(frozen=True)
class MaskSpec:
    ratio_class: str = "10-20"
    with_border: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.ratio_class not in RATIO_CLASSES:
            raise ValueError(f"unknown ratio class {self.ratio_class!r}; choose from {list(RATIO_CLASSES)}")

    @property
    def bounds(self) -> tuple[float, float]:
        return RATIO_CLASSES[self.ratio_class]


class MaskGenerationError(RuntimeError):
    pass


STROKE_STEP = 4.0  # px between random-walk vertices
STROKE_VERTICES = 256


def _random_walk(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Vertices of one brush path; drawing a longer prefix only ever adds pixels."""
    angles = rng.uniform(0, 2 * np.pi) + np.cumsum(rng.uniform(-np.pi / 6, np.pi / 6, STROKE_VERTICES))
    pts = np.empty((STROKE_VERTICES + 1, 2))
    pts[0] = rng.uniform(0, w), rng.uniform(0, h)
    for i, a in enumerate(angles):
        x = pts[i, 0] + STROKE_STEP * np.cos(a)
        y = pts[i, 1] + STROKE_STEP * np.sin(a)
        # bounce off the borders so paths stay inside the canvas
        if not 0 <= x < w:
            x = pts[i, 0] - STROKE_STEP * np.cos(a)
        if not 0 <= y < h:
            y = pts[i, 1] - STROKE_STEP * np.sin(a)
        pts[i + 1] = x, y
    return pts


def _rasterize(paths: list[np.ndarray], widths, n_vertex: int, h: int, w: int, border: bool) -> np.ndarray:
    canvas = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    for pts, wd in zip(paths, widths):
        seg = [tuple(p) for p in pts[: n_vertex + 1]]
        draw.line(seg, fill=1, width=int(wd))
        r = wd / 2
        for px, py in seg:
            draw.ellipse((px - r, py - r, px + r, py + r), fill=1)
    holes = np.array(canvas, dtype=np.uint8)
    if border:
        holes[:BORDER] = 0
        holes[-BORDER:] = 0
        holes[:, :BORDER] = 0
        holes[:, -BORDER:] = 0
    return holes


def generate_mask(spec: MaskSpec, h: int = 256, w: int = 256, max_attempts: int = 100) -> MaskPlane:
    """Free-form brush-stroke holes whose area fraction lies in ``spec.ratio_class``.

    Each attempt samples 3-12 random-walk strokes 4-24 px thick, then
    bisects on how much of every walk is drawn until the hole fraction lands
    in the class. Attempts whose full walks stay too small, or that jump
    over the class, are redrawn. Deterministic in ``spec.seed``.
    """
    if h < 64 or w < 64:
        raise ValueError("masks need h, w >= 64")
    lo, hi = spec.bounds
    rng = np.random.default_rng(spec.seed)
    for _ in range(max_attempts):
        n_strokes = int(rng.integers(3, 13))
        widths = rng.integers(4, 25, size=n_strokes)
        paths = [_random_walk(rng, h, w) for _ in range(n_strokes)]
        a, b = 0, STROKE_VERTICES
        while a <= b:
            k = (a + b) // 2
            holes = _rasterize(paths, widths, k, h, w, spec.with_border)
            frac = holes.mean()
            if lo < frac <= hi:
                return MaskPlane(1 - holes)
            if frac <= lo:
                a = k + 1
            else:
                b = k - 1
    raise MaskGenerationError(f"no mask in class {spec.ratio_class} after {max_attempts} attempts at {h}x{w}")


# ---------------------------------------------------------------- structure


def _local_range(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(p, (3, 3), axis=(2, 3))
    return win.max(axis=(4, 5)) - win.min(axis=(4, 5))


def structural_map(image: Tensor4, rounds: int = 4, edge_range: float = 0.2) -> Tensor4:
    """Edge-preserving smoothing: blur everywhere except where the 3x3 range exceeds ``edge_range``."""
    x = image.data
    for _ in range(rounds):
        keep = _local_range(x) > edge_range
        x = np.where(keep, x, gaussian_blur3(Tensor4(x)).data)
    return Tensor4(x)


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestItem:
    image: Path
    mask: Path | None = None
    structure: Path | None = None  # precomputed structure map, used instead of ``structural_map``


@dataclass
class DatasetManifest:
    items: list[ManifestItem]
    resolution: int = 256
    split: str = "train"
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.resolution % 32:
            raise ValueError(f"resolution {self.resolution} not divisible by 32")

    def __len__(self) -> int:
        return len(self.items)

    def load(self, i: int) -> tuple[Tensor4, MaskPlane | None]:
        item = self.items[i]
        img = load_image(item.image, self.resolution)
        mask = load_mask(item.mask, self.resolution) if item.mask else None
        return img, mask

    def load_structure(self, i: int) -> Tensor4 | None:
        p = self.items[i].structure
        return load_image(p, self.resolution) if p else None

    def validate(self) -> None:
        for it in self.items:
            for p in (it.image, it.mask, it.structure):
                if p is not None and not Path(p).is_file():
                    raise FileNotFoundError(p)

    def to_json(self) -> str:
        items = []
        for it in self.items:
            d = {"image": str(it.image)}
            if it.mask is not None:
                d["mask"] = str(it.mask)
            if it.structure is not None:
                d["structure"] = str(it.structure)
            items.append(d)
        return json.dumps({"resolution": self.resolution, "split": self.split, "items": items}, indent=2)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read ``{"resolution": 256, "items": [{"image": ..., "mask": ..., "structure": ...}]}``.

    Only ``image`` is required per item; relative paths resolve against the file.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    root = path.parent
    items = []
    for d in doc.get("items", []):
        img = root / d["image"]
        mask = root / d["mask"] if d.get("mask") else None
        struct = root / d["structure"] if d.get("structure") else None
        items.append(ManifestItem(img, mask, struct))
    m = DatasetManifest(items, int(doc.get("resolution", 256)), doc.get("split", "train"), root)
    m.validate()
    return m


def synthetic_image(seed: int, size: int = 64) -> Tensor4:
    """Smooth gradients plus a few flat shapes; a stand-in for natural images in experiments."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.empty((3, size, size))
    for c in range(3):
        a, b, d = rng.uniform(-0.5, 0.5, 3)
        img[c] = 0.5 + a * xx + b * yy + d * np.sin(2 * np.pi * rng.uniform(0.5, 2) * (xx + yy))
    canvas = Image.new("RGB", (size, size), 0)
    layer = Image.new("L", (size, size), 0)
    draw, ldraw = ImageDraw.Draw(canvas), ImageDraw.Draw(layer)
    for _ in range(int(rng.integers(2, 5))):
        x0, y0 = rng.integers(0, size - 8, 2)
        x1, y1 = x0 + rng.integers(8, size // 2), y0 + rng.integers(8, size // 2)
        color = tuple(int(v) for v in rng.integers(0, 256, 3))
        if rng.random() < 0.5:
            draw.rectangle((x0, y0, x1, y1), fill=color)
            ldraw.rectangle((x0, y0, x1, y1), fill=255)
        else:
            draw.ellipse((x0, y0, x1, y1), fill=color)
            ldraw.ellipse((x0, y0, x1, y1), fill=255)
    shapes = np.asarray(canvas, np.float64).transpose(2, 0, 1) / 255.0
    on = np.asarray(layer)[None] > 0
    img = np.where(on, shapes, img)
    img = np.rint(np.clip(img, 0, 1) * 255) / 255.0
    return Tensor4(img[None].astype(np.float32))
