"""Datasets: procedural synthetic classes, CIFAR-format binaries, and view augmentation."""

from __future__ import annotations

import colorsys
import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CIFAR_PIXELS = 3 * 32 * 32
SPLIT_NAMES = ("base", "val", "novel")


class DataFormatError(ValueError):
    """A data file does not match its declared binary layout."""


@dataclass
class LabeledDataset:
    images: np.ndarray  # uint8 [n, 3, H, W]
    labels: np.ndarray  # int64 [n]
    split: str = "all"
    class_names: list[str] = field(default_factory=list)
    coarse_labels: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.class_names and len(self.labels) and self.labels.max() >= len(self.class_names):
            raise ValueError("label id exceeds class count")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, class_ids, split: str) -> "LabeledDataset":
        keep = np.isin(self.labels, np.asarray(list(class_ids)))
        coarse = None if self.coarse_labels is None else self.coarse_labels[keep]
        return replace(self, images=self.images[keep], labels=self.labels[keep], split=split, coarse_labels=coarse)


@dataclass(frozen=True)
class AugmentParams:
    output_size: int = 32
    scale: tuple[float, float] = (0.4, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter_strength: float = 0.2
    jitter_prob: float = 0.8
    blur_prob: float = 0.1
    blur_sigma: tuple[float, float] = (0.1, 1.0)

    def __post_init__(self):
        for name in ("flip_prob", "jitter_prob", "blur_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        lo, hi = self.scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"scale range must lie within (0, 1], got {self.scale}")


# ---------------------------------------------------------------------------
# synthetic classes

_HUES = (0.0, 0.12, 0.55, 0.75)
_ORIENTATIONS = (0.0, 45.0, 90.0, 135.0)
_FREQUENCIES = (2.0, 4.5)
_LAYOUTS = (
    ((0.5, 0.5),),
    ((0.28, 0.28), (0.72, 0.72)),
    ((0.25, 0.75), (0.75, 0.75), (0.5, 0.25)),
)


def _class_recipes(n_classes: int, rng: np.random.Generator) -> list[tuple[int, int, int, int]]:
    combos = list(itertools.product(range(len(_HUES)), range(len(_ORIENTATIONS)), range(len(_FREQUENCIES)), range(len(_LAYOUTS))))
    if n_classes > len(combos):
        raise ValueError(f"at most {len(combos)} synthetic classes are available")
    order = rng.permutation(len(combos))
    chosen: list[tuple[int, int, int, int]] = []
    # prefer recipes that differ from every chosen one in at least two attributes
    for need in (2, 1):
        for i in order:
            c = combos[i]
            if c in chosen:
                continue
            if all(sum(a != b for a, b in zip(c, o)) >= need for o in chosen):
                chosen.append(c)
                if len(chosen) == n_classes:
                    return chosen
    return chosen


def _render(recipe: tuple[int, int, int, int], size: int, rng: np.random.Generator) -> np.ndarray:
    hue_i, ori_i, freq_i, lay_i = recipe
    hue = (_HUES[hue_i] + rng.uniform(-0.03, 0.03)) % 1.0
    sat = rng.uniform(0.45, 0.85)
    val = rng.uniform(0.45, 0.9)
    base = np.array(colorsys.hsv_to_rgb(hue, sat, val))
    blob_rgb = np.array(colorsys.hsv_to_rgb((hue + 0.5) % 1.0, rng.uniform(0.3, 0.7), rng.uniform(0.5, 1.0)))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    theta = math.radians(_ORIENTATIONS[ori_i] + rng.uniform(-8, 8))
    freq = _FREQUENCIES[freq_i] * rng.uniform(0.9, 1.1)
    phase = rng.uniform(0, 2 * math.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    amp = rng.uniform(0.35, 0.6)
    img = base[:, None, None] * (1.0 - amp + amp * stripes)[None]

    alpha = np.zeros((size, size))
    for cx, cy in _LAYOUTS[lay_i]:
        cx += rng.uniform(-0.08, 0.08)
        cy += rng.uniform(-0.08, 0.08)
        r = rng.uniform(0.09, 0.15)
        alpha = np.maximum(alpha, np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r)))
    img = img * (1 - alpha[None]) + blob_rgb[:, None, None] * alpha[None]
    img = img + rng.normal(0.0, 0.03, img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def generate_synthetic(n_classes: int = 12, per_class: int = 200, image_size: int = 32, seed: int = 0) -> LabeledDataset:
    """Procedural classes: hue x stripe orientation x stripe frequency x blob layout.

    Classes share hues, so mean colour alone cannot separate them. Each image
    draws its own phase, jitter, saturation, blob positions and pixel noise.
    """
    if n_classes < 7:
        raise ValueError("need at least 7 classes for a base split plus a 5-way novel split")
    rng = np.random.default_rng(seed)
    recipes = _class_recipes(n_classes, rng)
    images = np.empty((n_classes * per_class, 3, image_size, image_size), dtype=np.uint8)
    labels = np.repeat(np.arange(n_classes), per_class)
    for c, recipe in enumerate(recipes):
        for j in range(per_class):
            images[c * per_class + j] = _render(recipe, image_size, rng)
    names = [f"h{h}-o{int(_ORIENTATIONS[o])}-f{_FREQUENCIES[f]:g}-b{len(_LAYOUTS[b])}" for h, o, f, b in recipes]
    return LabeledDataset(images=images, labels=labels, split="all", class_names=names)


def split_dataset(ds: LabeledDataset, splits: dict[str, list[int]]) -> dict[str, LabeledDataset]:
    """Partition by class id into named splits; the class sets must be disjoint."""
    seen: set[int] = set()
    for name, ids in splits.items():
        overlap = seen.intersection(ids)
        if overlap:
            raise ValueError(f"class ids {sorted(overlap)} appear in more than one split (at {name!r})")
        seen.update(ids)
    return {name: ds.subset(ids, name) for name, ids in splits.items()}


def default_splits(n_classes: int, base: int, val: int, novel: int) -> dict[str, list[int]]:
    if base + val + novel != n_classes:
        raise ValueError(f"split sizes {base}+{val}+{novel} do not add up to {n_classes} classes")
    ids = list(range(n_classes))
    return {"base": ids[:base], "val": ids[base : base + val], "novel": ids[base + val :]}


# ---------------------------------------------------------------------------
# CIFAR binary format


def _record_layout(variant: str) -> int:
    if variant in ("cifar10", "cifar10-like"):
        return 1
    if variant in ("cifar100", "cifar100-like"):
        return 2
    raise ValueError(f"unknown CIFAR variant {variant!r}")


def load_cifar_binary(path, variant: str = "cifar10") -> LabeledDataset:
    """Decode a CIFAR-style binary file.

    cifar10 records are 1 label byte + 3072 pixel bytes; cifar100 records
    carry a coarse and a fine label byte (the fine one is used as the label).
    Pixels are stored as 1024 R, then G, then B bytes, each row-major.

    Raises:
        DataFormatError: if the file size is not a whole number of records.
    """
    n_label = _record_layout(variant)
    record = n_label + CIFAR_PIXELS
    raw = np.fromfile(path, dtype=np.uint8) if Path(path).stat().st_size else np.zeros(0, np.uint8)
    if raw.size % record:
        offset = (raw.size // record) * record
        raise DataFormatError(f"{path}: trailing partial record at byte offset {offset} ({raw.size - offset} of {record} bytes)")
    rows = raw.reshape(-1, record)
    images = rows[:, n_label:].reshape(-1, 3, 32, 32).copy()
    labels = rows[:, n_label - 1].astype(np.int64)
    coarse = rows[:, 0].astype(np.int64) if n_label == 2 else None
    return LabeledDataset(images=images, labels=labels, split="all", coarse_labels=coarse)


def encode_cifar_binary(ds: LabeledDataset, path, variant: str = "cifar10") -> None:
    """Write ``ds`` in the CIFAR binary layout (inverse of :func:`load_cifar_binary`)."""
    n_label = _record_layout(variant)
    if ds.images.shape[1:] != (3, 32, 32):
        raise DataFormatError(f"CIFAR records hold 3x32x32 images, got {ds.images.shape[1:]}")
    n = len(ds)
    rows = np.empty((n, n_label + CIFAR_PIXELS), dtype=np.uint8)
    if n_label == 2:
        coarse = ds.coarse_labels if ds.coarse_labels is not None else np.zeros(n, dtype=np.int64)
        rows[:, 0] = coarse
    rows[:, n_label - 1] = ds.labels
    rows[:, n_label:] = ds.images.reshape(n, -1)
    rows.tofile(path)


def read_split_file(path) -> dict[str, list[int]]:
    """Parse ``#base`` / ``#val`` / ``#novel`` sections of one class index per line."""
    splits: dict[str, list[int]] = {}
    current = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.strip()
        if not text:
            continue
        if text.startswith("#"):
            current = text[1:].strip()
            if current not in SPLIT_NAMES:
                raise DataFormatError(f"{path}:{lineno}: unknown section {text!r}")
            splits.setdefault(current, [])
            continue
        if current is None:
            raise DataFormatError(f"{path}:{lineno}: class index before any section header")
        try:
            splits[current].append(int(text))
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: expected an integer class index, got {text!r}") from None
    return splits


# ---------------------------------------------------------------------------
# augmentation


def to_float(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32, copy=False)


def normalize(images: np.ndarray) -> np.ndarray:
    """Map [0, 1] (or uint8) pixels to the model's input range."""
    return ((to_float(images) - 0.5) / 0.25).astype(np.float32)


def _crop_box(h: int, w: int, params: AugmentParams, rng: np.random.Generator) -> tuple[float, float, float, float]:
    area = h * w
    log_lo, log_hi = math.log(params.ratio[0]), math.log(params.ratio[1])
    for _ in range(10):
        target = area * rng.uniform(*params.scale)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = math.sqrt(target * aspect)
        ch = math.sqrt(target / aspect)
        if 0 < cw <= w and 0 < ch <= h:
            x0 = rng.uniform(0, w - cw)
            y0 = rng.uniform(0, h - ch)
            return x0, y0, cw, ch
    return 0.0, 0.0, float(w), float(h)


def resized_crop(image: np.ndarray, box: tuple[float, float, float, float], size: int) -> np.ndarray:
    """Bilinear resample of the box ``(x0, y0, width, height)`` to ``size x size``."""
    _, h, w = image.shape
    x0, y0, cw, ch = box
    xs = np.clip(x0 + (np.arange(size) + 0.5) * cw / size - 0.5, 0, w - 1)
    ys = np.clip(y0 + (np.arange(size) + 0.5) * ch / size - 0.5, 0, h - 1)
    xl = np.floor(xs).astype(int)
    yl = np.floor(ys).astype(int)
    xh = np.minimum(xl + 1, w - 1)
    yh = np.minimum(yl + 1, h - 1)
    wx = (xs - xl)[None, None, :]
    wy = (ys - yl)[None, :, None]
    top = image[:, yl][:, :, xl] * (1 - wx) + image[:, yl][:, :, xh] * wx
    bottom = image[:, yh][:, :, xl] * (1 - wx) + image[:, yh][:, :, xh] * wx
    return (top * (1 - wy) + bottom * wy).astype(np.float32)


def _jitter(img: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    b, c, s = rng.uniform(1 - strength, 1 + strength, size=3)
    img = img * b
    gray = img.mean()
    img = (img - gray) * c + gray
    lum = img.mean(axis=0, keepdims=True)
    img = (img - lum) * s + lum
    return np.clip(img, 0.0, 1.0)


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = np.exp(-0.5 * (np.arange(-1, 2) / sigma) ** 2)
    k /= k.sum()
    padded = np.pad(img, ((0, 0), (1, 1), (0, 0)), mode="reflect")
    img = k[0] * padded[:, :-2] + k[1] * padded[:, 1:-1] + k[2] * padded[:, 2:]
    padded = np.pad(img, ((0, 0), (0, 0), (1, 1)), mode="reflect")
    return k[0] * padded[:, :, :-2] + k[1] * padded[:, :, 1:-1] + k[2] * padded[:, :, 2:]


def augment(image: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Random resized crop, horizontal flip, colour jitter and blur; returns float [3, S, S] in [0, 1]."""
    img = to_float(image)
    _, h, w = img.shape
    box = _crop_box(h, w, params, rng)
    out = resized_crop(img, box, params.output_size)
    if rng.random() < params.flip_prob:
        out = out[:, :, ::-1]
    if params.jitter_strength > 0 and rng.random() < params.jitter_prob:
        out = _jitter(out, params.jitter_strength, rng)
    if rng.random() < params.blur_prob:
        out = _blur(out, rng.uniform(*params.blur_sigma))
    return np.ascontiguousarray(out, dtype=np.float32)
