"""Attention-map overlays and dense-correspondence drawings written as binary PPM."""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DataFormatError, normalize
from .losses import match_patches
from .vit import Backbone, encode


def write_ppm(path, rgb: np.ndarray) -> Path:
    """Write ``[H, W, 3]`` uint8 as P6 with maxval 255."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected uint8 [H, W, 3], got {rgb.dtype} {rgb.shape}")
    path = Path(path)
    h, w, _ = rgb.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes())
    return path


def _tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 2
    while len(out) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError("PPM header ended early")
        out.append(raw[start:pos])
    return out, pos + 1


def read_ppm(path) -> np.ndarray:
    """Read a P6 image with maxval 255 into ``[H, W, 3]`` uint8."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read image {path}: {exc}") from None
    if raw[:2] != b"P6":
        raise DataFormatError(f"{path}: not a binary PPM (P6) file")
    (w, h, maxval), start = _tokens(raw, 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise DataFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    need = w * h * 3
    if len(raw) - start < need:
        raise DataFormatError(f"{path}: pixel data truncated, expected {need} bytes, found {len(raw) - start}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=start).reshape(h, w, 3).copy()


def head_colors(n: int) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb(i / n, 0.9, 1.0) for i in range(n)])


def attention_maps(backbone: Backbone, image: np.ndarray) -> np.ndarray:
    """Last-layer class-token attention per head, upsampled to image size, scaled to 0..255.

    ``image`` is uint8 ``[3, H, W]``; returns uint8 ``[heads, H, W]``.
    """
    cfg = backbone.cfg
    with T.no_grad():
        ts = encode(backbone.params, cfg, normalize(image))
    size = image.shape[-1]
    grid = size // cfg.patch_size
    attn = ts.attn[-1, :, 0, 1:].reshape(-1, grid, grid)
    lo = attn.min(axis=(1, 2), keepdims=True)
    hi = attn.max(axis=(1, 2), keepdims=True)
    scaled = (attn - lo) / np.where(hi > lo, hi - lo, 1.0)
    up = np.repeat(np.repeat(scaled, cfg.patch_size, axis=1), cfg.patch_size, axis=2)
    return np.round(up * 255).astype(np.uint8)


def overlay(image: np.ndarray, heat: np.ndarray, color) -> np.ndarray:
    """Blend a 0..255 heat map in ``color`` over a grey copy of ``image`` (``[3, H, W]``)."""
    grey = image.astype(np.float64).mean(axis=0)[..., None] * 0.5
    tint = (heat.astype(np.float64) / 255.0)[..., None] * np.asarray(color)[None, None, :] * 255.0
    return np.clip(np.round(grey + 0.5 * tint), 0, 255).astype(np.uint8)


def write_attention(backbone: Backbone, image: np.ndarray, out_dir, stem: str) -> list[Path]:
    """One overlay per head plus a combined map (``heads + 1`` files)."""
    out_dir = Path(out_dir)
    maps = attention_maps(backbone, image)
    colors = head_colors(len(maps))
    paths = [write_ppm(out_dir / f"{stem}_head{h}.ppm", overlay(image, m, colors[h])) for h, m in enumerate(maps)]
    combined = np.zeros(maps.shape[1:] + (3,))
    for m, c in zip(maps, colors):
        combined += (m.astype(np.float64) / 255.0)[..., None] * c * 255.0 / len(maps)
    grey = image.astype(np.float64).mean(axis=0)[..., None] * 0.4
    paths.append(write_ppm(out_dir / f"{stem}_heads.ppm", np.clip(np.round(grey + combined), 0, 255).astype(np.uint8)))
    return paths


def patch_center(index: int, grid: int, patch: int) -> tuple[int, int]:
    """Pixel ``(x, y)`` at the centre of patch ``index`` in row-major grid order."""
    row, col = divmod(int(index), grid)
    return col * patch + patch // 2, row * patch + patch // 2


def correspondences(backbone: Backbone, image_a: np.ndarray, image_b: np.ndarray, top: int = 8):
    """Best matches from the ``top`` most-attended patches of ``a`` into ``b``.

    Returns a list of ``((xa, ya), (xb, yb))`` pixel centres in each image's own frame.
    """
    cfg = backbone.cfg
    with T.no_grad():
        ta = encode(backbone.params, cfg, normalize(image_a))
        tb = encode(backbone.params, cfg, normalize(image_b))
    matches = match_patches(ta.patches.data, tb.patches.data)
    weight = ta.attn[-1, :, 0, 1:].mean(axis=0)
    order = np.argsort(-weight, kind="stable")[:top]
    grid = image_a.shape[-1] // cfg.patch_size
    return [(patch_center(k, grid, cfg.patch_size), patch_center(matches.k_plus[k], grid, cfg.patch_size)) for k in order]


def _draw_line(canvas: np.ndarray, p0, p1, color) -> None:
    n = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]))) + 1
    xs = np.round(np.linspace(p0[0], p1[0], n)).astype(int)
    ys = np.round(np.linspace(p0[1], p1[1], n)).astype(int)
    canvas[ys, xs] = color


def draw_correspondences(image_a: np.ndarray, image_b: np.ndarray, lines) -> np.ndarray:
    """Side-by-side ``[H, 2W, 3]`` canvas with one coloured line per match."""
    a = image_a.transpose(1, 2, 0)
    b = image_b.transpose(1, 2, 0)
    canvas = np.concatenate([a, b], axis=1).copy()
    w = a.shape[1]
    colors = np.round(head_colors(max(len(lines), 1)) * 255).astype(np.uint8)
    for (pa, pb), c in zip(lines, colors):
        _draw_line(canvas, pa, (pb[0] + w, pb[1]), c)
    return canvas
