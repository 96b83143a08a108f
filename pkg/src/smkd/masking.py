"""Patch-grid mask generation: blockwise, uniform random, and none."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class MaskSpec:
    """Boolean mask over the N patches (True = replaced by the mask token).

    ``blocks`` records the rectangles ``(top, left, height, width)`` the block
    sampler placed, in placement order; it is empty for other samplers.
    """

    grid: np.ndarray
    target_ratio: float
    blocks: list[tuple[int, int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool).reshape(-1)

    @property
    def count(self) -> int:
        return int(self.grid.sum())

    @property
    def ratio(self) -> float:
        return self.count / self.grid.size


def sample_mask_ratio(
    rng: np.random.Generator,
    prob: float = 0.5,
    ratio_range: tuple[float, float] = (0.1, 0.5),
) -> float:
    """Draw a masking ratio: 0 with probability ``1 - prob``, else uniform on ``ratio_range``."""
    if rng.random() >= prob:
        return 0.0
    lo, hi = ratio_range
    return float(rng.uniform(lo, hi))


def _target_count(n: int, ratio: float) -> int:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    return min(n, math.ceil(ratio * n - 1e-9))


def sample_block_mask(
    grid_h: int,
    grid_w: int,
    ratio: float,
    rng: np.random.Generator,
    min_block: int = 2,
    aspect_range: tuple[float, float] = (0.3, 1 / 0.3),
    attempts: int = 10,
) -> MaskSpec:
    """Cover at least ``ratio`` of the grid with random rectangles.

    Each round proposes up to ``attempts`` rectangles whose area is drawn
    uniformly between ``min(min_block, remaining)`` and the number of cells
    still needed, with a log-uniform aspect ratio. A proposal is kept only if
    the cells it newly covers fit the remaining budget, so the final count is
    exactly ``ceil(ratio * N)``. When every proposal fails the mask grows by
    one 1x1 block next to the already-masked region.
    """
    n = grid_h * grid_w
    target = _target_count(n, ratio)
    mask = np.zeros((grid_h, grid_w), dtype=bool)
    blocks: list[tuple[int, int, int, int]] = []
    log_lo, log_hi = math.log(aspect_range[0]), math.log(aspect_range[1])
    count = 0
    while count < target:
        remaining = target - count
        low = min(min_block, remaining)
        placed = False
        for _ in range(attempts):
            area = rng.uniform(low, remaining)
            aspect = math.exp(rng.uniform(log_lo, log_hi))
            h = int(round(math.sqrt(area * aspect)))
            w = int(round(math.sqrt(area / aspect)))
            h = min(max(h, 1), grid_h)
            w = min(max(w, 1), grid_w)
            top = int(rng.integers(0, grid_h - h + 1))
            left = int(rng.integers(0, grid_w - w + 1))
            new = h * w - int(mask[top : top + h, left : left + w].sum())
            if low <= new <= remaining:
                mask[top : top + h, left : left + w] = True
                blocks.append((top, left, h, w))
                count += new
                placed = True
                break
        if not placed:
            top, left = _grow_cell(mask, rng)
            mask[top, left] = True
            blocks.append((top, left, 1, 1))
            count += 1
    return MaskSpec(grid=mask.reshape(-1), target_ratio=ratio, blocks=blocks)


def _grow_cell(mask: np.ndarray, rng: np.random.Generator) -> tuple[int, int]:
    free = ~mask
    if mask.any():
        near = np.zeros_like(mask)
        near[1:, :] |= mask[:-1, :]
        near[:-1, :] |= mask[1:, :]
        near[:, 1:] |= mask[:, :-1]
        near[:, :-1] |= mask[:, 1:]
        candidates = np.argwhere(near & free)
    else:
        candidates = np.argwhere(free)
    top, left = candidates[rng.integers(len(candidates))]
    return int(top), int(left)


def sample_random_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    """Mask exactly ``round(n * ratio)`` uniformly chosen patches."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    k = int(math.floor(n * ratio + 0.5))
    grid = np.zeros(n, dtype=bool)
    if k:
        grid[rng.choice(n, size=k, replace=False)] = True
    return MaskSpec(grid=grid, target_ratio=ratio)


def empty_mask(n: int) -> MaskSpec:
    return MaskSpec(grid=np.zeros(n, dtype=bool), target_ratio=0.0)


def sample_mask(
    mode: str,
    grid_h: int,
    grid_w: int,
    rng: np.random.Generator,
    prob: float = 0.5,
    ratio_range: tuple[float, float] = (0.1, 0.5),
) -> MaskSpec:
    """Draw a ratio and a mask of the requested kind (``block``, ``random`` or ``none``)."""
    n = grid_h * grid_w
    if mode == "none":
        return empty_mask(n)
    ratio = sample_mask_ratio(rng, prob, ratio_range)
    if mode == "block":
        return sample_block_mask(grid_h, grid_w, ratio, rng)
    if mode == "random":
        return sample_random_mask(n, ratio, rng)
    raise ValueError(f"unknown mask mode {mode!r}")
