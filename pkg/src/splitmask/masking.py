"""Mask plans over the patch grid: block masking, uniform masking and the A/B split."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "MaskPlan",
    "block_mask",
    "uniform_mask",
    "split",
    "default_block_bounds",
    "make_plans",
    "target_count",
]


@dataclass(frozen=True)
class MaskPlan:
    """A partition of the patch grid into observed (A) and masked (B) positions."""

    grid: tuple[int, int]
    masked: np.ndarray  # bool, length rows * cols

    @property
    def n(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def observed_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.masked)

    @property
    def masked_idx(self) -> np.ndarray:
        return np.flatnonzero(self.masked)

    @property
    def num_masked(self) -> int:
        return int(self.masked.sum())

    def complement(self) -> "MaskPlan":
        return MaskPlan(self.grid, ~self.masked)

    def as_grid(self) -> np.ndarray:
        return self.masked.reshape(self.grid)


def _check_ratio(ratio: float) -> None:
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")


def target_count(n: int, ratio: float) -> int:
    """``floor(ratio * n)``, immune to representation error such as ``0.29 * 100 = 28.999...``."""
    return int(math.floor(ratio * n + 1e-9))


def default_block_bounds(n: int) -> tuple[int, int]:
    """Block-size bounds 16 and 75 (out of 196 patches) rescaled to an ``n``-patch grid."""
    lo = max(1, (16 * n) // 196)
    hi = max(lo, (75 * n) // 196)
    return lo, hi


def block_mask(grid, ratio: float, min_block: int, max_block: int, rng,
               aspect=(0.3, 1 / 0.3)) -> MaskPlan:
    """Mask random rectangles until ``floor(ratio * n)`` patches are covered, then trim to exactly that many.

    Block area is uniform in ``[min_block, max_block]`` and the aspect ratio
    log-uniform in ``aspect``.  A block's placement is uniform over all
    offsets at which it overlaps the grid and the block is clipped to the
    grid, so every cell is equally likely to be covered by a given block.
    """
    _check_ratio(ratio)
    rows, cols = grid
    n = rows * cols
    if min_block < 1 or min_block > n:
        raise ConfigError(f"min_block {min_block} outside [1, {n}]")
    if max_block < min_block:
        raise ConfigError(f"max_block {max_block} < min_block {min_block}")
    max_block = min(max_block, n)
    target = target_count(n, ratio)
    mask = np.zeros((rows, cols), dtype=bool)
    log_lo, log_hi = math.log(aspect[0]), math.log(aspect[1])
    while mask.sum() < target:
        area = rng.uniform(min_block, max_block)
        ar = math.exp(rng.uniform(log_lo, log_hi))
        h = min(rows, max(1, int(round(math.sqrt(area * ar)))))
        w = min(cols, max(1, int(round(math.sqrt(area / ar)))))
        # any placement overlapping the grid is equally likely, then clipped
        top = int(rng.integers(1 - h, rows))
        left = int(rng.integers(1 - w, cols))
        mask[max(top, 0) : top + h, max(left, 0) : left + w] = True
    flat = mask.reshape(-1)
    excess = int(flat.sum()) - target
    if excess > 0:
        drop = rng.choice(np.flatnonzero(flat), size=excess, replace=False)
        flat[drop] = False
    return MaskPlan((rows, cols), flat)


def uniform_mask(n: int, ratio: float, rng, grid=None) -> MaskPlan:
    """Exactly ``floor(ratio * n)`` positions drawn without replacement."""
    _check_ratio(ratio)
    grid = tuple(grid) if grid is not None else (1, n)
    if grid[0] * grid[1] != n:
        raise ConfigError(f"grid {grid} does not hold {n} patches")
    masked = np.zeros(n, dtype=bool)
    masked[rng.choice(n, size=target_count(n, ratio), replace=False)] = True
    return MaskPlan(grid, masked)


def split(plan: MaskPlan) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(A, B)``: sorted observed and masked indices, both nonempty."""
    a, b = plan.observed_idx, plan.masked_idx
    if a.size == 0 or b.size == 0:
        raise ConfigError(f"mask plan leaves an empty side (|A|={a.size}, |B|={b.size})")
    return a, b


def make_plans(kind: str, batch: int, grid, ratio: float, rng,
               min_block: int | None = None, max_block: int | None = None) -> list[MaskPlan]:
    """One plan per batch item; ``kind`` is ``block`` or ``uniform``."""
    n = grid[0] * grid[1]
    if kind == "block":
        lo, hi = default_block_bounds(n)
        lo = lo if min_block is None else min_block
        hi = hi if max_block is None else max_block
        return [block_mask(grid, ratio, lo, hi, rng) for _ in range(batch)]
    if kind == "uniform":
        return [uniform_mask(n, ratio, rng, grid) for _ in range(batch)]
    raise ConfigError(f"unknown masking kind {kind!r}")
