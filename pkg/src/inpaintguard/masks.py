"""Boxes, binary masks, and the region geometry used by protection.

Mask polarity is fixed everywhere: grid value 1 keeps a pixel (context),
0 marks it as hole to be repainted. Serialized PGM masks use 255 = keep,
0 = hole. Boxes are half-open pixel rectangles [x0, x1) x [y0, y1).
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .imageio import pgm_read, pgm_write


@dataclass(frozen=True)
class Box:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        for v in (self.x0, self.y0, self.x1, self.y1):
            if not isinstance(v, (int, np.integer)):
                raise ContractError("box coordinates must be integers")
        if self.x0 < 0 or self.y0 < 0 or self.x0 >= self.x1 or self.y0 >= self.y1:
            raise ContractError(f"degenerate box {self}")

    def require_within(self, bounds):
        h, w = bounds
        if self.x1 > w or self.y1 > h:
            raise ContractError(f"box {self} exceeds bounds {bounds}")

    def contains(self, x, y):
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)


class MaskClass(enum.Enum):
    """Whether a mask's hole stayed inside the optimized box."""

    INSIDE = "inside"
    OUTSIDE = "outside"


_ORIGINS = ("segmentation", "box", "inverted-box", "shifted", "custom")


@dataclass(eq=False)
class MaskSpec:
    """Binary keep/hole grid. grid[y, x] == 1 keeps, == 0 is hole."""

    grid: np.ndarray
    origin: str = "custom"
    source_box: Box = None

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2:
            raise DimensionError("mask grid must be 2-D")
        vals = np.unique(g)
        if not np.all(np.isin(vals, (0, 1))):
            raise ContractError("mask grid must hold only 0 and 1")
        if self.origin not in _ORIGINS:
            raise ContractError(f"unknown mask origin {self.origin!r}")
        self.grid = g.astype(np.uint8)

    @property
    def shape(self):
        return self.grid.shape

    def hole_count(self):
        return int(np.sum(self.grid == 0))

    def inverted(self):
        swap = {"box": "inverted-box", "inverted-box": "box"}
        return MaskSpec(1 - self.grid, swap.get(self.origin, self.origin), self.source_box)


def all_keep_mask(bounds):
    return MaskSpec(np.ones(bounds, dtype=np.uint8))


def box_to_mask(box, bounds, hole_inside=True):
    """Mask whose hole is the box interior (or its complement)."""
    box.require_within(bounds)
    grid = np.ones(bounds, dtype=np.uint8)
    grid[box.y0:box.y1, box.x0:box.x1] = 0
    if hole_inside:
        return MaskSpec(grid, "box", box)
    return MaskSpec(1 - grid, "inverted-box", box)


def mask_to_pgm(mask):
    return pgm_write(mask.grid.astype(np.float64))


def pgm_to_mask(buf):
    img = pgm_read(buf)
    if not np.all(np.isin(np.unique(img), (0.0, 1.0))):
        raise ContractError("mask PGM must contain only 0 and 255")
    return MaskSpec(img.astype(np.uint8))


def enlarge_box(box, rho, bounds):
    """Scale a box about its center by rho, round half up, clamp to bounds.

    rho = 1 returns the box unchanged; growth is monotone in rho up to
    the clamp.
    """
    if rho < 1.0:
        raise ConfigError(f"enlargement factor must be >= 1, got {rho}")
    box.require_within(bounds)
    h, w = bounds
    cx = (box.x0 + box.x1) / 2.0
    cy = (box.y0 + box.y1) / 2.0
    half_w = (box.x1 - box.x0) * rho / 2.0
    half_h = (box.y1 - box.y0) * rho / 2.0
    x0 = max(0, int(math.floor(cx - half_w + 0.5)))
    y0 = max(0, int(math.floor(cy - half_h + 0.5)))
    x1 = min(w, int(math.floor(cx + half_w + 0.5)))
    y1 = min(h, int(math.floor(cy + half_h + 0.5)))
    return Box(x0, y0, x1, y1)


def classify_hole(mask, box):
    """INSIDE iff every hole pixel lies within the box."""
    hole_y, hole_x = np.nonzero(mask.grid == 0)
    if hole_x.size == 0:
        raise ContractError("cannot classify a mask with an empty hole")
    inside = np.all(
        (hole_x >= box.x0) & (hole_x < box.x1) & (hole_y >= box.y0) & (hole_y < box.y1)
    )
    return MaskClass.INSIDE if inside else MaskClass.OUTSIDE


def random_shift_mask(mask, box, max_shift, rng):
    """Translate a mask's hole by a uniform integer offset.

    Hole pixels shifted off canvas are dropped, so holes may shrink.
    Returns the shifted mask and its classification against `box`.
    """
    if max_shift < 1:
        raise ConfigError("max_shift must be >= 1")
    if mask.hole_count() == 0:
        raise ContractError("cannot shift a mask with an empty hole")
    h, w = mask.shape
    dx = int(rng.integers(-max_shift, max_shift + 1))
    dy = int(rng.integers(-max_shift, max_shift + 1))
    hole_y, hole_x = np.nonzero(mask.grid == 0)
    ny, nx = hole_y + dy, hole_x + dx
    keep = (nx >= 0) & (nx < w) & (ny >= 0) & (ny < h)
    if not keep.any():
        raise ContractError("hole shifted entirely off canvas")
    grid = np.ones((h, w), dtype=np.uint8)
    grid[ny[keep], nx[keep]] = 0
    shifted = MaskSpec(grid, "shifted", mask.source_box)
    return shifted, classify_hole(shifted, box)


def multi_object_regions(boxes, rho, bounds):
    """Ordered perturbation supports: one per enlarged box, then leftover.

    Overlaps resolve first-wins, so supports are disjoint and together
    cover the image. Regions that end up empty are dropped.
    """
    if not boxes:
        raise ConfigError("at least one box is required")
    claimed = np.zeros(bounds, dtype=bool)
    regions = []
    for box in boxes:
        big = enlarge_box(box, rho, bounds)
        support = np.zeros(bounds, dtype=bool)
        support[big.y0:big.y1, big.x0:big.x1] = True
        support &= ~claimed
        claimed |= support
        if support.any():
            regions.append(support.astype(np.uint8))
    leftover = ~claimed
    if leftover.any():
        regions.append(leftover.astype(np.uint8))
    return regions
