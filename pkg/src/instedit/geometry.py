"""Bounding boxes, binary grid masks, and the mask-shift operation.

Coordinates are normalized to [0, 1] with x horizontal, y vertical and the
origin at the top-left corner. Masks are binary numpy grids; a cell belongs
to a box when its center does (closed on the left/top edge, open on the
right/bottom so adjacent boxes never claim the same center).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMaskError


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box (x1, y1, x2, y2) in normalized image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 < self.x2 <= 1.0):
            raise ValueError(f"invalid x extent: ({self.x1}, {self.x2})")
        if not (0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(f"invalid y extent: ({self.y1}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def contains(self, x: float, y: float) -> bool:
        return self.x1 <= x < self.x2 and self.y1 <= y < self.y2

    def iou(self, other: "BoundingBox") -> float:
        ix = max(0.0, min(self.x2, other.x2) - max(self.x1, other.x1))
        iy = max(0.0, min(self.y2, other.y2) - max(self.y1, other.y1))
        inter = ix * iy
        if inter == 0.0:
            return 0.0
        return inter / (self.area + other.area - inter)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class Shift:
    """Normalized displacement; positive dx moves right, positive dy moves down."""

    dx: float
    dy: float

    def __post_init__(self):
        if abs(self.dx) > 1.0 or abs(self.dy) > 1.0:
            raise ValueError(f"shift components must lie in [-1, 1]: ({self.dx}, {self.dy})")

    def cells(self, height: int, width: int) -> tuple[int, int]:
        """Whole-cell displacement (rows, cols) at a given grid resolution."""
        return _round_half_away(self.dy * height), _round_half_away(self.dx * width)


def _round_half_away(v: float) -> int:
    # round() halves to even; masks need a sign-symmetric rule so that
    # shifting by s and then -s lands on the same cells.
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


class GridMask:
    """Binary H x W mask. Values are an immutable uint8 array of {0, 1}."""

    def __init__(self, values: np.ndarray):
        values = np.asarray(values)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"mask must be a 2-D grid, got shape {values.shape}")
        if not np.isin(values, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        self._values = values.astype(np.uint8)
        self._values.setflags(write=False)

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def height(self) -> int:
        return self._values.shape[0]

    @property
    def width(self) -> int:
        return self._values.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, GridMask) and np.array_equal(self._values, other._values)

    def __repr__(self) -> str:
        return f"GridMask({self.height}x{self.width}, area={mask_area(self)})"


def rasterize_box(box: BoundingBox, height: int, width: int) -> GridMask:
    """Rasterize a normalized box onto an H x W grid by cell-center inclusion.

    Raises EmptyMaskError when no cell center falls inside the box.
    """
    if height < 1 or width < 1:
        raise ValueError("grid dimensions must be >= 1")
    cx = (np.arange(width) + 0.5) / width
    cy = (np.arange(height) + 0.5) / height
    inside_x = (cx >= box.x1) & (cx < box.x2)
    inside_y = (cy >= box.y1) & (cy < box.y2)
    values = (inside_y[:, None] & inside_x[None, :]).astype(np.uint8)
    if not values.any():
        raise EmptyMaskError(
            f"box {box.as_list()} covers no cell center on a {height}x{width} grid"
        )
    return GridMask(values)


def shift_mask(mask: GridMask, shift: Shift) -> GridMask:
    """Translate set cells by whole cells, clipping at the grid border.

    The displacement is round(dx * W) columns and round(dy * H) rows.
    Raises EmptyMaskError when clipping removes every set cell, which
    signals an infeasible target location.
    """
    if mask_area(mask) == 0:
        raise EmptyMaskError("cannot shift an empty mask")
    drow, dcol = shift.cells(mask.height, mask.width)
    out = np.zeros_like(mask.values)
    rows, cols = np.nonzero(mask.values)
    rows = rows + drow
    cols = cols + dcol
    keep = (rows >= 0) & (rows < mask.height) & (cols >= 0) & (cols < mask.width)
    if not keep.any():
        raise EmptyMaskError(
            f"shift ({shift.dx}, {shift.dy}) pushes the whole mask off the grid"
        )
    out[rows[keep], cols[keep]] = 1
    return GridMask(out)


def mask_area(mask: GridMask) -> int:
    """Number of set cells."""
    return int(mask.values.sum())
