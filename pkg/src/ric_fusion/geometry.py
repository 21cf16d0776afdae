"""Coordinate frames and BEV grids.

Grids are indexed ``values[row, col]`` with the row axis along the frame's Y and
the column axis along X, so cell ``(center + round(dy / b_p), center + round(dx / b_p))``
holds a point offset ``(dx, dy)`` from the anchor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .objects import ObjectBox, wrap_angle

PROB_TOL = 1e-6


class Axes(str, Enum):
    OBJECT_ALIGNED = "object_aligned"
    RADIAL_TANGENTIAL = "radial_tangential"


@dataclass
class BevGrid:
    values: np.ndarray
    pixel: float
    anchor: tuple[float, float] = (0.0, 0.0)
    axes: Axes = Axes.OBJECT_ALIGNED

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("grid values must be 2-D")
        if self.values.shape[0] % 2 == 0 or self.values.shape[1] % 2 == 0:
            raise ValueError(f"grid shape {self.values.shape} must be odd in both axes")
        if self.pixel <= 0:
            raise ValueError("pixel size must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def center(self) -> tuple[int, int]:
        return self.values.shape[0] // 2, self.values.shape[1] // 2

    def total(self) -> float:
        return float(self.values.sum())

    def is_probability(self, tol: float = PROB_TOL) -> bool:
        return bool(np.all(self.values >= 0.0) and abs(self.total() - 1.0) <= tol)


def relative_yaw(box: ObjectBox) -> float:
    """Heading relative to the ego-to-object ray, wrapped to (-pi, pi]."""
    if box.center == (0.0, 0.0):
        raise ValueError("undefined azimuth: box center at origin")
    return wrap_angle(box.yaw - box.azimuth)


def rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _check_unit(v: np.ndarray, name: str) -> None:
    n = float(np.hypot(v[0], v[1]))
    if abs(n - 1.0) > 1e-9:
        raise ValueError(f"{name} must be unit length, got norm {n!r}")


def left_normal(ray) -> np.ndarray:
    ray = np.asarray(ray, dtype=float)
    return np.array([-ray[1], ray[0]])


def ego_to_radial_tangential(p, ray) -> np.ndarray:
    """Express ``p`` (one point or an (N, 2) array) with X along ``ray`` and Y to its left."""
    ray = np.asarray(ray, dtype=float)
    _check_unit(ray, "ray")
    p = np.asarray(p, dtype=float)
    basis = np.stack([ray, left_normal(ray)])
    return p @ basis.T


def radial_tangential_to_ego(q, ray) -> np.ndarray:
    ray = np.asarray(ray, dtype=float)
    _check_unit(ray, "ray")
    q = np.asarray(q, dtype=float)
    basis = np.stack([ray, left_normal(ray)])
    return q @ basis


def to_object_frame(points, box: ObjectBox) -> np.ndarray:
    """Ego-frame points to the box frame (X along length, Y along width)."""
    d = np.asarray(points, dtype=float) - np.asarray(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    return np.stack([d[..., 0] * c + d[..., 1] * s, -d[..., 0] * s + d[..., 1] * c], axis=-1)


def from_object_frame(points, box: ObjectBox) -> np.ndarray:
    q = np.asarray(points, dtype=float)
    return q @ rotation(box.yaw).T + np.asarray(box.center)


def in_footprint(local: np.ndarray, length: float, width: float) -> np.ndarray:
    """Boundary-inclusive containment for points already in the box frame."""
    local = np.asarray(local, dtype=float).reshape(-1, 2)
    return (np.abs(local[:, 0]) <= length / 2) & (np.abs(local[:, 1]) <= width / 2)


def round_half_away(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def bin_points(points, anchor, n: int, b_p: float, axes: Axes = Axes.OBJECT_ALIGNED) -> tuple[BevGrid, int]:
    """Count points per cell of an ``n x n`` grid centred on ``anchor``.

    Returns the count grid and the number of points that fell outside it.
    """
    if n % 2 == 0:
        raise ValueError("grid size must be odd")
    if b_p <= 0:
        raise ValueError("pixel size must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    half = n // 2
    d = (pts - np.asarray(anchor, dtype=float)) / b_p
    cols = round_half_away(d[:, 0]).astype(np.int64) + half
    rows = round_half_away(d[:, 1]).astype(np.int64) + half
    ok = (rows >= 0) & (rows < n) & (cols >= 0) & (cols < n)
    counts = np.zeros((n, n))
    np.add.at(counts, (rows[ok], cols[ok]), 1.0)
    grid = BevGrid(counts, b_p, (float(anchor[0]), float(anchor[1])), axes)
    return grid, int((~ok).sum())


def _quarter_turns(angle: float) -> int | None:
    k = angle / (math.pi / 2)
    kr = round(k)
    if abs(k - kr) < 1e-12:
        return int(kr) % 4
    return None


def rotate_resample(grid: BevGrid, angle: float, axes: Axes | None = None) -> BevGrid:
    """Rotate map content counter-clockwise by ``angle`` about the grid center.

    Output cell at offset ``q`` samples the input at ``R(-angle) q`` with bilinear
    interpolation. Multiples of pi/2 permute cells exactly. A probability input is
    renormalized because mass rotated past the corners is lost.
    """
    v = grid.values
    turns = _quarter_turns(angle)
    if turns is not None and v.shape[0] == v.shape[1]:
        # np.rot90 turns row 0 towards the last column; rows are +Y here, so flip the sense.
        out = np.rot90(v, k=-turns).copy() if turns else v.copy()
    else:
        rows, cols = np.indices(v.shape, dtype=float)
        cy, cx = grid.center
        x, y = cols - cx, rows - cy
        c, s = math.cos(angle), math.sin(angle)
        src_x = c * x + s * y
        src_y = -s * x + c * y
        out = ndimage.map_coordinates(v, [src_y + cy, src_x + cx], order=1, mode="constant", cval=0.0)
        out = np.maximum(out, 0.0)
        if abs(v.sum() - 1.0) <= PROB_TOL:
            total = out.sum()
            if total > 0:
                out = out / total
    return BevGrid(out, grid.pixel, grid.anchor, axes or grid.axes)
