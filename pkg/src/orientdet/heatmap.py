"""Elliptical Gaussian score fields over feature grids.

A rotated rectangle induces a 2-D Gaussian whose principal axes follow the
rectangle: covariance C = Q diag((S1/2)^2, (S2/2)^2) Q^T with Q the rotation
by the rectangle angle. The normalizing coefficient is dropped so the score
is exactly 1 at the center and falls in (0, 1] elsewhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RotRect, rotation_matrix

DEFAULT_SUPPORT_FLOOR = 1e-3


@dataclass
class GaussianField:
    """Sampled Gaussian scores for one object on one feature grid."""

    rect: RotRect
    stride: float
    grid: np.ndarray      # (W, H) scores at cell anchors
    support: np.ndarray   # (W, H) bool, scores above the support floor
    floor: float

    def value_at(self, points_px: np.ndarray) -> np.ndarray:
        return gaussian_score(self.rect, points_px)


def gaussian_score(rect: RotRect, points_px: np.ndarray) -> np.ndarray:
    """Continuous Gaussian heatmap score at pixel points; 1 at the center."""
    pts = np.atleast_2d(np.asarray(points_px, dtype=np.float64))
    local = (pts - rect.center) @ rotation_matrix(rect.angle)
    u = local[:, 0] / (0.5 * rect.s1)
    v = local[:, 1] / (0.5 * rect.s2)
    return np.exp(-0.5 * (u * u + v * v))


def cell_anchor_px(ix, iy, stride: float):
    """Image-pixel point of feature-grid cell (ix, iy)."""
    return (np.asarray(ix) + 0.5) * stride, (np.asarray(iy) + 0.5) * stride


def gaussian_field(
    rect: RotRect,
    grid_shape: tuple[int, int],
    stride: float,
    floor: float = DEFAULT_SUPPORT_FLOOR,
) -> GaussianField:
    """Sample the score at every cell anchor of a (W, H) feature grid."""
    W, H = grid_shape
    ix, iy = np.meshgrid(np.arange(W), np.arange(H), indexing="ij")
    px, py = cell_anchor_px(ix, iy, stride)
    pts = np.stack([px.ravel(), py.ravel()], axis=1)
    scores = gaussian_score(rect, pts).reshape(W, H)
    return GaussianField(
        rect=rect, stride=stride, grid=scores, support=scores > floor, floor=floor
    )
