"""Shared test helpers: random rotated-box generators and brute-force oracles."""
from __future__ import annotations

import numpy as np

from orientdet.geometry import GlideBox, decode_glide, polygon_contains


def random_glide_box(rng: np.random.Generator, margin: float = 0.05) -> GlideBox:
    """A random non-degenerate glide box with glides strictly inside their ranges."""
    l = rng.uniform(0.5, 6.0, size=4)
    w, h = l[1] + l[3], l[0] + l[2]
    u = rng.uniform(margin, 1.0 - margin, size=4)
    s = np.array([u[0] * w, u[1] * h, u[2] * w, u[3] * h])
    anchor = rng.uniform(-4.0, 12.0, size=2)
    from orientdet.geometry import glide_area_ratio

    return GlideBox(l=l, s=s, anchor=anchor, area_ratio=glide_area_ratio(l, s))


def random_quad(rng: np.random.Generator) -> np.ndarray:
    """A random convex quad (decoded from a random glide box)."""
    _, poly = decode_glide(random_glide_box(rng))
    return poly


def finite_difference_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued ``f`` w.r.t. the array ``x``.

    ``f`` takes no arguments and must read ``x`` (mutated in place) afresh.
    """
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / scale))


def _half_planes(polygon: np.ndarray) -> np.ndarray:
    """(2+1, 4) coefficients with points @ A[:2] + A[2] >= 0 inside (CW polygon)."""
    v = np.asarray(polygon, dtype=np.float64)
    e = np.roll(v, -1, axis=0) - v
    a = -e[:, 1]
    b = e[:, 0]
    c = e[:, 1] * v[:, 0] - e[:, 0] * v[:, 1]
    return np.vstack([a, b, c])


def monte_carlo_iou(pa: np.ndarray, pb: np.ndarray, n: int, rng: np.random.Generator) -> float:
    """Point-membership IoU estimate over the joint bounding box."""
    lo = np.minimum(pa.min(axis=0), pb.min(axis=0))
    hi = np.maximum(pa.max(axis=0), pb.max(axis=0))
    planes = np.hstack([_half_planes(pa), _half_planes(pb)])  # (3, 8)
    coeffs = np.ascontiguousarray(planes[:2].T)               # (8, 2)
    offsets = planes[2]
    inter = 0
    union = 0
    chunk = 1_000_000
    remaining = n
    while remaining > 0:
        m = min(chunk, remaining)
        pts = rng.uniform(lo, hi, size=(m, 2))
        signs = coeffs @ pts.T                                # (8, m), rows contiguous
        signs += offsets[:, None]
        in_a = signs[0] >= 0
        for row in signs[1:4]:
            in_a &= row >= 0
        in_b = signs[4] >= 0
        for row in signs[5:]:
            in_b &= row >= 0
        inter += int(np.count_nonzero(in_a & in_b))
        union += int(np.count_nonzero(in_a | in_b))
        remaining -= m
    return inter / union if union else 0.0
