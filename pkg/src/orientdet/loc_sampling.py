"""Localization-branch sampling geometry.

The nine taps of the localization convolution are bound to the oriented box:
the center tap stays at the anchor, the four edge taps sit on the box
vertices, and the four corner taps slide along the box edges under learnable
interpolation factors. Coordinate channels are appended to the features so
the sampled positions are visible to the network.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .geometry import GlideBox, glide_area_ratio

# corner taps may slide only while the binding edge has usable extent
_EDGE_TOL = 1e-12


@dataclass
class LocSamplePlan:
    """Nine sampling coordinates plus per-tap modulation for one position."""

    coords: np.ndarray      # (9, 2)
    modulation: np.ndarray  # (9,)
    sigma: np.ndarray       # (4,) slide factors for taps 0, 2, 6, 8


def embed_coords(grid: Tensor) -> Tensor:
    """Append column-index and row-index channels to a (W, H, F) grid."""
    W, H = grid.data.shape[0], grid.data.shape[1]
    xs = np.broadcast_to(np.arange(W, dtype=np.float64)[:, None, None], (W, H, 1))
    ys = np.broadcast_to(np.arange(H, dtype=np.float64)[None, :, None], (W, H, 1))
    return ad.concat([grid, Tensor(xs.copy()), Tensor(ys.copy())], axis=2)


def loc_plan_coords(l: Tensor, s: Tensor, sigma: Tensor, anchors: np.ndarray) -> Tensor:
    """Batched sampling coordinates for P positions, shape (P, 9, 2).

    ``l``/``s``/``sigma`` are (P, 4) tensors; ``anchors`` is a constant
    (P, 2) array of positions, in the same units as the box distances.
    """
    ax = np.asarray(anchors, dtype=np.float64)
    x, y = ax[:, 0], ax[:, 1]
    l1, l2, l3, l4 = (l[:, i] for i in range(4))
    s1, s2, s3, s4 = (s[:, i] for i in range(4))
    g0, g2, g6, g8 = (sigma[:, i] for i in range(4))

    xl = x - l4                  # left HBB edge
    xr = x + l2                  # right HBB edge
    yt = y - l1                  # top HBB edge
    yb = y + l3                  # bottom HBB edge
    x_q1 = xl + s1
    y_q3 = yb - s4
    y_q5 = yt + s2
    x_q7 = xr - s3
    w = l2 + l4

    def blend(eq_mask, eq_x, eq_y, xt, y_from, dy, dx, x_ref):
        # slanted branch: y = y_from + dy/dx * (xt - x_ref); dx is nonzero
        # wherever the slanted branch is selected
        safe_dx = ad.where(eq_mask, np.ones(len(ax)), dx)
        sl_y = y_from + (dy / safe_dx) * (xt - x_ref)
        px = ad.where(eq_mask, eq_x, xt)
        py = ad.where(eq_mask, eq_y, sl_y)
        return px, py

    # tap 0 slides on the edge between the top and left vertices
    eq0 = s1.data <= _EDGE_TOL
    p0 = blend(eq0, x_q1, yt + g0 * (y_q3 - yt),
               xl + g0 * s1, yt, y_q3 - yt, 0.0 - s1, x_q1)

    # tap 2 slides on the edge between the top and right vertices
    eq2 = (w.data - s1.data) <= _EDGE_TOL
    p2 = blend(eq2, x_q1, yt + g2 * s2,
               xr - g2 * (xr - x_q1), yt, y_q5 - yt, xr - x_q1, x_q1)

    # tap 6 slides on the edge between the left and bottom vertices
    eq6 = (w.data - s3.data) <= _EDGE_TOL
    p6 = blend(eq6, x_q7, yb - g6 * (yb - y_q3),
               xl + g6 * (x_q7 - xl), yb, y_q3 - yb, (xl - x_q7), x_q7)

    # tap 8 slides on the edge between the right and bottom vertices
    eq8 = s3.data <= _EDGE_TOL
    p8 = blend(eq8, x_q7, yb - g8 * (yb - y_q5),
               xr - g8 * s3, yb, y_q5 - yb, s3, x_q7)

    points = [
        p0,
        (x_q1, yt),
        p2,
        (xl, y_q3),
        (Tensor(x), Tensor(y)),
        (xr, y_q5),
        p6,
        (x_q7, yb),
        p8,
    ]
    xs = ad.stack([px for px, _ in points], axis=1)
    ys = ad.stack([py for _, py in points], axis=1)
    return ad.stack([xs, ys], axis=2)


def loc_sample_points(box: GlideBox, sigma: np.ndarray, modulation: np.ndarray | None = None) -> LocSamplePlan:
    """Sampling plan for a single box (pure numpy convenience wrapper)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0) or np.any(sigma >= 1):
        raise ContractError(f"slide factors must lie in (0, 1): {sigma}")
    coords = loc_plan_coords(
        Tensor(box.l[None, :]),
        Tensor(box.s[None, :]),
        Tensor(sigma[None, :]),
        box.anchor[None, :],
    ).data[0]
    if modulation is None:
        modulation = np.full(9, 0.5)
    return LocSamplePlan(coords=coords, modulation=np.asarray(modulation, dtype=np.float64), sigma=sigma)


def loc_conv_forward(
    sce: Tensor,
    kernel: Tensor,
    modulation: Tensor,
    plan_coords: Tensor | None,
    positions: np.ndarray | None,
) -> Tensor:
    """Localization convolution: square taps everywhere, plan taps at positives."""
    if (positions is None) != (plan_coords is None):
        raise ContractError("plan coordinates and positions must be given together")
    if positions is not None and plan_coords is not None:
        if len(positions) != plan_coords.data.shape[0]:
            raise ContractError(
                f"{plan_coords.data.shape[0]} plans for {len(positions)} positive positions"
            )
    return ad.conv3x3(
        sce,
        kernel,
        modulation=modulation,
        offsets=ad.SQUARE_OFFSETS,
        plan_coords=plan_coords,
        plan_positions=positions,
    )


def refine_glide(l: Tensor, s: Tensor, delta_l: Tensor, delta_s: Tensor) -> tuple[Tensor, Tensor]:
    """Multiplicative refinement of (P, 4) box tensors with glide re-clamping."""
    lt = l * delta_l
    st = s * delta_s
    w = lt[:, 1] + lt[:, 3]
    h = lt[:, 0] + lt[:, 2]
    zeros = np.zeros(st.data.shape[0])
    st = ad.stack(
        [
            ad.minimum(ad.maximum(st[:, 0], zeros), w),
            ad.minimum(ad.maximum(st[:, 1], zeros), h),
            ad.minimum(ad.maximum(st[:, 2], zeros), w),
            ad.minimum(ad.maximum(st[:, 3], zeros), h),
        ],
        axis=1,
    )
    return lt, st


def refine_obb(initial: GlideBox, delta_l: np.ndarray, delta_s: np.ndarray) -> GlideBox:
    """Refine a single box by multiplicative corrections (numpy wrapper)."""
    delta_l = np.asarray(delta_l, dtype=np.float64)
    delta_s = np.asarray(delta_s, dtype=np.float64)
    if np.any(delta_l <= 0) or np.any(delta_s <= 0):
        raise ContractError("refinement factors must be strictly positive")
    lt, st = refine_glide(
        Tensor(initial.l[None, :]),
        Tensor(initial.s[None, :]),
        Tensor(delta_l[None, :]),
        Tensor(delta_s[None, :]),
    )
    lt, st = lt.data[0], st.data[0]
    return GlideBox(l=lt, s=st, anchor=initial.anchor.copy(), area_ratio=glide_area_ratio(lt, st))
