"""Classification-branch sampling and the rotating circular kernel bank.

Sampling positions for the classification convolution live anywhere inside
the enclosing rotated rectangle of the box, placed by learnable factors. The
kernel is a bank of eight 45-degree rotations of a circularized 3x3 kernel,
blended with the square kernel at the four axis-aligned rotations and
aggregated with normalized orientation weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .geometry import RotRect

# clockwise outer ring of the 3x3 stencil (top-left, top, top-right, ...)
RING = (0, 1, 2, 5, 8, 7, 6, 3)

_HALF = 0.5
_C = (math.sqrt(2.0) - 1.0) / 2.0
_D = (3.0 - 2.0 * math.sqrt(2.0)) / 2.0

# rows: bilinear blend producing each corner tap of the circular kernel,
# as weights over (own corner, adjacent edge taps x2, center)
CORNER_BLEND = {
    0: ((0, _HALF), (1, _C), (3, _C), (4, _D)),
    2: ((1, _C), (2, _HALF), (4, _D), (5, _C)),
    6: ((3, _C), (4, _D), (6, _HALF), (7, _C)),
    8: ((4, _D), (5, _C), (7, _C), (8, _HALF)),
}


def circularize_matrix() -> np.ndarray:
    """The 9x9 linear map sending a flat square kernel to its circular form."""
    m = np.eye(9)
    for corner, blend in CORNER_BLEND.items():
        m[corner] = 0.0
        for src, w in blend:
            m[corner, src] = w
    return m


def circularize(kernel: Tensor) -> Tensor:
    """Replace corner taps by their on-circle bilinear interpolations."""
    kernel = ad.as_tensor(kernel)
    if kernel.data.shape[:2] != (3, 3):
        raise ShapeError(f"kernel must be 3x3-leading, got {kernel.data.shape}")
    flat = ad.reshape(kernel, (9,) + kernel.data.shape[2:])
    rows = []
    for j in range(9):
        if j in CORNER_BLEND:
            acc = None
            for src, w in CORNER_BLEND[j]:
                term = flat[src] * w
                acc = term if acc is None else acc + term
            rows.append(acc)
        else:
            rows.append(flat[j])
    return ad.reshape(ad.stack(rows, axis=0), kernel.data.shape)


def _ring_permutation(k: int) -> np.ndarray:
    perm = np.empty(9, dtype=np.intp)
    perm[4] = 4
    for i in range(8):
        perm[RING[(i + k) % 8]] = RING[i]
    return perm


def rotate_kernel(kernel: Tensor, k: int, circular: bool = False) -> Tensor:
    """Rotate a kernel clockwise by k * 45 degrees (outer-ring cyclic shift).

    Square kernels only admit quarter turns; 45-degree steps require a
    circularized kernel whose outer taps sit on a circle.
    """
    kernel = ad.as_tensor(kernel)
    if kernel.data.shape[:2] != (3, 3):
        raise ShapeError(f"kernel must be 3x3-leading, got {kernel.data.shape}")
    k = k % 8
    if k % 2 == 1 and not circular:
        raise ContractError("45-degree rotation of a non-circular kernel")
    if k == 0:
        return kernel
    flat = ad.reshape(kernel, (9,) + kernel.data.shape[2:])
    return ad.reshape(flat[_ring_permutation(k)], kernel.data.shape)


def fuse_kernels(square_rot: Tensor, circular_rot: Tensor, lam: Tensor, k: int) -> Tensor:
    """Blend the rotated square and circular kernels at even rotations.

    ``lam`` is the scalar blend weight for this rotation; odd rotations keep
    the circular kernel untouched.
    """
    if k % 2 == 1:
        return circular_rot
    lam = ad.as_tensor(lam)
    return circular_rot * lam + square_rot * (1.0 - lam)


@dataclass
class KernelBank:
    """Eight fused, rotated kernels plus their blend and orientation weights."""

    base: Tensor
    lam: Tensor                  # (4,) blend weights for rotations 0, 2, 4, 6
    beta: Tensor                 # (8,) orientation weights, summing to 1
    kernels: list[Tensor] = field(default_factory=list)

    @classmethod
    def build(cls, base: Tensor, lam: Tensor, beta: Tensor) -> "KernelBank":
        base = ad.as_tensor(base)
        lam = ad.as_tensor(lam)
        beta = ad.as_tensor(beta)
        if lam.data.shape != (4,):
            raise ShapeError("need one blend weight per even rotation")
        if beta.data.shape != (8,):
            raise ShapeError("need one orientation weight per rotation")
        circ = circularize(base)
        kernels = []
        for k in range(8):
            circ_k = rotate_kernel(circ, k, circular=True)
            if k % 2 == 0:
                square_k = rotate_kernel(base, k)
                kernels.append(fuse_kernels(square_k, circ_k, lam[k // 2], k))
            else:
                kernels.append(circ_k)
        return cls(base=base, lam=lam, beta=beta, kernels=kernels)

    def effective_kernel(self) -> Tensor:
        """Orientation-weighted sum of the fused kernels.

        All eight orientations share the same sampling positions, so their
        weighted aggregation collapses into a single kernel.
        """
        acc = None
        for k in range(8):
            term = self.kernels[k] * self.beta[k]
            acc = term if acc is None else acc + term
        return acc


@dataclass
class ClsSamplePlan:
    """Nine in-rectangle sampling coordinates for one position."""

    coords: np.ndarray      # (9, 2)
    omega: np.ndarray       # (18,) placement factors (x then y)
    modulation: np.ndarray  # (9,)


def cls_plan_coords(rects: list[RotRect], omega: Tensor) -> Tensor:
    """Batched Eq-style sampling coordinates, shape (P, 9, 2).

    The unrotated offset (S1 (wx - 1/2), S2 (wy - 1/2)) is rotated by the
    rectangle angle about its center, so every point stays inside the
    rectangle by construction.
    """
    omega = ad.as_tensor(omega)
    P = len(rects)
    if omega.data.shape != (P, 18):
        raise ShapeError(f"omega must be ({P}, 18), got {omega.data.shape}")
    cx = np.array([r.center[0] for r in rects])
    cy = np.array([r.center[1] for r in rects])
    s1 = np.array([r.s1 for r in rects])[:, None]
    s2 = np.array([r.s2 for r in rects])[:, None]
    cos = np.array([math.cos(r.angle) for r in rects])[:, None]
    sin = np.array([math.sin(r.angle) for r in rects])[:, None]
    off_x = (omega[:, 0:9] - 0.5) * s1
    off_y = (omega[:, 9:18] - 0.5) * s2
    px = off_x * cos - off_y * sin + cx[:, None]
    py = off_x * sin + off_y * cos + cy[:, None]
    return ad.stack([px, py], axis=2)


def cls_sample_points(rect: RotRect, omega: np.ndarray, modulation: np.ndarray | None = None) -> ClsSamplePlan:
    """Sampling plan for a single rectangle (pure numpy convenience wrapper)."""
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (18,):
        raise ShapeError("need 18 placement factors (9 for x, 9 for y)")
    if np.any(omega <= 0) or np.any(omega >= 1):
        raise ContractError(f"placement factors must lie in (0, 1): {omega}")
    coords = cls_plan_coords([rect], Tensor(omega[None, :])).data[0]
    if modulation is None:
        modulation = np.full(9, 0.5)
    return ClsSamplePlan(coords=coords, omega=omega, modulation=np.asarray(modulation, dtype=np.float64))


def cls_conv_forward(
    grid: Tensor,
    bank: KernelBank,
    modulation: Tensor,
    plan_coords: Tensor | None,
    positions: np.ndarray | None,
) -> Tensor:
    """Classification convolution over the circular stencil.

    Dense positions use the circular neighbor offsets; positive positions
    sample their plan coordinates. The eight-orientation aggregation is
    evaluated through the collapsed effective kernel, which is exact because
    every orientation samples the same points.
    """
    if (positions is None) != (plan_coords is None):
        raise ContractError("plan coordinates and positions must be given together")
    if positions is not None and plan_coords is not None:
        if len(positions) != plan_coords.data.shape[0]:
            raise ContractError(
                f"{plan_coords.data.shape[0]} plans for {len(positions)} positive positions"
            )
    return ad.conv3x3(
        grid,
        bank.effective_kernel(),
        modulation=modulation,
        offsets=ad.CIRCLE_OFFSETS,
        plan_coords=plan_coords,
        plan_positions=positions,
    )
