"""Tape-based reverse-mode differentiation over dense numpy arrays.

Feature grids are rank-3 tensors laid out (W, H, F): axis 0 is the x
(column) index, axis 1 the y (row) index. All math is double precision.
Operations record themselves on the active :class:`Tape`; replaying the tape
in reverse populates ``grad`` buffers. With no active tape, everything is a
plain (and freely parallel) numpy computation.
"""
from __future__ import annotations

import math
import threading

import numpy as np

from .errors import ContractError, ShapeError

_SQ2H = math.sqrt(2.0) / 2.0

# tap index j = 3 * (dy + 1) + (dx + 1): row-major over the 3x3 stencil
SQUARE_OFFSETS = np.array(
    [(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.float64
)
# circular stencil: corner taps pulled onto the unit circle
CIRCLE_OFFSETS = np.array(
    [
        (-_SQ2H, -_SQ2H), (0, -1), (_SQ2H, -_SQ2H),
        (-1, 0), (0, 0), (1, 0),
        (-_SQ2H, _SQ2H), (0, 1), (_SQ2H, _SQ2H),
    ],
    dtype=np.float64,
)

_STATE = threading.local()


def _tape_stack() -> list:
    if not hasattr(_STATE, "stack"):
        _STATE.stack = []
    return _STATE.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, out: "Tensor", parents: tuple, vjp) -> None:
        self._entries.append((out, parents, vjp))

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: "Tensor") -> None:
        """Accumulate gradients of ``loss`` into every tensor on its path."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar, got shape {loss.data.shape}")
        if not loss.requires_grad:
            return
        loss.grad = _accum(loss.grad, np.ones_like(loss.data))
        for out, parents, vjp in reversed(self._entries):
            gout = out.grad
            if gout is None:
                continue
            for parent, g in zip(parents, vjp(gout)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = _accum(parent.grad, g)


def _accum(current, update):
    if current is None:
        return np.array(update, dtype=np.float64, copy=True)
    current += update
    return current


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    # make `ndarray <op> Tensor` defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: tuple[Tensor, ...], vjp) -> Tensor:
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise suite


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data**p)
    return _record(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    root = np.sqrt(a.data)
    out = Tensor(root)
    return _record(out, (a,), lambda g: (g * 0.5 / root,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    val = np.exp(a.data)
    out = Tensor(val)
    return _record(out, (a,), lambda g: (g * val,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    val = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(val)
    return _record(out, (a,), lambda g: (g * val * (1.0 - val),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    val = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(val)
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _record(out, (a,), lambda g: (g * sig,))


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    out = Tensor(np.where(pos, a.data, slope * a.data))
    return _record(out, (a,), lambda g: (np.where(pos, g, slope * g),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    active = (a.data > lo) & (a.data < hi)
    return _record(out, (a,), lambda g: (np.where(active, g, 0.0),))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    out = Tensor(np.where(take_a, a.data, b.data))
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(np.where(take_a, g, 0.0), a.data.shape),
            _unbroadcast(np.where(take_a, 0.0, g), b.data.shape),
        ),
    )


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data))
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(np.where(take_a, g, 0.0), a.data.shape),
            _unbroadcast(np.where(take_a, 0.0, g), b.data.shape),
        ),
    )


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select by a boolean mask; the mask itself is not differentiated."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = Tensor(np.where(mask, a.data, b.data))
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(np.where(mask, g, 0.0), a.data.shape),
            _unbroadcast(np.where(mask, 0.0, g), b.data.shape),
        ),
    )


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        ge = np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.data.shape).copy(),)

    return _record(out, (a,), vjp)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    d = sub(a, b)
    return tmean(mul(d, d))


def softmax_over_k(a) -> Tensor:
    """Softmax of a 1-D logit vector; sums to 1 within 1e-12."""
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError("softmax_over_k expects a 1-D vector")
    z = a.data - a.data.max()
    e = np.exp(z)
    y = e / e.sum()
    out = Tensor(y)

    def vjp(g):
        inner = float((g * y).sum())
        return (y * (g - inner),)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape and indexing


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def take(a, key) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[key])

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        return (buf,)

    return _record(out, (a,), vjp)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return _record(out, tuple(tensors), vjp)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(out, tuple(tensors), vjp)


def dot_last(a, w) -> Tensor:
    """Contract the last axis of ``a`` with the first axis of matrix ``w``."""
    a, w = as_tensor(a), as_tensor(w)
    if w.data.ndim != 2 or a.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"dot_last mismatch: {a.data.shape} x {w.data.shape}")
    out = Tensor(a.data @ w.data)

    def vjp(g):
        ga = g @ w.data.T
        gw = a.data.reshape(-1, w.data.shape[0]).T @ g.reshape(-1, w.data.shape[1])
        return (ga, gw)

    return _record(out, (a, w), vjp)


def overwrite_positions(grid, xs: np.ndarray, ys: np.ndarray, values) -> Tensor:
    """Copy of ``grid`` with rows at integer positions replaced by ``values``."""
    grid, values = as_tensor(grid), as_tensor(values)
    xs = np.asarray(xs, dtype=np.intp)
    ys = np.asarray(ys, dtype=np.intp)
    if len(np.unique(xs * grid.data.shape[1] + ys)) != len(xs):
        raise ContractError("overwrite_positions requires unique positions")
    data = grid.data.copy()
    data[xs, ys] = values.data
    out = Tensor(data)

    def vjp(g):
        ggrid = g.copy()
        ggrid[xs, ys] = 0.0
        return (ggrid, g[xs, ys])

    return _record(out, (grid, values), vjp)


# ---------------------------------------------------------------------------
# sampling and convolution


def _shift_forward(data: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Sample ``data`` at (x + dx, y + dy) for every cell, zero padded."""

    def axis_parts(d):
        i0 = math.floor(d)
        f = d - i0
        return ((i0, 1.0 - f), (i0 + 1, f)) if f != 0.0 else ((i0, 1.0),)

    W, H = data.shape[0], data.shape[1]
    out = np.zeros_like(data)
    for ix, wx in axis_parts(dx):
        for iy, wy in axis_parts(dy):
            w = wx * wy
            if w == 0.0:
                continue
            xs0, xs1 = max(0, -ix), min(W, W - ix)
            ys0, ys1 = max(0, -iy), min(H, H - iy)
            if xs0 >= xs1 or ys0 >= ys1:
                continue
            out[xs0:xs1, ys0:ys1] += w * data[xs0 + ix : xs1 + ix, ys0 + iy : ys1 + iy]
    return out


def shift_sample(grid, dx: float, dy: float) -> Tensor:
    """Whole-grid resample at a fixed fractional offset (zero padding)."""
    grid = as_tensor(grid)
    out = Tensor(_shift_forward(grid.data, dx, dy))
    return _record(out, (grid,), lambda g: (_shift_forward(g, -dx, -dy),))


def bilinear_sample(grid, coords) -> Tensor:
    """Sample a (W, H, F) grid at fractional (x, y) coords, zero padded.

    Differentiable with respect to both the grid values and the coordinates.
    Returns an (N, F) tensor.
    """
    grid, coords = as_tensor(grid), as_tensor(coords)
    if grid.data.ndim != 3 or coords.data.ndim != 2 or coords.data.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: grid {grid.data.shape}, coords {coords.data.shape}")
    W, H, F = grid.data.shape
    x, y = coords.data[:, 0], coords.data[:, 1]
    x0, y0 = np.floor(x).astype(np.intp), np.floor(y).astype(np.intp)
    fx, fy = x - x0, y - y0

    def corner(ix, iy):
        valid = (ix >= 0) & (ix < W) & (iy >= 0) & (iy < H)
        vals = np.zeros((len(ix), F))
        vals[valid] = grid.data[ix[valid], iy[valid]]
        return vals, valid

    v00, m00 = corner(x0, y0)
    v10, m10 = corner(x0 + 1, y0)
    v01, m01 = corner(x0, y0 + 1)
    v11, m11 = corner(x0 + 1, y0 + 1)
    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    out = Tensor(
        w00[:, None] * v00 + w10[:, None] * v10 + w01[:, None] * v01 + w11[:, None] * v11
    )

    def vjp(g):
        ggrid = None
        if grid.requires_grad:
            ggrid = np.zeros_like(grid.data)
            for ix, iy, m, w in (
                (x0, y0, m00, w00),
                (x0 + 1, y0, m10, w10),
                (x0, y0 + 1, m01, w01),
                (x0 + 1, y0 + 1, m11, w11),
            ):
                if m.any():
                    np.add.at(ggrid, (ix[m], iy[m]), w[m, None] * g[m])
        gcoords = None
        if coords.requires_grad:
            ddx = (v10 - v00) * (1 - fy)[:, None] + (v11 - v01) * fy[:, None]
            ddy = (v01 - v00) * (1 - fx)[:, None] + (v11 - v10) * fx[:, None]
            gcoords = np.stack([(g * ddx).sum(axis=1), (g * ddy).sum(axis=1)], axis=1)
        return (ggrid, gcoords)

    return _record(out, (grid, coords), vjp)


def conv3x3(
    grid,
    kernel,
    modulation=None,
    offsets: np.ndarray | None = None,
    plan_coords=None,
    plan_positions: np.ndarray | None = None,
    stride: int = 1,
) -> Tensor:
    """3x3 filtering with optional per-position deformable sampling.

    ``kernel`` is either a (3, 3) tensor of scalar taps applied to every
    channel, or a full (3, 3, F_in, F_out) tensor. ``offsets`` gives the tap
    positions of the dense branch (defaults to the unit square stencil).
    Where ``plan_positions`` (P, 2 integer) and ``plan_coords`` (P, 9, 2) are
    given, the taps at those positions sample the plan coordinates instead.
    ``modulation`` is an optional per-tap (9,) tensor.
    """
    grid, kernel = as_tensor(grid), as_tensor(kernel)
    if grid.data.ndim != 3:
        raise ShapeError(f"conv3x3 expects a (W, H, F) grid, got {grid.data.shape}")
    if kernel.data.shape[:2] != (3, 3):
        raise ShapeError(f"kernel must be 3x3-leading, got {kernel.data.shape}")
    scalar_kernel = kernel.data.ndim == 2
    if not scalar_kernel and (
        kernel.data.ndim != 4 or kernel.data.shape[2] != grid.data.shape[2]
    ):
        raise ShapeError(f"kernel {kernel.data.shape} does not match grid {grid.data.shape}")
    if offsets is None:
        offsets = SQUARE_OFFSETS
    taps = reshape(kernel, (9, -1)) if not scalar_kernel else reshape(kernel, (9,))
    if modulation is not None:
        modulation = as_tensor(modulation)
        if modulation.data.shape != (9,):
            raise ShapeError("modulation must have 9 entries")

    out = None
    for j in range(9):
        shifted = shift_sample(grid, float(offsets[j, 0]), float(offsets[j, 1]))
        if stride != 1:
            shifted = take(shifted, (slice(None, None, stride), slice(None, None, stride)))
        if scalar_kernel:
            term = mul(shifted, taps[j])
        else:
            term = dot_last(shifted, reshape(taps[j], (grid.data.shape[2], -1)))
        if modulation is not None:
            term = mul(term, modulation[j])
        out = term if out is None else add(out, term)

    if plan_positions is not None and len(plan_positions) > 0:
        if stride != 1:
            raise ContractError("deformable plans require stride 1")
        if plan_coords is None:
            raise ContractError("plan_positions given without plan_coords")
        plan_coords = as_tensor(plan_coords)
        P = len(plan_positions)
        if plan_coords.data.shape != (P, 9, 2):
            raise ShapeError(f"plan_coords must be ({P}, 9, 2), got {plan_coords.data.shape}")
        sampled = bilinear_sample(grid, reshape(plan_coords, (P * 9, 2)))
        sampled = reshape(sampled, (P, 9, grid.data.shape[2]))
        if modulation is not None:
            sampled = mul(sampled, reshape(modulation, (1, 9, 1)))
        if scalar_kernel:
            rows = tsum(mul(sampled, reshape(taps, (1, 9, 1))), axis=1)
        else:
            rows = dot_last(
                reshape(sampled, (P, 9 * grid.data.shape[2])),
                reshape(kernel, (9 * grid.data.shape[2], -1)),
            )
        out = overwrite_positions(
            out, plan_positions[:, 0], plan_positions[:, 1], rows
        )
    return out


def upsample2x(grid) -> Tensor:
    """Nearest-neighbor 2x upsampling of a (W, H, F) grid."""
    grid = as_tensor(grid)
    out = Tensor(np.repeat(np.repeat(grid.data, 2, axis=0), 2, axis=1))

    def vjp(g):
        W, H, F = grid.data.shape
        return (g.reshape(W, 2, H, 2, F).sum(axis=(1, 3)),)

    return _record(out, (grid,), vjp)
