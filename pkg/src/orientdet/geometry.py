"""Rotated-box geometry: glide-encoded boxes, convex quads, enclosing rectangles, IoU.

Conventions used throughout the toolkit:

* image coordinates, x to the right, y down;
* polygons are stored as (4, 2) float arrays, clockwise on screen, starting
  from the vertex on the top edge of the bounding box;
* with y down, a clockwise polygon has positive shoelace area.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateBox, DegeneratePolygon

Array = np.ndarray


@dataclass(frozen=True)
class GlideBox:
    """Oriented box encoded relative to an anchor point.

    ``l`` holds the distances from the anchor to the four edges of the
    horizontal bounding box (top, right, bottom, left); ``s`` holds the glide
    distances from the HBB corners to the oriented-box vertices along the
    edges; ``area_ratio`` is oriented area over HBB area.
    """

    l: Array
    s: Array
    anchor: Array
    area_ratio: float

    def __post_init__(self):
        object.__setattr__(self, "l", np.asarray(self.l, dtype=np.float64))
        object.__setattr__(self, "s", np.asarray(self.s, dtype=np.float64))
        object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=np.float64))

    def validate(self, tol: float = 1e-9) -> None:
        l, s = self.l, self.s
        if l.shape != (4,) or s.shape != (4,):
            raise ContractError("GlideBox needs 4 edge distances and 4 glides")
        if np.any(l < -tol):
            raise ContractError(f"negative edge distance: {l}")
        w, h = l[1] + l[3], l[0] + l[2]
        if s[0] < -tol or s[2] < -tol or s[0] > w + tol or s[2] > w + tol:
            raise ContractError(f"horizontal glide out of [0, {w}]: {s}")
        if s[1] < -tol or s[3] < -tol or s[1] > h + tol or s[3] > h + tol:
            raise ContractError(f"vertical glide out of [0, {h}]: {s}")
        a = glide_area_ratio(l, s)
        if abs(a - self.area_ratio) > 1e-9:
            raise ContractError(f"stored area ratio {self.area_ratio} != {a}")


@dataclass(frozen=True)
class RotRect:
    """Rectangle with center, long side ``s1``, short side ``s2``, angle in [0, pi).

    The angle is measured from the positive x axis to the long side,
    clockwise-positive on screen (y down).
    """

    center: Array
    s1: float
    s2: float
    angle: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))

    def corners(self) -> Array:
        """Corner polygon, clockwise from the local top-left corner."""
        local = np.array(
            [
                [-0.5 * self.s1, -0.5 * self.s2],
                [0.5 * self.s1, -0.5 * self.s2],
                [0.5 * self.s1, 0.5 * self.s2],
                [-0.5 * self.s1, 0.5 * self.s2],
            ]
        )
        return local @ rotation_matrix(self.angle).T + self.center

    def contains(self, points: Array, tol: float = 1e-9) -> Array:
        """Boolean mask of points inside the rectangle (with tolerance)."""
        return self.containment_residual(points) <= tol

    def containment_residual(self, points: Array) -> Array:
        """How far each point pokes outside the rectangle; 0 when inside."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        local = (pts - self.center) @ rotation_matrix(self.angle)
        over = np.abs(local) - np.array([0.5 * self.s1, 0.5 * self.s2])
        return np.maximum(over, 0.0).max(axis=1)


def rotation_matrix(angle: float) -> Array:
    """2x2 rotation by ``angle``, clockwise on screen with y down."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def signed_area(polygon: Array) -> float:
    """Shoelace area; positive for clockwise-on-screen polygons (y down)."""
    p = np.asarray(polygon, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_area(polygon: Array) -> float:
    return abs(signed_area(polygon))


def normalize_clockwise(polygon: Array) -> Array:
    """Reorder vertices clockwise, starting from the topmost (then leftmost) one."""
    p = np.asarray(polygon, dtype=np.float64)
    if signed_area(p) < 0:
        p = p[::-1]
    start = np.lexsort((p[:, 0], p[:, 1]))[0]
    return np.roll(p, -start, axis=0)


def is_convex(polygon: Array, tol: float = 1e-12) -> bool:
    p = np.asarray(polygon, dtype=np.float64)
    e = np.roll(p, -1, axis=0) - p
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    return bool(np.all(cross >= -tol) or np.all(cross <= tol))


def polygon_contains(polygon: Array, points: Array, tol: float = 1e-9) -> Array:
    """Membership test for a convex clockwise polygon."""
    return polygon_containment_residual(polygon, points) <= tol


def polygon_containment_residual(polygon: Array, points: Array) -> Array:
    """Distance by which each point lies outside the convex polygon (0 inside)."""
    p = np.asarray(polygon, dtype=np.float64)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    e = np.roll(p, -1, axis=0) - p
    lengths = np.hypot(e[:, 0], e[:, 1])
    lengths[lengths == 0] = 1.0
    rel = pts[:, None, :] - p[None, :, :]
    cross = e[None, :, 0] * rel[:, :, 1] - e[None, :, 1] * rel[:, :, 0]
    outside = np.maximum(-cross / lengths[None, :], 0.0)
    return outside.max(axis=1)


def glide_area_ratio(l: Array, s: Array) -> float:
    """Oriented-box area over HBB area for a glide encoding.

    The oriented box is the HBB minus four corner triangles.
    """
    l = np.asarray(l, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    w, h = l[1] + l[3], l[0] + l[2]
    if w <= 0 or h <= 0:
        raise DegenerateBox(f"empty box: l={l}")
    cut = 0.5 * (
        s[0] * (h - s[3])
        + (w - s[0]) * s[1]
        + s[2] * (h - s[1])
        + (w - s[2]) * s[3]
    )
    return 1.0 - cut / (w * h)


def decode_glide(box: GlideBox) -> tuple[Array, Array]:
    """Decode a glide box into its HBB (x0, y0, x1, y1) and vertex polygon.

    The polygon vertices are, in order: the vertex on the top HBB edge, then
    right, bottom and left edges (clockwise on screen).
    """
    x, y = box.anchor
    l1, l2, l3, l4 = box.l
    s1, s2, s3, s4 = box.s
    if l1 + l3 <= 0 or l2 + l4 <= 0:
        raise DegenerateBox(f"edge distances collapse: {box.l}")
    x0, y0, x1, y1 = x - l4, y - l1, x + l2, y + l3
    polygon = np.array(
        [
            [x0 + s1, y0],
            [x1, y0 + s2],
            [x1 - s3, y1],
            [x0, y1 - s4],
        ]
    )
    return np.array([x0, y0, x1, y1]), polygon


def encode_glide(polygon: Array, anchor: Array) -> GlideBox:
    """Encode a convex quad (one vertex per HBB edge) relative to an anchor.

    Inverse of :func:`decode_glide` for anchors inside the HBB.
    """
    p = normalize_clockwise(polygon)
    anchor = np.asarray(anchor, dtype=np.float64)
    x0, y0 = p[:, 0].min(), p[:, 1].min()
    x1, y1 = p[:, 0].max(), p[:, 1].max()
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise DegeneratePolygon(f"flat polygon: {p}")
    x, y = anchor
    tol = 1e-9 * max(x1 - x0, y1 - y0, 1.0)
    if not (x0 - tol <= x <= x1 + tol and y0 - tol <= y <= y1 + tol):
        raise ContractError(f"anchor {anchor} outside HBB ({x0},{y0})-({x1},{y1})")
    top, right, bottom, left = p
    l = np.array([y - y0, x1 - x, y1 - y, x - x0])
    s = np.array([top[0] - x0, right[1] - y0, x1 - bottom[0], y1 - left[1]])
    area = polygon_area(p)
    return GlideBox(l=l, s=s, anchor=anchor, area_ratio=area / ((x1 - x0) * (y1 - y0)))


def convex_hull(points: Array) -> Array:
    """Convex hull by monotone chain, returned clockwise on screen."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) < 3:
        raise DegeneratePolygon("need at least 3 distinct points")
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def half(seq):
        out: list[np.ndarray] = []
        for q in seq:
            while len(out) >= 2:
                a, b = out[-2], out[-1]
                if (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]) <= 0:
                    out.pop()
                else:
                    break
            out.append(q)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:
        raise DegeneratePolygon("collinear points")
    if signed_area(hull) < 0:
        hull = hull[::-1]
    return hull


def min_enclosing_rect(polygon: Array) -> RotRect:
    """Minimum-area enclosing rectangle via rotating calipers.

    Exact for convex input: the optimum is aligned with one hull edge.
    """
    hull = convex_hull(np.asarray(polygon, dtype=np.float64))
    edges = np.roll(hull, -1, axis=0) - hull
    best = None
    for ex, ey in edges:
        norm = math.hypot(ex, ey)
        if norm == 0:
            continue
        theta = math.atan2(ey, ex)
        c, s = ex / norm, ey / norm
        u = hull[:, 0] * c + hull[:, 1] * s
        v = -hull[:, 0] * s + hull[:, 1] * c
        w, h = u.max() - u.min(), v.max() - v.min()
        area = w * h
        if best is None or area < best[0]:
            best = (area, theta, c, s, u, v, w, h)
    if best is None or best[0] <= 0:
        raise DegeneratePolygon("polygon has no area")
    _, theta, c, s, u, v, w, h = best
    cu, cv = 0.5 * (u.max() + u.min()), 0.5 * (v.max() + v.min())
    center = np.array([cu * c - cv * s, cu * s + cv * c])
    if w >= h:
        s1, s2, angle = w, h, theta
    else:
        s1, s2, angle = h, w, theta + 0.5 * math.pi
    return RotRect(center=center, s1=float(s1), s2=float(s2), angle=angle % math.pi)


def rect_to_polygon(rect: Array) -> Array:
    """Corners of an axis-aligned (x0, y0, x1, y1) rect, clockwise."""
    x0, y0, x1, y1 = rect
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)


def _rect_area(rect: Array) -> float:
    return max(rect[2] - rect[0], 0.0) * max(rect[3] - rect[1], 0.0)


def iou_hbb(a: Array, b: Array) -> float:
    """IoU of two axis-aligned (x0, y0, x1, y1) rectangles."""
    area_a, area_b = _rect_area(a), _rect_area(b)
    if area_a <= 0 or area_b <= 0:
        raise DegenerateBox("zero-area rectangle")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    return inter / (area_a + area_b - inter)


def giou_hbb(a: Array, b: Array) -> float:
    """Generalized IoU: IoU minus the enclosing-box penalty."""
    area_a, area_b = _rect_area(a), _rect_area(b)
    if area_a <= 0 or area_b <= 0:
        raise DegenerateBox("zero-area rectangle")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = area_a + area_b - inter
    cw = max(a[2], b[2]) - min(a[0], b[0])
    ch = max(a[3], b[3]) - min(a[1], b[1])
    enclosing = cw * ch
    return inter / union - (enclosing - union) / enclosing


def clip_convex(subject: Array, clip: Array) -> Array:
    """Intersection of two convex clockwise polygons (Sutherland-Hodgman).

    Returns an (n, 2) array; empty when the polygons do not overlap.
    """
    output = [tuple(v) for v in np.asarray(subject, dtype=np.float64)]
    clip = np.asarray(clip, dtype=np.float64)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def inside(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax) >= 0

        def intersect(p, q):
            dx, dy = q[0] - p[0], q[1] - p[1]
            denom = ex * dy - ey * dx
            if denom == 0.0:
                # segment collinear with the clip edge (within rounding):
                # both endpoints already lie on the boundary
                return q
            t = (ex * (ay - p[1]) - ey * (ax - p[0])) / denom
            return (p[0] + t * dx, p[1] + t * dy)

        polygon, output = output, []
        for j, cur in enumerate(polygon):
            prev = polygon[j - 1]
            if inside(cur):
                if not inside(prev):
                    output.append(intersect(prev, cur))
                output.append(cur)
            elif inside(prev):
                output.append(intersect(prev, cur))
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def iou_polygon(a: Array, b: Array) -> float:
    """IoU of two convex quads via polygon clipping."""
    pa = normalize_clockwise(a)
    pb = normalize_clockwise(b)
    area_a, area_b = polygon_area(pa), polygon_area(pb)
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter_poly = clip_convex(pa, pb)
    inter = polygon_area(inter_poly) if len(inter_poly) >= 3 else 0.0
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0
