"""Synthetic oriented scenes, DOTA-format annotations, and target encoding.

Synthetic scenes are rotated rectangles over a noise background. Classes are
told apart by fill texture (solid / striped / dotted), so classification
depends on the object interior while localization depends on the boundary.

Grid convention: feature-grid cell (i, j) at stride s is anchored at image
pixel ((i + 0.5) s, (j + 0.5) s); box targets are expressed in grid units
(pixels divided by the stride).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParseError
from .geometry import (
    GlideBox,
    RotRect,
    encode_glide,
    is_convex,
    iou_polygon,
    min_enclosing_rect,
    normalize_clockwise,
    polygon_area,
    rotation_matrix,
)
from .heatmap import DEFAULT_SUPPORT_FLOOR, GaussianField, gaussian_field

TEXTURES = ("solid", "striped", "dotted")


@dataclass
class SceneObject:
    polygon: np.ndarray          # (4, 2) pixels, clockwise
    cls: int
    difficult: bool = False
    clipped: bool = False

    def __post_init__(self):
        self.polygon = normalize_clockwise(np.asarray(self.polygon, dtype=np.float64))


@dataclass
class Scene:
    image: np.ndarray            # (W, H, C) in [0, 1]
    objects: list[SceneObject]
    short_count: bool = False    # placement gave up before reaching the target count


@dataclass
class SynthSpec:
    image_size: int = 64
    channels: int = 1
    count_min: int = 1
    count_max: int = 2
    size_min: float = 12.0
    size_max: float = 28.0
    aspect_min: float = 1.0
    aspect_max: float = 2.5
    num_classes: int = 3

    def validate(self) -> None:
        if self.count_min < 0 or self.count_max < self.count_min:
            raise ContractError("bad object count range")
        if not (0 < self.size_min <= self.size_max <= self.image_size):
            raise ContractError("bad size range")
        if not (1.0 <= self.aspect_min <= self.aspect_max):
            raise ContractError("aspect ratios must be >= 1")
        if not 1 <= self.num_classes <= len(TEXTURES):
            raise ContractError(f"supports up to {len(TEXTURES)} texture classes")


def _texture_values(texture: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Fill intensity at local rectangle coordinates (origin at center)."""
    bright, dark = 0.9, 0.35
    if texture == "solid":
        return np.full(u.shape, bright)
    if texture == "striped":
        on = (np.floor(u / 3.0) % 2) == 0
        return np.where(on, bright, dark)
    on = ((np.floor(u / 3.0) % 2) == 0) & ((np.floor(v / 3.0) % 2) == 0)
    return np.where(on, bright, dark)


def _render_object(image: np.ndarray, rect: RotRect, cls: int) -> None:
    W, H = image.shape[0], image.shape[1]
    ix, iy = np.meshgrid(np.arange(W), np.arange(H), indexing="ij")
    centers = np.stack([ix.ravel() + 0.5, iy.ravel() + 0.5], axis=1)
    local = (centers - rect.center) @ rotation_matrix(rect.angle)
    inside = (np.abs(local[:, 0]) <= rect.s1 / 2) & (np.abs(local[:, 1]) <= rect.s2 / 2)
    values = _texture_values(TEXTURES[cls], local[:, 0], local[:, 1])
    mask = inside.reshape(W, H)
    vals = values.reshape(W, H)
    image[mask] = vals[mask][:, None]


def synth_scene(seed: int, spec: SynthSpec) -> Scene:
    """Deterministic synthetic scene for one seed."""
    spec.validate()
    rng = np.random.default_rng(np.random.PCG64(seed))
    n = spec.image_size
    image = rng.uniform(0.0, 0.25, size=(n, n, spec.channels))
    count = int(rng.integers(spec.count_min, spec.count_max + 1))
    objects: list[SceneObject] = []
    rects: list[RotRect] = []
    short = False
    for _ in range(count):
        placed = False
        for _attempt in range(100):
            s1 = rng.uniform(spec.size_min, spec.size_max)
            aspect = rng.uniform(spec.aspect_min, spec.aspect_max)
            s2 = max(s1 / aspect, 3.0)
            angle = rng.uniform(0.0, np.pi)
            margin = 0.5 * np.hypot(s1, s2) + 1.0
            if 2 * margin >= n:
                continue
            center = rng.uniform(margin, n - margin, size=2)
            rect = RotRect(center=center, s1=s1, s2=s2, angle=angle)
            poly = rect.corners()
            if any(iou_polygon(poly, r.corners()) > 0.05 for r in rects):
                continue
            cls = int(rng.integers(0, spec.num_classes))
            _render_object(image, rect, cls)
            objects.append(SceneObject(polygon=poly, cls=cls))
            rects.append(rect)
            placed = True
            break
        if not placed:
            short = True
    return Scene(image=image, objects=objects, short_count=short)


def augment_scene(
    scene: Scene,
    rng: np.random.Generator,
    flip: bool = True,
    rot90: bool = True,
    arbitrary: bool = False,
) -> Scene:
    """Random horizontal flip and quarter-turn rotation; optionally an
    arbitrary-angle rotation with nearest-neighbor resampling (square images).

    Polygons follow the image exactly; arbitrary rotation flags objects whose
    vertices leave the canvas as clipped.
    """
    image = scene.image
    n = image.shape[0]
    if image.shape[1] != n:
        raise ContractError("augmentation expects square images")
    polys = [o.polygon.copy() for o in scene.objects]
    clipped = [o.clipped for o in scene.objects]

    if flip and rng.random() < 0.5:
        image = image[::-1, :, :].copy()
        polys = [np.stack([n - p[:, 0], p[:, 1]], axis=1) for p in polys]

    if rot90:
        for _ in range(int(rng.integers(0, 4))):
            # quarter turn clockwise on screen: (x, y) -> (n - y, x)
            image = image.transpose(1, 0, 2)[::-1, :, :].copy()
            polys = [np.stack([n - p[:, 1], p[:, 0]], axis=1) for p in polys]

    if arbitrary:
        angle = float(rng.uniform(0.0, 2.0 * np.pi))
        c = n / 2.0
        rot = rotation_matrix(angle)
        ix, iy = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        centers = np.stack([ix.ravel() + 0.5, iy.ravel() + 0.5], axis=1)
        src = (centers - c) @ rot + c  # inverse rotation of each target pixel
        sx = np.floor(src[:, 0]).astype(int)
        sy = np.floor(src[:, 1]).astype(int)
        valid = (sx >= 0) & (sx < n) & (sy >= 0) & (sy < n)
        out = np.zeros_like(image)
        flat = out.reshape(n * n, -1)
        flat[valid] = image[sx[valid], sy[valid]]
        image = flat.reshape(image.shape)
        polys = [(p - c) @ rot.T + c for p in polys]
        clipped = [
            bool(np.any((p < 0) | (p > n))) or was for p, was in zip(polys, clipped)
        ]

    objects = [
        SceneObject(polygon=p, cls=o.cls, difficult=o.difficult, clipped=flag)
        for p, o, flag in zip(polys, scene.objects, clipped)
    ]
    return Scene(image=image, objects=objects, short_count=scene.short_count)


# ---------------------------------------------------------------------------
# DOTA-format annotations


@dataclass
class DotaRecord:
    polygon: np.ndarray
    class_name: str
    difficult: bool
    fixed_nonconvex: bool = False


def parse_dota(path, classes: list[str] | None = None) -> list[DotaRecord]:
    """Parse one DOTA annotation file.

    Lines are "x1 y1 x2 y2 x3 y3 x4 y4 category difficulty"; metadata lines
    starting with "imagesource:" or "gsd:" are skipped. Vertices come back
    normalized clockwise; non-convex quads are replaced by their minimum
    enclosing rectangle and flagged.
    """
    records: list[DotaRecord] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("imagesource:") or line.startswith("gsd:"):
                continue
            parts = line.split()
            if len(parts) != 10:
                raise ParseError(f"expected 10 fields, got {len(parts)}", line=lineno)
            try:
                coords = np.array([float(v) for v in parts[:8]]).reshape(4, 2)
            except ValueError as exc:
                raise ParseError(f"bad coordinate: {exc}", line=lineno) from None
            name = parts[8]
            if classes is not None and name not in classes:
                raise ParseError(f"unknown category {name!r}", line=lineno)
            try:
                difficult = bool(int(parts[9]))
            except ValueError:
                raise ParseError(f"bad difficulty flag {parts[9]!r}", line=lineno) from None
            poly = normalize_clockwise(coords)
            fixed = False
            if polygon_area(poly) <= 0:
                raise ParseError("degenerate polygon", line=lineno)
            if not is_convex(poly):
                poly = normalize_clockwise(min_enclosing_rect(poly).corners())
                fixed = True
            records.append(DotaRecord(polygon=poly, class_name=name, difficult=difficult,
                                      fixed_nonconvex=fixed))
    return records


def write_dota(path, objects: list[SceneObject], class_names: list[str]) -> None:
    with open(path, "w") as fh:
        for obj in objects:
            coords = " ".join(f"{v:.2f}" for v in obj.polygon.reshape(-1))
            fh.write(f"{coords} {class_names[obj.cls]} {int(obj.difficult)}\n")


# ---------------------------------------------------------------------------
# target encoding


@dataclass
class LevelSpec:
    stride: int
    shape: tuple[int, int]


def pyramid_levels(image_size: int, strides=(8, 16)) -> list[LevelSpec]:
    levels = []
    for s in strides:
        side = (image_size + s - 1) // s
        levels.append(LevelSpec(stride=s, shape=(side, side)))
    return levels


def route_level(polygon: np.ndarray, levels: list[LevelSpec], split: float) -> int:
    """Smaller objects go to the finer level; the last level catches the rest."""
    x0, y0 = polygon.min(axis=0)
    x1, y1 = polygon.max(axis=0)
    max_side = max(x1 - x0, y1 - y0)
    for i in range(len(levels) - 1):
        if max_side < split * (2**i):
            return i
    return len(levels) - 1


def px_to_grid(points_px: np.ndarray, stride: float) -> np.ndarray:
    return np.asarray(points_px, dtype=np.float64) / stride - 0.5


def grid_to_px(points_grid: np.ndarray, stride: float) -> np.ndarray:
    return (np.asarray(points_grid, dtype=np.float64) + 0.5) * stride


@dataclass
class ObjectTargets:
    """Ground truth of one object on its assigned pyramid level."""

    level: int
    cls: int
    rect_px: RotRect
    field: GaussianField
    support: np.ndarray          # (W, H) bool: Gaussian region inside the HBB
    polygon_grid: np.ndarray     # (4, 2) grid units
    hbb_grid: np.ndarray         # (x0, y0, x1, y1) grid units
    glides_grid: np.ndarray      # (4,) grid units
    area_ratio: float
    center_cell: tuple[int, int]
    tiny: bool = False

    def box_at(self, ix: int, iy: int) -> GlideBox:
        """Glide encoding of this object relative to cell (ix, iy)."""
        x0, y0, x1, y1 = self.hbb_grid
        l = np.array([iy - y0, x1 - ix, y1 - iy, ix - x0])
        return GlideBox(l=np.maximum(l, 0.0), s=self.glides_grid,
                        anchor=np.array([ix, iy], dtype=np.float64),
                        area_ratio=self.area_ratio)

    def l_at_cells(self, cells: np.ndarray) -> np.ndarray:
        """(P, 4) edge distances for integer cells (clamped at 0 for tiny boxes)."""
        x0, y0, x1, y1 = self.hbb_grid
        l = np.stack(
            [cells[:, 1] - y0, x1 - cells[:, 0], y1 - cells[:, 1], cells[:, 0] - x0],
            axis=1,
        )
        return np.maximum(l, 0.0)


@dataclass
class EncodedTargets:
    levels: list[LevelSpec]
    objects: list[ObjectTargets]


def encode_targets(
    scene: Scene,
    levels: list[LevelSpec],
    level_split: float = 24.0,
    floor: float = DEFAULT_SUPPORT_FLOOR,
) -> EncodedTargets:
    """Glide encoding plus Gaussian field for every object, per routed level."""
    encoded: list[ObjectTargets] = []
    for obj in scene.objects:
        li = route_level(obj.polygon, levels, level_split)
        level = levels[li]
        rect = min_enclosing_rect(obj.polygon)
        fld = gaussian_field(rect, level.shape, level.stride, floor=floor)
        poly_grid = px_to_grid(obj.polygon, level.stride)
        hbb_grid = np.array(
            [poly_grid[:, 0].min(), poly_grid[:, 1].min(), poly_grid[:, 0].max(), poly_grid[:, 1].max()]
        )
        center_grid = px_to_grid(rect.center[None, :], level.stride)[0]
        W, H = level.shape
        cx = int(np.clip(np.rint(center_grid[0]), 0, W - 1))
        cy = int(np.clip(np.rint(center_grid[1]), 0, H - 1))

        ix, iy = np.meshgrid(np.arange(W), np.arange(H), indexing="ij")
        inside_hbb = (
            (ix >= hbb_grid[0]) & (ix <= hbb_grid[2]) & (iy >= hbb_grid[1]) & (iy <= hbb_grid[3])
        )
        support = fld.support & inside_hbb
        tiny = not support.any()
        if tiny:
            support = np.zeros((W, H), dtype=bool)
            support[cx, cy] = True

        enc = encode_glide(obj.polygon, rect.center)
        encoded.append(
            ObjectTargets(
                level=li,
                cls=obj.cls,
                rect_px=rect,
                field=fld,
                support=support,
                polygon_grid=poly_grid,
                hbb_grid=hbb_grid,
                glides_grid=enc.s / level.stride,
                area_ratio=enc.area_ratio,
                center_cell=(cx, cy),
                tiny=tiny,
            )
        )
    return EncodedTargets(levels=levels, objects=encoded)


# ---------------------------------------------------------------------------
# dataset directories (images as PNG + DOTA annotations + manifest)


def save_dataset(root, scenes: list[Scene], class_names: list[str]) -> None:
    from PIL import Image

    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "annotations"), exist_ok=True)
    names = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:05d}"
        names.append(name)
        arr = np.clip(scene.image * 255.0, 0, 255).astype(np.uint8)
        arr = np.transpose(arr, (1, 0, 2))  # (W, H, C) -> rows x cols for PIL
        if arr.shape[2] == 1:
            img = Image.fromarray(arr[:, :, 0], mode="L")
        else:
            img = Image.fromarray(arr, mode="RGB")
        img.save(os.path.join(root, "images", name + ".png"))
        write_dota(os.path.join(root, "annotations", name + ".txt"), scene.objects, class_names)
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        fh.write("\n".join(names) + "\n")


def load_dataset(root, class_names: list[str]) -> list[Scene]:
    from PIL import Image

    manifest = os.path.join(root, "manifest.txt")
    if not os.path.exists(manifest):
        raise ParseError(f"missing manifest: {manifest}")
    scenes = []
    with open(manifest) as fh:
        names = [line.strip() for line in fh if line.strip()]
    for name in names:
        img = Image.open(os.path.join(root, "images", name + ".png"))
        arr = np.asarray(img, dtype=np.float64) / 255.0
        if arr.ndim == 2:
            arr = arr[:, :, None]
        arr = np.transpose(arr, (1, 0, 2))  # rows x cols -> (W, H, C)
        records = parse_dota(os.path.join(root, "annotations", name + ".txt"), classes=class_names)
        objects = [
            SceneObject(polygon=r.polygon, cls=class_names.index(r.class_name), difficult=r.difficult)
            for r in records
        ]
        scenes.append(Scene(image=arr, objects=objects))
    return scenes
