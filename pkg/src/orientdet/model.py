"""Toy oriented detector: tiny conv backbone, two-level pyramid, decoupled heads.

The localization branch predicts an initial glide box, objectness, and the
slide factors; coordinate channels are appended and the box-bound deformable
convolution feeds a multiplicative refinement. The classification branch
places its samples inside the enclosing rectangle of the initial box and
runs the rotating circular kernel bank. A "plain" head mode swaps both
deformable convolutions for ordinary 3x3 convolutions as a baseline.

During training the deformable branches run at externally supplied candidate
cells; at inference they run where initial objectness clears a pre-filter.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cls_sampling import KernelBank, cls_plan_coords
from .data import grid_to_px, pyramid_levels
from .errors import ContractError, DegeneratePolygon, ManifestError
from .geometry import GlideBox, RotRect, decode_glide, min_enclosing_rect
from .loc_sampling import embed_coords, loc_plan_coords, loc_conv_forward
from .postprocess import Detection


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 3
    stem_channels: tuple[int, int, int, int] = (12, 24, 32, 32)
    feat_channels: int = 24
    head_channels: int = 24
    strides: tuple[int, ...] = (8, 16)
    level_split: float = 24.0
    head_mode: str = "deform"      # "deform" | "plain"
    conf_prefilter: float = 0.05

    def validate(self) -> None:
        if self.head_mode not in ("deform", "plain"):
            raise ContractError(f"unknown head mode {self.head_mode!r}")
        if len(self.strides) != 2 or self.strides[1] != 2 * self.strides[0]:
            raise ContractError("expects two pyramid levels one octave apart")


@dataclass
class LevelOutput:
    """Everything the heads produce on one pyramid level."""

    level: int
    stride: int
    l_init: Tensor      # (W, H, 4)
    s_init: Tensor      # (W, H, 4)
    a_init: Tensor      # (W, H)
    obj: Tensor         # (W, H)
    sigma: Tensor       # (W, H, 4)
    omega: Tensor       # (W, H, 18)
    l_ref: Tensor       # (W, H, 4)
    s_ref: Tensor       # (W, H, 4)
    a_ref: Tensor       # (W, H)
    cls: Tensor         # (W, H, num_classes)
    plan_cells: np.ndarray  # (P, 2) cells where the deformable branches ran

    @property
    def shape(self) -> tuple[int, int]:
        return self.obj.data.shape


def orthogonal_init(shape: tuple[int, ...], rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1]))
    fan_out = shape[-1]
    flat = rng.normal(size=(max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out].reshape(shape)


class OrientedDetector:
    """Trainable toy detector over (W, H, C) images in [0, 1]."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(np.random.PCG64(seed))
        c = config
        gain = np.sqrt(2.0)

        def conv(name, cin, cout):
            self._add(name + ".w", orthogonal_init((3, 3, cin, cout), rng, gain))
            self._add(name + ".b", np.zeros(cout))

        def conv1x1(name, cin, cout, zero=False):
            w = np.zeros((cin, cout)) if zero else orthogonal_init((cin, cout), rng, 1.0)
            self._add(name + ".w", w)
            self._add(name + ".b", np.zeros(cout))

        s1, s2, s3, s4 = c.stem_channels
        conv("stem1", c.in_channels, s1)
        conv("stem2", s1, s2)
        conv("stem3", s2, s3)
        conv("stem4", s3, s4)
        conv1x1("lateral0", s3, c.feat_channels)
        conv1x1("lateral1", s4, c.feat_channels)
        conv("fuse0", c.feat_channels, c.feat_channels)
        conv("loc_tower", c.feat_channels, c.head_channels)
        conv("cls_tower", c.feat_channels, c.head_channels)
        conv1x1("init_head", c.head_channels, 10, zero=True)
        conv1x1("sigma_head", c.head_channels, 4, zero=True)
        conv1x1("omega_head", c.head_channels, 18, zero=True)
        conv1x1("refine_head", c.head_channels, 8, zero=True)
        conv1x1("cls_head", c.head_channels, c.num_classes, zero=True)
        if c.head_mode == "deform":
            self._add("loc_kernel", orthogonal_init((3, 3, c.head_channels + 2, c.head_channels), rng, gain))
            self._add("cls_kernel", orthogonal_init((3, 3, c.head_channels, c.head_channels), rng, gain))
            self._add("m_loc", np.zeros(9))
            self._add("m_cls", np.zeros(9))
            self._add("lam_head.w", np.zeros((c.head_channels, 4)))
            self._add("lam_head.b", np.zeros(4))
            self._add("beta_head.w", np.zeros((c.head_channels, 8)))
            self._add("beta_head.b", np.zeros(8))
        else:
            conv("loc_plain", c.head_channels, c.head_channels)
            conv("cls_plain", c.head_channels, c.head_channels)
        self._add("loc_bias", np.zeros(c.head_channels))
        self._add("cls_bias", np.zeros(c.head_channels))

    def _add(self, name: str, array: np.ndarray) -> None:
        self.params[name] = Tensor(array, requires_grad=True)

    # ------------------------------------------------------------------
    # building blocks

    def _conv(self, grid: Tensor, name: str, stride: int = 1) -> Tensor:
        out = ad.conv3x3(grid, self.params[name + ".w"], stride=stride)
        return out + self.params[name + ".b"]

    def _conv1x1(self, grid: Tensor, name: str) -> Tensor:
        return ad.dot_last(grid, self.params[name + ".w"]) + self.params[name + ".b"]

    def _backbone(self, image: np.ndarray) -> list[Tensor]:
        x = Tensor(np.asarray(image, dtype=np.float64))
        if x.data.ndim != 3 or x.data.shape[2] != self.config.in_channels:
            raise ContractError(f"image must be (W, H, {self.config.in_channels})")
        h1 = ad.leaky_relu(self._conv(x, "stem1", stride=2))
        h2 = ad.leaky_relu(self._conv(h1, "stem2", stride=2))
        h3 = ad.leaky_relu(self._conv(h2, "stem3", stride=2))
        h4 = ad.leaky_relu(self._conv(h3, "stem4", stride=2))
        f1 = self._conv1x1(h4, "lateral1")
        up = ad.upsample2x(f1)
        lat0 = self._conv1x1(h3, "lateral0")
        up = up[: lat0.data.shape[0], : lat0.data.shape[1], :]
        f0 = ad.leaky_relu(self._conv(lat0 + up, "fuse0"))
        return [f0, f1]

    def _initial_predictions(self, loc_t: Tensor):
        raw = self._conv1x1(loc_t, "init_head")
        l = ad.softplus(raw[:, :, 0:4]) + 1e-4
        ratio = ad.sigmoid(raw[:, :, 4:8])
        w = l[:, :, 1] + l[:, :, 3]
        h = l[:, :, 0] + l[:, :, 2]
        s = ad.stack(
            [ratio[:, :, 0] * w, ratio[:, :, 1] * h, ratio[:, :, 2] * w, ratio[:, :, 3] * h],
            axis=2,
        )
        a = ad.sigmoid(raw[:, :, 8])
        obj = ad.sigmoid(raw[:, :, 9])
        return l, s, a, obj

    @staticmethod
    def _area_ratio_grid(l: Tensor, s: Tensor) -> Tensor:
        w = l[:, :, 1] + l[:, :, 3]
        h = l[:, :, 0] + l[:, :, 2]
        cut = (
            s[:, :, 0] * (h - s[:, :, 3])
            + (w - s[:, :, 0]) * s[:, :, 1]
            + s[:, :, 2] * (h - s[:, :, 1])
            + (w - s[:, :, 2]) * s[:, :, 3]
        ) * 0.5
        return 1.0 - cut / (w * h)

    def _merect_of_cell(self, l: np.ndarray, s: np.ndarray, cell: np.ndarray) -> RotRect:
        """Enclosing rectangle of the (detached) initial box at one cell."""
        box = GlideBox(l=l, s=s, anchor=cell.astype(np.float64), area_ratio=1.0)
        try:
            _, poly = decode_glide(box)
            return min_enclosing_rect(poly)
        except DegeneratePolygon:
            w, h = l[1] + l[3], l[0] + l[2]
            center = np.array([cell[0] + (l[1] - l[3]) / 2, cell[1] + (l[2] - l[0]) / 2])
            return RotRect(center=center, s1=float(max(w, h, 1e-3)),
                           s2=float(max(min(w, h), 1e-3)), angle=0.0)

    # ------------------------------------------------------------------

    def forward(self, image: np.ndarray, plan_cells: list[np.ndarray] | None = None) -> list[LevelOutput]:
        """Run the detector; deformable branches fire at ``plan_cells``.

        ``plan_cells`` gives the per-level (P, 2) integer cells (training
        passes the label-assignment candidates); ``None`` selects cells by
        the initial-objectness pre-filter, as at inference.
        """
        cfg = self.config
        feats = self._backbone(image)
        outputs = []
        for lvl, feat in enumerate(feats):
            loc_t = ad.leaky_relu(self._conv(feat, "loc_tower"))
            cls_t = ad.leaky_relu(self._conv(feat, "cls_tower"))
            l_init, s_init, a_init, obj = self._initial_predictions(loc_t)
            sigma_r = self._conv1x1(loc_t, "sigma_head")
            sigma = ad.sigmoid(sigma_r)
            omega = ad.sigmoid(self._conv1x1(cls_t, "omega_head"))

            if plan_cells is not None:
                cells = np.asarray(plan_cells[lvl], dtype=np.intp).reshape(-1, 2)
            else:
                xs, ys = np.nonzero(obj.data > cfg.conf_prefilter)
                cells = np.stack([xs, ys], axis=1)
            if cfg.head_mode != "deform":
                cells = np.zeros((0, 2), dtype=np.intp)

            if cfg.head_mode == "deform":
                loc_coords = cls_coords = None
                if len(cells):
                    l_g = l_init[cells[:, 0], cells[:, 1]]
                    s_g = s_init[cells[:, 0], cells[:, 1]]
                    sig_g = sigma[cells[:, 0], cells[:, 1]]
                    loc_coords = loc_plan_coords(l_g, s_g, sig_g, cells.astype(np.float64))
                    rects = [
                        self._merect_of_cell(l_g.data[i], s_g.data[i], cells[i])
                        for i in range(len(cells))
                    ]
                    cls_coords = cls_plan_coords(rects, omega[cells[:, 0], cells[:, 1]])
                sce = embed_coords(loc_t)
                m_loc = ad.sigmoid(self.params["m_loc"])
                loc_out = loc_conv_forward(
                    sce, self.params["loc_kernel"], m_loc,
                    loc_coords, cells if len(cells) else None,
                )
                loc_out = ad.leaky_relu(loc_out + self.params["loc_bias"])
                lam = ad.sigmoid(self._conv1x1(ad.reshape(cls_t.mean(axis=(0, 1)), (1, -1)), "lam_head"))
                beta = ad.softmax_over_k(
                    self._conv1x1(ad.reshape(cls_t.mean(axis=(0, 1)), (1, -1)), "beta_head")[0]
                )
                bank = KernelBank.build(self.params["cls_kernel"], lam[0], beta)
                m_cls = ad.sigmoid(self.params["m_cls"])
                from .cls_sampling import cls_conv_forward

                cls_out = cls_conv_forward(
                    cls_t, bank, m_cls,
                    cls_coords, cells if len(cells) else None,
                )
                cls_out = ad.leaky_relu(cls_out + self.params["cls_bias"])
            else:
                loc_out = ad.leaky_relu(self._conv(loc_t, "loc_plain") + self.params["loc_bias"])
                cls_out = ad.leaky_relu(self._conv(cls_t, "cls_plain") + self.params["cls_bias"])

            deltas = self._conv1x1(loc_out, "refine_head")
            d_l = ad.exp(ad.clip(deltas[:, :, 0:4], -6.0, 6.0))
            d_s = ad.exp(ad.clip(deltas[:, :, 4:8], -6.0, 6.0))
            l_ref = l_init * d_l
            s_ref = s_init * d_s
            w_ref = l_ref[:, :, 1] + l_ref[:, :, 3]
            h_ref = l_ref[:, :, 0] + l_ref[:, :, 2]
            bound = ad.stack([w_ref, h_ref, w_ref, h_ref], axis=2)
            zeros = np.zeros(s_ref.data.shape)
            s_ref = ad.minimum(ad.maximum(s_ref, zeros), bound)
            a_ref = self._area_ratio_grid(l_ref, s_ref)
            cls = ad.sigmoid(self._conv1x1(cls_out, "cls_head"))

            outputs.append(
                LevelOutput(
                    level=lvl,
                    stride=cfg.strides[lvl],
                    l_init=l_init, s_init=s_init, a_init=a_init, obj=obj,
                    sigma=sigma, omega=omega,
                    l_ref=l_ref, s_ref=s_ref, a_ref=a_ref,
                    cls=cls, plan_cells=cells,
                )
            )
        return outputs

    def decode(self, outputs: list[LevelOutput], conf_thresh: float) -> list[Detection]:
        dets: list[Detection] = []
        for out in outputs:
            dets.extend(
                decode_level(
                    out.l_ref.data, out.s_ref.data, out.obj.data, out.cls.data,
                    out.stride, conf_thresh,
                )
            )
        return dets

    # ------------------------------------------------------------------
    # checkpoints

    def save_checkpoint(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        blob = bytearray()
        lines = []
        for name in sorted(self.params):
            data = np.ascontiguousarray(self.params[name].data, dtype="<f8")
            raw = data.tobytes()
            shape = "x".join(str(d) for d in data.shape)
            digest = hashlib.sha256(raw).hexdigest()
            lines.append(f"{name} {shape} {len(blob)} {digest}")
            blob.extend(raw)
        with open(os.path.join(directory, "params.bin"), "wb") as fh:
            fh.write(bytes(blob))
        with open(os.path.join(directory, "manifest.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def load_checkpoint(self, directory) -> None:
        manifest = os.path.join(directory, "manifest.txt")
        binary = os.path.join(directory, "params.bin")
        if not (os.path.exists(manifest) and os.path.exists(binary)):
            raise ManifestError(f"incomplete checkpoint at {directory}")
        with open(binary, "rb") as fh:
            blob = fh.read()
        seen = set()
        with open(manifest) as fh:
            for line in fh:
                if not line.strip():
                    continue
                name, shape_s, offset_s, digest = line.split()
                if name not in self.params:
                    raise ManifestError(f"unknown parameter {name!r}")
                shape = tuple(int(v) for v in shape_s.split("x")) if shape_s != "" else ()
                want = self.params[name].data.shape
                if shape != want:
                    raise ManifestError(f"{name}: checkpoint shape {shape} vs model {want}")
                offset = int(offset_s)
                count = int(np.prod(shape, dtype=np.int64)) if shape else 1
                raw = blob[offset : offset + 8 * count]
                if hashlib.sha256(raw).hexdigest() != digest:
                    raise ManifestError(f"{name}: checksum mismatch")
                self.params[name].data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
                seen.add(name)
        missing = set(self.params) - seen
        if missing:
            raise ManifestError(f"checkpoint missing parameters: {sorted(missing)}")


def decode_level(
    l_ref: np.ndarray,
    s_ref: np.ndarray,
    obj: np.ndarray,
    cls: np.ndarray,
    stride: int,
    conf_thresh: float,
) -> list[Detection]:
    """Turn one level's refined grids into pixel-space detections.

    Confidence is objectness times the best per-category score; cells below
    the threshold produce nothing.
    """
    best_cls = np.argmax(cls, axis=2)
    best_score = np.take_along_axis(cls, best_cls[:, :, None], axis=2)[:, :, 0]
    score = obj * best_score
    xs, ys = np.nonzero(score > conf_thresh)
    dets = []
    for ix, iy in zip(xs, ys):
        box = GlideBox(
            l=l_ref[ix, iy], s=s_ref[ix, iy],
            anchor=np.array([ix, iy], dtype=np.float64), area_ratio=1.0,
        )
        try:
            _, poly_grid = decode_glide(box)
        except Exception:
            continue
        dets.append(
            Detection(
                polygon=grid_to_px(poly_grid, stride),
                cls=int(best_cls[ix, iy]),
                score=float(score[ix, iy]),
            )
        )
    return dets
