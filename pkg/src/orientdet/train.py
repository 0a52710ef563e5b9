"""Training harness: the assignment-sampling-refinement closed loop.

Each iteration runs the model at the static Gaussian candidate cells,
scores every candidate with the current predictions, re-assigns labels
(dynamically or statically), and descends the total loss. All per-iteration
state is derived from the iteration index, so a seeded run is replayable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assign import (
    AssignmentMap,
    ObjectScores,
    assign_dynamic,
    assign_static,
    loc_score_arrays,
)
from .autodiff import Tape, Tensor
from .data import EncodedTargets, Scene, encode_targets, pyramid_levels
from .errors import NumericFailure
from .losses import (
    LossReport,
    StageBoxes,
    classification_loss,
    localization_loss,
    objectness_loss,
    total_loss,
)
from .model import LevelOutput, OrientedDetector
from .optim import SGD, cosine_lr
from .postprocess import GroundTruth, evaluate, nms_rotated


@dataclass
class Sample:
    scene: Scene
    targets: EncodedTargets


def prepare_samples(scenes: list[Scene], image_size: int, strides, level_split: float,
                    floor: float) -> list[Sample]:
    levels = pyramid_levels(image_size, strides)
    return [
        Sample(scene=s, targets=encode_targets(s, levels, level_split=level_split, floor=floor))
        for s in scenes
    ]


def candidate_cells(targets: EncodedTargets, T: float) -> list[np.ndarray]:
    """Per-level union of cells whose Gaussian score clears the threshold."""
    cells = []
    for lvl, spec in enumerate(targets.levels):
        mask = np.zeros(spec.shape, dtype=bool)
        for obj in targets.objects:
            if obj.level == lvl:
                mask |= obj.support & (obj.field.grid > T)
        xs, ys = np.nonzero(mask)
        cells.append(np.stack([xs, ys], axis=1))
    return cells


def score_objects(
    targets: EncodedTargets, outputs: list[LevelOutput]
) -> tuple[list[list[ObjectScores]], list[list[int]]]:
    """Detached per-object score maps per level, plus global object indices."""
    per_level_scores: list[list[ObjectScores]] = [[] for _ in targets.levels]
    per_level_objects: list[list[int]] = [[] for _ in targets.levels]
    for gi, obj in enumerate(targets.objects):
        out = outputs[obj.level]
        W, H = out.shape
        L = np.zeros((W, H))
        C = np.zeros((W, H))
        xs, ys = np.nonzero(obj.support)
        if len(xs):
            cells = np.stack([xs, ys], axis=1)
            l_gt = obj.l_at_cells(cells)
            s_gt = np.tile(obj.glides_grid, (len(cells), 1))
            a_gt = np.full(len(cells), obj.area_ratio)
            Lv, _ = loc_score_arrays(
                out.l_ref.data[xs, ys], out.s_ref.data[xs, ys], out.a_ref.data[xs, ys],
                l_gt, s_gt, a_gt,
            )
            L[xs, ys] = Lv
            C[xs, ys] = out.cls.data[xs, ys, obj.cls]
        per_level_scores[obj.level].append(
            ObjectScores(heat=obj.field.grid, support=obj.support, loc_quality=L, cls_score=C)
        )
        per_level_objects[obj.level].append(gi)
    return per_level_scores, per_level_objects


def assign_sample(
    targets: EncodedTargets,
    outputs: list[LevelOutput],
    assigner: str,
    T: float,
    theta: float,
    iteration: int,
    iter_max: int,
) -> list[AssignmentMap]:
    per_level_scores, per_level_objects = score_objects(targets, outputs)
    maps = []
    for lvl, spec in enumerate(targets.levels):
        objs = per_level_scores[lvl]
        if assigner == "dynamic":
            amap = assign_dynamic(objs, T=T, theta=theta, iteration=iteration,
                               iter_max=iter_max, shape=spec.shape)
        else:
            amap = assign_static(objs, T=T, shape=spec.shape)
        # rewrite owners as global object indices
        lookup = per_level_objects[lvl]
        owned = amap.owner >= 0
        if owned.any() and lookup:
            amap.owner[owned] = np.asarray(lookup)[amap.owner[owned]]
        maps.append(amap)
    return maps


def sample_losses(
    sample: Sample,
    outputs: list[LevelOutput],
    maps: list[AssignmentMap],
    gamma: float,
    num_classes: int,
):
    obj_loss, counts = objectness_loss(maps, [o.obj for o in outputs], gamma=gamma)
    stages, box_targets = [], []
    cls_preds, cls_cells, cls_classes = [], [], []
    for lvl, (out, amap) in enumerate(zip(outputs, maps)):
        cells = amap.positive_cells()
        if len(cells) == 0:
            continue
        owners = amap.owner[cells[:, 0], cells[:, 1]]
        l_gt = np.zeros((len(cells), 4))
        s_gt = np.zeros((len(cells), 4))
        a_gt = np.zeros(len(cells))
        classes = np.zeros(len(cells), dtype=int)
        for i, (cell, owner) in enumerate(zip(cells, owners)):
            obj = sample.targets.objects[owner]
            l_gt[i] = obj.l_at_cells(cell[None, :])[0]
            s_gt[i] = obj.glides_grid
            a_gt[i] = obj.area_ratio
            classes[i] = obj.cls
        xs, ys = cells[:, 0], cells[:, 1]
        init = StageBoxes(l=out.l_init[xs, ys], s=out.s_init[xs, ys], a=out.a_init[xs, ys])
        refined = StageBoxes(l=out.l_ref[xs, ys], s=out.s_ref[xs, ys], a=out.a_ref[xs, ys])
        stages.append((init, refined))
        box_targets.append((l_gt, s_gt, a_gt))
        cls_preds.append(out.cls)
        cls_cells.append(cells)
        cls_classes.append(classes)
    loc_loss, _ = localization_loss(stages, box_targets)
    cls_loss, _ = classification_loss(cls_preds, cls_cells, cls_classes, num_classes)
    return obj_loss, loc_loss, cls_loss, counts


@dataclass
class Trainer:
    model: OrientedDetector
    samples: list[Sample]
    assigner: str = "dynamic"
    T: float = 0.3
    theta: float = 0.3
    gamma: float = 2.0
    batch_size: int = 2
    iterations: int = 1000
    lr_start: float = 0.05
    lr_end: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 10.0

    def __post_init__(self):
        self.optimizer = SGD(self.model.params, momentum=self.momentum,
                             weight_decay=self.weight_decay)
        self.iteration = 0

    def batch_indices(self, iteration: int) -> list[int]:
        n = len(self.samples)
        start = iteration * self.batch_size
        return [(start + k) % n for k in range(self.batch_size)]

    def step(self) -> LossReport:
        it = self.iteration
        lr = cosine_lr(it, self.iterations, self.lr_start, self.lr_end)
        counts_sum = {"m_pos": 0, "m_neg": 0, "m_sneg": 0}
        with Tape() as tape:
            batch_total = None
            parts = np.zeros(3)
            for idx in self.batch_indices(it):
                sample = self.samples[idx]
                cells = candidate_cells(sample.targets, self.T)
                outputs = self.model.forward(sample.scene.image, plan_cells=cells)
                maps = assign_sample(sample.targets, outputs, self.assigner,
                                     self.T, self.theta, it, self.iterations)
                obj_l, loc_l, cls_l, counts = sample_losses(
                    sample, outputs, maps, self.gamma, self.model.config.num_classes
                )
                image_total, _ = total_loss(obj_l, loc_l, cls_l, counts)
                batch_total = image_total if batch_total is None else batch_total + image_total
                parts += [float(obj_l.data), float(loc_l.data), float(cls_l.data)]
                for k in counts_sum:
                    counts_sum[k] += counts[k]
            batch_total = batch_total * (1.0 / self.batch_size)
            if not np.isfinite(batch_total.data):
                raise NumericFailure(self._diagnose(batch_total))
            self.optimizer.zero_grad()
            tape.backward(batch_total)
        if self.grad_clip > 0:
            self.optimizer.clip_grad_norm(self.grad_clip)
        self.optimizer.step(lr)
        self.iteration += 1
        parts /= self.batch_size
        return LossReport(
            loss_obj=parts[0], loss_loc=parts[1], loss_cls=parts[2],
            loss_total=float(batch_total.data),
            m_pos=counts_sum["m_pos"], m_neg=counts_sum["m_neg"], m_sneg=counts_sum["m_sneg"],
        )

    def _diagnose(self, loss: Tensor) -> str:
        lines = [f"non-finite loss {loss.data!r} at iteration {self.iteration}"]
        for idx in self.batch_indices(self.iteration):
            sample = self.samples[idx]
            outputs = self.model.forward(sample.scene.image,
                                         plan_cells=candidate_cells(sample.targets, self.T))
            for out in outputs:
                bad = ~np.isfinite(out.obj.data)
                if bad.any():
                    xs, ys = np.nonzero(bad)
                    lines.append(
                        f"sample {idx} level {out.level}: non-finite objectness at {list(zip(xs, ys))[:8]}"
                    )
        return "\n".join(lines)


def detect_scene(model: OrientedDetector, scene: Scene, conf_thresh: float, nms_iou: float):
    outputs = model.forward(scene.image)
    dets = model.decode(outputs, conf_thresh)
    return nms_rotated(dets, nms_iou)


def evaluate_model(
    model: OrientedDetector,
    scenes: list[Scene],
    conf_thresh: float = 0.05,
    nms_iou: float = 0.4,
    mode: str = "allpoint",
):
    dets_per_image = []
    gts_per_image = []
    for scene in scenes:
        dets_per_image.append(detect_scene(model, scene, conf_thresh, nms_iou))
        gts_per_image.append(
            [GroundTruth(polygon=o.polygon, cls=o.cls, difficult=o.difficult) for o in scene.objects]
        )
    return evaluate(dets_per_image, gts_per_image, mode=mode)
