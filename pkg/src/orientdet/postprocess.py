"""Rotated NMS and VOC-style average-precision evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import iou_polygon

DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class Detection:
    polygon: np.ndarray   # (4, 2) pixels
    cls: int
    score: float


@dataclass
class GroundTruth:
    polygon: np.ndarray
    cls: int
    difficult: bool = False


def nms_rotated(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy class-wise suppression by descending score, rotated IoU."""
    kept: list[Detection] = []
    by_class: dict[int, list[Detection]] = {}
    for d in dets:
        by_class.setdefault(d.cls, []).append(d)
    for cls in sorted(by_class):
        group = sorted(by_class[cls], key=lambda d: -d.score)
        chosen: list[Detection] = []
        for d in group:
            if all(iou_polygon(d.polygon, k.polygon) <= iou_thresh for k in chosen):
                chosen.append(d)
        kept.extend(chosen)
    return kept


@dataclass
class EvalResult:
    thresholds: tuple[float, ...]
    per_class: dict[int, dict[float, float]]            # class -> threshold -> AP
    curves: dict[int, dict[float, tuple[np.ndarray, np.ndarray]]]
    flagged: set[int] = field(default_factory=set)      # classes scored by the empty convention
    mode: str = "allpoint"

    @property
    def map50(self) -> float:
        return self.mean_ap(0.5)

    @property
    def map75(self) -> float:
        return self.mean_ap(0.75)

    @property
    def map5095(self) -> float:
        return float(np.mean([self.mean_ap(t) for t in self.thresholds]))

    def mean_ap(self, threshold: float) -> float:
        if not self.per_class:
            return 1.0
        return float(np.mean([aps[threshold] for aps in self.per_class.values()]))

    def table(self, class_names: list[str] | None = None) -> str:
        lines = ["class\tAP50\tAP75\tAP50:95"]
        for cls in sorted(self.per_class):
            aps = self.per_class[cls]
            name = class_names[cls] if class_names else str(cls)
            mean = np.mean([aps[t] for t in self.thresholds])
            flag = " (empty)" if cls in self.flagged else ""
            lines.append(f"{name}{flag}\t{aps[0.5]:.4f}\t{aps[0.75]:.4f}\t{mean:.4f}")
        lines.append(f"mean\t{self.map50:.4f}\t{self.map75:.4f}\t{self.map5095:.4f}")
        return "\n".join(lines)


def ap_from_pr(recall: np.ndarray, precision: np.ndarray, mode: str = "allpoint") -> float:
    """Area under the precision envelope (all-point) or 11-point average."""
    if mode == "voc07":
        ap = 0.0
        for t in np.arange(0.0, 1.01, 0.1):
            mask = recall >= t - 1e-12
            ap += (precision[mask].max() if mask.any() else 0.0) / 11.0
        return float(ap)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _class_pr(
    dets: list[tuple[int, Detection]],
    gts: list[tuple[int, GroundTruth]],
    iou_thresh: float,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Precision/recall points for one class over (image_id, item) pairs."""
    npos = sum(1 for _, g in gts if not g.difficult)
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1].score)
    matched: set[int] = set()
    tp, fp = [], []
    for i in order:
        img, det = dets[i]
        best_iou, best_j = 0.0, -1
        for j, (gimg, gt) in enumerate(gts):
            if gimg != img or j in matched:
                continue
            iou = iou_polygon(det.polygon, gt.polygon)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thresh:
            if gts[best_j][1].difficult:
                continue  # matched a difficult object: not a hit, not a miss
            matched.add(best_j)
            tp.append(1.0)
            fp.append(0.0)
        else:
            tp.append(0.0)
            fp.append(1.0)
    tp_c = np.cumsum(tp)
    fp_c = np.cumsum(fp)
    recall = tp_c / npos if npos > 0 else np.zeros_like(tp_c)
    precision = tp_c / np.maximum(tp_c + fp_c, 1e-12)
    return recall, precision, npos


def evaluate(
    dets_per_image: list[list[Detection]],
    gts_per_image: list[list[GroundTruth]],
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
    mode: str = "allpoint",
) -> EvalResult:
    """AP per class at each IoU threshold, matched greedily by score.

    Every ground truth matches at most one detection. Classes with neither
    ground truth nor detections score 1.0 and are flagged; detections of a
    class with no ground truth score 0.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths must cover the same images")
    classes = sorted(
        {d.cls for dets in dets_per_image for d in dets}
        | {g.cls for gts in gts_per_image for g in gts}
    )
    per_class: dict[int, dict[float, float]] = {}
    curves: dict[int, dict[float, tuple[np.ndarray, np.ndarray]]] = {}
    flagged: set[int] = set()
    for cls in classes:
        dets = [
            (img, d) for img, dets in enumerate(dets_per_image) for d in dets if d.cls == cls
        ]
        gts = [(img, g) for img, gts in enumerate(gts_per_image) for g in gts if g.cls == cls]
        per_class[cls] = {}
        curves[cls] = {}
        npos = sum(1 for _, g in gts if not g.difficult)
        for t in thresholds:
            if npos == 0:
                ap = 1.0 if not dets else 0.0
                if not dets:
                    flagged.add(cls)
                recall = precision = np.zeros(0)
            else:
                recall, precision, _ = _class_pr(dets, gts, t)
                ap = ap_from_pr(recall, precision, mode)
            per_class[cls][t] = ap
            curves[cls][t] = (recall, precision)
    return EvalResult(thresholds=tuple(thresholds), per_class=per_class, curves=curves,
                      flagged=flagged, mode=mode)
