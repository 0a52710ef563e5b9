"""Label assignment over dense feature grids.

Two assigners share one machinery: a static Gaussian-threshold baseline
(every cell whose heatmap score exceeds T is positive) and the dynamic
assigner that re-ranks the candidate cells of each object by a scheduled
combination of the Gaussian prior and the predicted task quality, keeps a
per-object Top-P as positives, and downweights near-threshold background.

Tag semantics per cell: exactly one of positive / negative / soft-negative /
ignored. Soft negatives keep the background objective with weight 1 - D.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .geometry import GlideBox, giou_hbb

TAG_NEGATIVE = 0
TAG_POSITIVE = 1
TAG_SOFT_NEGATIVE = 2
TAG_IGNORED = 3

TAG_NAMES = {
    TAG_NEGATIVE: "negative",
    TAG_POSITIVE: "positive",
    TAG_SOFT_NEGATIVE: "soft_negative",
    TAG_IGNORED: "ignored",
}


@dataclass
class ObjectScores:
    """Per-cell scores of one object on one feature grid (all detached)."""

    heat: np.ndarray          # (W, H) Gaussian prior F
    support: np.ndarray       # (W, H) bool, the object's Gaussian region
    loc_quality: np.ndarray   # (W, H) L = exp(-localization loss)
    cls_score: np.ndarray     # (W, H) predicted probability of the true class

    def __post_init__(self):
        shapes = {a.shape for a in (self.heat, self.support, self.loc_quality, self.cls_score)}
        if len(shapes) != 1:
            raise ShapeError(f"inconsistent per-object score shapes: {shapes}")


@dataclass
class AssignmentMap:
    """Per-cell training roles plus the scores that produced them."""

    tag: np.ndarray       # (W, H) int
    heat: np.ndarray      # (W, H) F of the owning object (0 on background)
    loc_quality: np.ndarray
    combined: np.ndarray  # (W, H) D
    weight: np.ndarray    # (W, H) soft-negative weight, 1 elsewhere
    owner: np.ndarray     # (W, H) owning object index, -1 on background
    top_p: list[int] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.tag.shape

    def counts(self) -> dict[str, int]:
        return {
            name: int(np.count_nonzero(self.tag == tag)) for tag, name in TAG_NAMES.items()
        }

    def positive_cells(self) -> np.ndarray:
        """(P, 2) integer positions of positive cells."""
        xs, ys = np.nonzero(self.tag == TAG_POSITIVE)
        return np.stack([xs, ys], axis=1)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "tag", "F", "L", "D", "w"])
            W, H = self.tag.shape
            for y in range(H):
                for x in range(W):
                    writer.writerow(
                        [
                            x,
                            y,
                            TAG_NAMES[int(self.tag[x, y])],
                            f"{self.heat[x, y]:.6f}",
                            f"{self.loc_quality[x, y]:.6f}",
                            f"{self.combined[x, y]:.6f}",
                            f"{self.weight[x, y]:.6f}",
                        ]
                    )


def loc_score(pred: GlideBox, gt: GlideBox) -> tuple[float, float]:
    """Localization quality of one prediction against its ground truth.

    Returns (L, loss): loss = 1 - GIoU of the decoded HBBs + mean squared
    glide error + squared area-ratio error; L = exp(-loss) in (0, 1].
    The returned L is a plain number, deliberately outside any tape.
    """
    L, loss = loc_score_arrays(
        pred.l[None, :], pred.s[None, :], np.array([pred.area_ratio]),
        gt.l[None, :], gt.s[None, :], np.array([gt.area_ratio]),
    )
    return float(L[0]), float(loss[0])


def loc_score_arrays(
    l_pred: np.ndarray, s_pred: np.ndarray, a_pred: np.ndarray,
    l_gt: np.ndarray, s_gt: np.ndarray, a_gt: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized localization quality for N anchor-sharing box pairs."""
    l_pred = np.asarray(l_pred, dtype=np.float64)
    l_gt = np.asarray(l_gt, dtype=np.float64)
    # boxes sharing an anchor always intersect: extents add up per side
    inter_w = np.minimum(l_pred[:, 1], l_gt[:, 1]) + np.minimum(l_pred[:, 3], l_gt[:, 3])
    inter_h = np.minimum(l_pred[:, 0], l_gt[:, 0]) + np.minimum(l_pred[:, 2], l_gt[:, 2])
    enc_w = np.maximum(l_pred[:, 1], l_gt[:, 1]) + np.maximum(l_pred[:, 3], l_gt[:, 3])
    enc_h = np.maximum(l_pred[:, 0], l_gt[:, 0]) + np.maximum(l_pred[:, 2], l_gt[:, 2])
    area_p = (l_pred[:, 1] + l_pred[:, 3]) * (l_pred[:, 0] + l_pred[:, 2])
    area_g = (l_gt[:, 1] + l_gt[:, 3]) * (l_gt[:, 0] + l_gt[:, 2])
    inter = inter_w * inter_h
    union = area_p + area_g - inter
    enclosing = enc_w * enc_h
    giou = inter / union - (enclosing - union) / enclosing
    glide_mse = np.mean((np.asarray(s_pred) - np.asarray(s_gt)) ** 2, axis=1)
    loss = 1.0 - giou + glide_mse + (np.asarray(a_pred) - np.asarray(a_gt)) ** 2
    return np.exp(-loss), loss


def dynamic_prior_weight(iteration: int, iter_max: int, theta: float) -> float:
    """Linearly decaying weight of the Gaussian prior in the combined score."""
    if iter_max <= 0:
        raise ContractError("iter_max must be positive")
    iteration = min(max(iteration, 0), iter_max)
    return (iter_max - iteration) / iter_max * theta


def combined_score(
    heat: np.ndarray,
    loc_quality: np.ndarray,
    cls_score: np.ndarray,
    iteration: int,
    iter_max: int,
    theta: float,
    support: np.ndarray | None = None,
) -> np.ndarray:
    """Scheduled blend of Gaussian prior and task quality; 0 off-support."""
    heat = np.asarray(heat, dtype=np.float64)
    if support is None:
        support = heat > 0
    w = dynamic_prior_weight(iteration, iter_max, theta)
    task = np.sqrt(np.asarray(loc_quality, dtype=np.float64) * np.asarray(cls_score, dtype=np.float64))
    return np.where(support, w * heat + (1.0 - w) * task, 0.0)


def _empty_map(shape: tuple[int, int]) -> AssignmentMap:
    W, H = shape
    return AssignmentMap(
        tag=np.full((W, H), TAG_NEGATIVE, dtype=np.int8),
        heat=np.zeros((W, H)),
        loc_quality=np.zeros((W, H)),
        combined=np.zeros((W, H)),
        weight=np.ones((W, H)),
        owner=np.full((W, H), -1, dtype=np.int64),
    )


def _raster_index(shape: tuple[int, int]) -> np.ndarray:
    W, H = shape
    ix, iy = np.meshgrid(np.arange(W), np.arange(H), indexing="ij")
    return iy * W + ix


def _resolve_owners(objects: list[ObjectScores], score_of) -> tuple[np.ndarray, np.ndarray]:
    """Give every covered cell to the object with the larger score."""
    shape = objects[0].heat.shape
    owner = np.full(shape, -1, dtype=np.int64)
    best = np.full(shape, -np.inf)
    for i, obj in enumerate(objects):
        score = np.where(obj.support, score_of(i), -np.inf)
        claim = obj.support & (score > best)
        owner[claim] = i
        best[claim] = score[claim]
    return owner, best


def assign_dynamic(
    objects: list[ObjectScores],
    T: float,
    theta: float,
    iteration: int,
    iter_max: int,
    shape: tuple[int, int] | None = None,
) -> AssignmentMap:
    """Dynamic Top-P assignment.

    Per object: P = ceil(sum of L over its Gaussian region); candidates are
    region cells with F > T; the P best candidates by combined score D stay
    positive, remaining candidates are ignored. Region cells at F <= T become
    soft negatives when D < T (weight 1 - D) and are ignored otherwise.
    Cells outside every region are negative. Overlaps go to the object with
    the larger D; a tie falls to the lower object index, and equal-D
    candidates within an object are broken by higher F then raster order.
    """
    if not objects:
        if shape is None:
            raise ContractError("empty object list needs an explicit grid shape")
        return _empty_map(shape)
    result = _empty_map(objects[0].heat.shape)
    combined = [
        combined_score(o.heat, o.loc_quality, o.cls_score, iteration, iter_max, theta, o.support)
        for o in objects
    ]
    owner, _ = _resolve_owners(objects, lambda i: combined[i])
    raster = _raster_index(result.shape)

    for i, obj in enumerate(objects):
        mine = (owner == i) & obj.support
        if not mine.any():
            result.top_p.append(0)
            continue
        D = combined[i]
        result.owner[mine] = i
        result.heat[mine] = obj.heat[mine]
        result.loc_quality[mine] = obj.loc_quality[mine]
        result.combined[mine] = D[mine]

        P = int(math.ceil(obj.loc_quality[obj.support].sum()))
        result.top_p.append(P)
        candidates = mine & (obj.heat > T)
        if candidates.any():
            xs, ys = np.nonzero(candidates)
            order = np.lexsort((raster[xs, ys], -obj.heat[xs, ys], -D[xs, ys]))
            keep = order[:P]
            drop = order[P:]
            result.tag[xs[keep], ys[keep]] = TAG_POSITIVE
            result.tag[xs[drop], ys[drop]] = TAG_IGNORED
        low = mine & ~candidates
        soft = low & (D < T)
        result.tag[soft] = TAG_SOFT_NEGATIVE
        result.weight[soft] = 1.0 - D[soft]
        result.tag[low & ~soft] = TAG_IGNORED
    return result


def assign_static(
    objects: list[ObjectScores], T: float, shape: tuple[int, int] | None = None
) -> AssignmentMap:
    """Static baseline: region cells with F > T are positive, the rest negative."""
    if not objects:
        if shape is None:
            raise ContractError("empty object list needs an explicit grid shape")
        return _empty_map(shape)
    result = _empty_map(objects[0].heat.shape)
    owner, _ = _resolve_owners(objects, lambda i: objects[i].heat)
    for i, obj in enumerate(objects):
        mine = (owner == i) & obj.support
        result.owner[mine] = i
        result.heat[mine] = obj.heat[mine]
        result.loc_quality[mine] = obj.loc_quality[mine]
        result.combined[mine] = obj.heat[mine]
        positive = mine & (obj.heat > T)
        result.tag[positive] = TAG_POSITIVE
        result.top_p.append(int(np.count_nonzero(positive)))
    return result
