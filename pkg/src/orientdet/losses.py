"""Training objective: objectness, two-stage localization, classification.

All terms are normalized by the per-image counts of their contributing
cells, pooled across pyramid levels, so duplicating a grid with identical
content leaves each term unchanged. Ignored cells contribute nothing
anywhere. The objectness target at a positive cell is the (detached)
localization quality of that cell's prediction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .assign import TAG_NEGATIVE, TAG_POSITIVE, TAG_SOFT_NEGATIVE, AssignmentMap

PROB_EPS = 1e-7


@dataclass
class LossReport:
    loss_obj: float
    loss_loc: float
    loss_cls: float
    loss_total: float
    m_pos: int
    m_neg: int
    m_sneg: int

    HEADER = "iter\tloss\tobj\tloc\tcls\tpos\tneg\tsneg"

    def metrics_line(self, iteration: int) -> str:
        return (
            f"{iteration}\t{self.loss_total:.10g}\t{self.loss_obj:.10g}"
            f"\t{self.loss_loc:.10g}\t{self.loss_cls:.10g}"
            f"\t{self.m_pos}\t{self.m_neg}\t{self.m_sneg}"
        )


def _pairs(assignments, predictions):
    if isinstance(assignments, AssignmentMap):
        assignments = [assignments]
        predictions = [predictions]
    if len(assignments) != len(predictions):
        raise ValueError("one prediction grid per assignment map")
    return list(zip(assignments, predictions))


def _clamped(p: Tensor) -> Tensor:
    return ad.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def objectness_loss(assignments, obj_preds, gamma: float = 2.0) -> tuple[Tensor, dict]:
    """Focal-style binary objectness objective.

    Positives regress toward their localization quality through the focal
    factor |L - p|^gamma on log p; negatives and soft negatives push p to 0
    with the factor p^gamma, soft negatives additionally scaled by their
    assigned weight.
    """
    pos_sum = Tensor(0.0)
    neg_sum = Tensor(0.0)
    sneg_sum = Tensor(0.0)
    m_pos = m_neg = m_sneg = 0
    for amap, pred in _pairs(assignments, obj_preds):
        if pred.data.shape != amap.shape:
            raise ValueError(f"objectness grid {pred.data.shape} vs map {amap.shape}")
        for tag, is_pos in ((TAG_POSITIVE, True), (TAG_NEGATIVE, False), (TAG_SOFT_NEGATIVE, False)):
            xs, ys = np.nonzero(amap.tag == tag)
            if len(xs) == 0:
                continue
            p = _clamped(pred[xs, ys])
            if is_pos:
                target = amap.loc_quality[xs, ys]  # detached by construction
                focal = ad.absolute(target - p) ** gamma
                pos_sum = pos_sum + (focal * ad.log(p)).sum()
                m_pos += len(xs)
            else:
                term = (p**gamma) * ad.log(1.0 - p)
                if tag == TAG_SOFT_NEGATIVE:
                    sneg_sum = sneg_sum + (term * amap.weight[xs, ys]).sum()
                    m_sneg += len(xs)
                else:
                    neg_sum = neg_sum + term.sum()
                    m_neg += len(xs)
    loss = Tensor(0.0)
    if m_pos:
        loss = loss - pos_sum * (1.0 / m_pos)
    if m_neg:
        loss = loss - neg_sum * (1.0 / m_neg)
    if m_sneg:
        loss = loss - sneg_sum * (1.0 / m_sneg)
    return loss, {"m_pos": m_pos, "m_neg": m_neg, "m_sneg": m_sneg}


def glide_box_loss(
    l_pred: Tensor,
    s_pred: Tensor,
    a_pred: Tensor,
    l_gt: np.ndarray,
    s_gt: np.ndarray,
    a_gt: np.ndarray,
) -> Tensor:
    """Per-row localization loss for (P, 4) box tensors sharing anchors.

    1 - GIoU(HBB) + mean squared glide error + squared area-ratio error.
    """
    l_gt = np.asarray(l_gt, dtype=np.float64)
    inter_w = ad.minimum(l_pred[:, 1], l_gt[:, 1]) + ad.minimum(l_pred[:, 3], l_gt[:, 3])
    inter_h = ad.minimum(l_pred[:, 0], l_gt[:, 0]) + ad.minimum(l_pred[:, 2], l_gt[:, 2])
    enc_w = ad.maximum(l_pred[:, 1], l_gt[:, 1]) + ad.maximum(l_pred[:, 3], l_gt[:, 3])
    enc_h = ad.maximum(l_pred[:, 0], l_gt[:, 0]) + ad.maximum(l_pred[:, 2], l_gt[:, 2])
    area_p = (l_pred[:, 1] + l_pred[:, 3]) * (l_pred[:, 0] + l_pred[:, 2])
    area_g = (l_gt[:, 1] + l_gt[:, 3]) * (l_gt[:, 0] + l_gt[:, 2])
    inter = inter_w * inter_h
    union = area_p + area_g - inter
    enclosing = enc_w * enc_h
    giou = inter / union - (enclosing - union) / enclosing
    d = s_pred - np.asarray(s_gt, dtype=np.float64)
    glide_mse = (d * d).sum(axis=1) * 0.25
    da = a_pred - np.asarray(a_gt, dtype=np.float64)
    return (1.0 - giou) + glide_mse + da * da


@dataclass
class StageBoxes:
    """Predicted box tensors at the positive cells of one level."""

    l: Tensor        # (P, 4)
    s: Tensor        # (P, 4)
    a: Tensor        # (P,)


def localization_loss(
    stages: list[tuple[StageBoxes, StageBoxes]],
    targets: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
) -> tuple[Tensor, int]:
    """Mean over positives of initial-stage plus refined-stage box loss.

    ``stages`` holds (initial, refined) predictions per level; ``targets``
    the matching (l, s, a) ground-truth arrays.
    """
    total = Tensor(0.0)
    m_pos = 0
    for (init, refined), (l_gt, s_gt, a_gt) in zip(stages, targets):
        n = len(l_gt)
        if n == 0:
            continue
        m_pos += n
        total = total + glide_box_loss(init.l, init.s, init.a, l_gt, s_gt, a_gt).sum()
        total = total + glide_box_loss(refined.l, refined.s, refined.a, l_gt, s_gt, a_gt).sum()
    if m_pos == 0:
        return Tensor(0.0), 0
    return total * (1.0 / m_pos), m_pos


def classification_loss(
    cls_preds: list[Tensor],
    positives: list[np.ndarray],
    classes: list[np.ndarray],
    num_classes: int,
) -> tuple[Tensor, int]:
    """Mean over positives of the per-category binary cross entropy.

    ``cls_preds`` are (W, H, M_C) probability grids; ``positives`` (P, 2)
    integer cells and ``classes`` (P,) true category indices per level.
    """
    total = Tensor(0.0)
    m_pos = 0
    for pred, cells, cls in zip(cls_preds, positives, classes):
        if len(cells) == 0:
            continue
        m_pos += len(cells)
        p = _clamped(pred[cells[:, 0], cells[:, 1]])
        onehot = np.zeros((len(cells), num_classes))
        onehot[np.arange(len(cells)), np.asarray(cls, dtype=int)] = 1.0
        term = -(ad.log(p) * onehot + ad.log(1.0 - p) * (1.0 - onehot)).sum()
        total = total + term
    if m_pos == 0:
        return Tensor(0.0), 0
    return total * (1.0 / m_pos), m_pos


def total_loss(loss_obj: Tensor, loss_loc: Tensor, loss_cls: Tensor, counts: dict) -> tuple[Tensor, LossReport]:
    """Exact sum of the three components plus a detached report."""
    total = loss_obj + loss_loc + loss_cls
    report = LossReport(
        loss_obj=float(loss_obj.data),
        loss_loc=float(loss_loc.data),
        loss_cls=float(loss_cls.data),
        loss_total=float(total.data),
        m_pos=counts.get("m_pos", 0),
        m_neg=counts.get("m_neg", 0),
        m_sneg=counts.get("m_sneg", 0),
    )
    return total, report
