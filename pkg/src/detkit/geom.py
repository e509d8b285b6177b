"""Box geometry: IoU, class-wise NMS and greedy score-ordered matching."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, TypeVar

import numpy as np

from .detmodel import BBox, DegenerateBoxError

T = TypeVar("T")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_predictions: list[int] = field(default_factory=list)
    unmatched_gts: list[int] = field(default_factory=list)


def iou(a: BBox, b: BBox) -> float:
    if a.is_degenerate or b.is_degenerate:
        raise DegenerateBoxError(f"IoU of degenerate box: {a if a.is_degenerate else b}")
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: Sequence[BBox], b: Sequence[BBox]) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``. Same arithmetic as :func:`iou`."""
    if not a or not b:
        return np.zeros((len(a), len(b)))
    A = np.array([[x.x1, x.y1, x.x2, x.y2] for x in a], dtype=np.float64)
    B = np.array([[x.x1, x.y1, x.x2, x.y2] for x in b], dtype=np.float64)
    if np.any(A[:, 2] <= A[:, 0]) or np.any(A[:, 3] <= A[:, 1]) or np.any(B[:, 2] <= B[:, 0]) or np.any(B[:, 3] <= B[:, 1]):
        raise DegenerateBoxError("IoU of degenerate box")
    iw = np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0])
    ih = np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1])
    ok = (iw > 0) & (ih > 0)
    inter = np.where(ok, iw * ih, 0.0)
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(ok, inter / union, 0.0)


def score_order(items: Sequence) -> list[int]:
    """Indices by descending score; equal scores keep input order."""
    return sorted(range(len(items)), key=lambda i: -items[i].score)


def nms(
    dets: Sequence[T],
    iou_threshold: float = 0.5,
    class_wise: bool = True,
    protected: Sequence[bool] | None = None,
) -> list[T]:
    """Greedy non-maximum suppression.

    ``dets`` may be any records with ``bbox``, ``score`` and ``category_id``.
    A box is dropped when it overlaps an already kept box (of the same class
    if ``class_wise``) with IoU above ``iou_threshold``. Entries flagged in
    ``protected`` are always kept and never dropped, though they still
    suppress others. Output is sorted by descending score.
    """
    if not dets:
        return []
    order = score_order(dets)
    ious = iou_matrix([d.bbox for d in dets], [d.bbox for d in dets])
    cats = np.array([d.category_id for d in dets])
    keep: list[int] = []
    for i in order:
        if protected is None or not protected[i]:
            if keep:
                k = np.array(keep)
                over = ious[i, k] > iou_threshold
                if class_wise:
                    over &= cats[k] == cats[i]
                if over.any():
                    continue
        keep.append(i)
    return [dets[i] for i in keep]


def greedy_match(preds: Sequence, gts: Sequence, iou_threshold: float, strict: bool = False) -> MatchResult:
    """Match predictions to ground truth in descending score order.

    Each prediction claims the unmatched GT with the highest IoU, provided the
    IoU is at least ``iou_threshold`` (strictly above it when ``strict``).
    Equal scores keep input order; equal IoUs go to the lower GT index.
    """
    result = MatchResult()
    if not preds:
        result.unmatched_gts = list(range(len(gts)))
        return result
    ious = iou_matrix([p.bbox for p in preds], [g.bbox for g in gts])
    taken = [False] * len(gts)
    for p in score_order(preds):
        best, best_iou = -1, -1.0
        for g in range(len(gts)):
            if taken[g]:
                continue
            v = ious[p, g]
            if v < iou_threshold or (strict and v == iou_threshold):
                continue
            if v > best_iou:
                best, best_iou = g, v
        if best < 0:
            result.unmatched_predictions.append(p)
        else:
            taken[best] = True
            result.pairs.append((p, best, float(best_iou)))
    result.unmatched_predictions.sort()
    result.unmatched_gts = [g for g in range(len(gts)) if not taken[g]]
    return result
