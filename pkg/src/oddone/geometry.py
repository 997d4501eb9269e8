"""Box overlap measures and greedy non-maximum suppression.

Scalar functions take :class:`~oddone.core.BBox`; the ``*_matrix`` variants take
``(N, 4)`` corner arrays and return ``(N, M)`` pairwise tables.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import BBox
from .exceptions import OddOneError


def _inter_union_hull(a: BBox, b: BBox) -> tuple[float, float, float]:
    iw = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    ih = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = iw * ih
    union = a.area + b.area - inter
    hull = (max(a.x_max, b.x_max) - min(a.x_min, b.x_min)) * (
        max(a.y_max, b.y_max) - min(a.y_min, b.y_min)
    )
    return inter, union, hull


def iou(a: BBox, b: BBox) -> float:
    inter, union, _ = _inter_union_hull(a, b)
    return inter / union


def giou(a: BBox, b: BBox) -> float:
    inter, union, hull = _inter_union_hull(a, b)
    return inter / union - (hull - union) / hull


def _pairwise_terms(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return a, b, inter, union


def iou_matrix(a, b) -> np.ndarray:
    _, _, inter, union = _pairwise_terms(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = inter / union
    return np.nan_to_num(out, nan=0.0)


def giou_matrix(a, b) -> np.ndarray:
    a, b, inter, union = _pairwise_terms(a, b)
    lt = np.minimum(a[:, None, :2], b[None, :, :2])
    rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh = rb - lt
    hull = wh[..., 0] * wh[..., 1]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = inter / union - (hull - union) / hull
    return np.nan_to_num(out, nan=0.0)


def priority_order(scores) -> np.ndarray:
    """Indices by descending score; equal scores keep input order."""
    scores = np.asarray(scores, dtype=float)
    return np.lexsort((np.arange(scores.size), -scores))


def greedy_nms(boxes: Sequence[BBox] | np.ndarray, scores, iou_thr: float) -> list[int]:
    """Classic greedy NMS.

    Boxes are visited by descending score (ties: lower index first) and a box
    is kept iff its IoU with every already kept box is below ``iou_thr``.
    Returns kept indices in visiting order.
    """
    if not 0.0 < iou_thr <= 1.0:
        raise OddOneError("iou_thr must lie in (0, 1]")
    arr = _as_corner_array(boxes)
    scores = np.asarray(scores, dtype=float)
    if arr.shape[0] != scores.size:
        raise OddOneError("boxes and scores differ in length")
    if scores.size == 0:
        return []
    overlaps = iou_matrix(arr, arr)
    kept: list[int] = []
    for i in priority_order(scores):
        if not kept or overlaps[i, kept].max() < iou_thr:
            kept.append(int(i))
    return kept


def _as_corner_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(float)
    return np.array([b.as_list() for b in boxes], dtype=float).reshape(-1, 4)
