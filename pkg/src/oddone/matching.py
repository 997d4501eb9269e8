"""Bipartite assignment of queries to targets with set-prediction costs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import QueryOutput
from .exceptions import DimensionMismatch, NonFiniteCost, OddOneError
from .geometry import giou_matrix


@dataclass(frozen=True)
class CostWeights:
    w_cls: float = 2.0
    w_bbox: float = 5.0
    w_giou: float = 2.0

    def __post_init__(self):
        ws = (self.w_cls, self.w_bbox, self.w_giou)
        if any(w < 0 or not np.isfinite(w) for w in ws) or not any(w > 0 for w in ws):
            raise OddOneError("cost weights must be finite, non-negative and not all zero")


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]
    unmatched_queries: frozenset[int] = field(default_factory=frozenset)

    @property
    def query_index(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=int)

    @property
    def target_index(self) -> np.ndarray:
        return np.array([t for _, t in self.pairs], dtype=int)

    def total_cost(self, cost) -> float:
        cost = np.asarray(cost, dtype=float)
        return float(sum(cost[q, t] for q, t in self.pairs))


def cost_matrix(
    class_probs: np.ndarray,
    boxes: np.ndarray,
    target_boxes: np.ndarray,
    target_labels: np.ndarray,
    weights: CostWeights = CostWeights(),
) -> np.ndarray:
    """Array form of :func:`pairwise_cost`.

    ``target_labels`` holds a class index for ground-truth targets and ``-1``
    for pseudo-label targets, whose classification term is zero.
    """
    class_probs = np.asarray(class_probs, dtype=float)
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    target_boxes = np.asarray(target_boxes, dtype=float).reshape(-1, 4)
    target_labels = np.asarray(target_labels, dtype=int).ravel()
    if class_probs.shape[0] != boxes.shape[0] or target_boxes.shape[0] != target_labels.size:
        raise DimensionMismatch("query or target arrays disagree in length")
    if np.any(target_labels >= class_probs.shape[1]):
        raise DimensionMismatch("target label outside the class-probability vector")
    is_gt = target_labels >= 0
    cls = np.zeros((boxes.shape[0], target_labels.size))
    cls[:, is_gt] = 1.0 - class_probs[:, target_labels[is_gt]]
    l1 = np.abs(boxes[:, None, :] - target_boxes[None, :, :]).sum(axis=-1)
    return (
        weights.w_cls * cls
        + weights.w_bbox * l1
        + weights.w_giou * (1.0 - giou_matrix(boxes, target_boxes))
    )


def pairwise_cost(queries: Sequence[QueryOutput], targets, weights: CostWeights = CostWeights()) -> np.ndarray:
    """Cost of assigning each query to each target of a :class:`~oddone.pseudo.TargetSet`."""
    if not queries:
        raise DimensionMismatch("no queries")
    probs = np.stack([q.class_probs for q in queries])
    boxes = np.stack([q.box.as_array() for q in queries])
    return cost_matrix(probs, boxes, targets.boxes, targets.labels, weights)


def _assign_rows(cost: np.ndarray) -> np.ndarray:
    """Shortest augmenting path Hungarian method for ``n <= m``.

    Returns the column assigned to each row. Potentials ``u``/``v`` keep the
    reduced costs non-negative; each row is inserted by a Dijkstra-like scan
    over the columns.
    """
    n, m = cost.shape
    c = np.zeros((n + 1, m + 1))
    c[1:, 1:] = cost
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # row (1-based) holding each column, 0 if free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            reduced = c[i0] - u[i0] - v
            better = free & (reduced < minv)
            minv[better] = reduced[better]
            way[better] = j0
            candidates = np.where(free, minv, np.inf)
            j1 = int(np.argmin(candidates))
            delta = candidates[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    rows = np.full(n, -1, dtype=int)
    for j in range(1, m + 1):
        if owner[j]:
            rows[owner[j] - 1] = j - 1
    return rows


def hungarian(cost) -> MatchResult:
    """Minimum-cost matching of rows (queries) to columns (targets).

    Rectangular matrices are solved over the smaller side, which is the same
    optimum as padding the larger side with zero-cost dummies.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise DimensionMismatch("cost must be a 2-D matrix")
    if not np.all(np.isfinite(cost)):
        raise NonFiniteCost("cost matrix contains non-finite entries")
    n_q, n_t = cost.shape
    if n_q == 0 or n_t == 0:
        return MatchResult((), frozenset(range(n_q)))
    if n_q <= n_t:
        cols = _assign_rows(cost)
        pairs = tuple((q, int(t)) for q, t in enumerate(cols))
    else:
        rows = _assign_rows(cost.T)
        pairs = tuple(sorted((int(q), t) for t, q in enumerate(rows)))
    matched = {q for q, _ in pairs}
    return MatchResult(pairs, frozenset(set(range(n_q)) - matched))
