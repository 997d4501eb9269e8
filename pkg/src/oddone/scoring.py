"""Superclass recalibration, odd-one-out unknown scoring and the decision rule.

A query's known-class probability is recalibrated by the probability of the
superclass that owns the class; its unknown score is the clamped complement
of the summed recalibrated probabilities. Three alternative unknown scores
are kept for ablation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Detection, QueryOutput, RecalibratedScores, SuperclassMap
from .exceptions import DimensionMismatch, EmptyCalibrationSet, OddOneError


class UnknownVariant(enum.Enum):
    MSP_SUPER = "msp-super"
    MSP_RECAL = "msp-recal"
    SUM_RECAL = "sum-recal"
    SUM_RECAL_THRESHOLDED = "sum-recal-thr"

    @property
    def thresholded(self) -> bool:
        return self is UnknownVariant.SUM_RECAL_THRESHOLDED

    @classmethod
    def parse(cls, value) -> "UnknownVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            return cls[str(value).upper().replace("-", "_")]


DEFAULT_VARIANT = UnknownVariant.SUM_RECAL_THRESHOLDED


@dataclass(frozen=True)
class Threshold:
    tau: float
    target_known_fraction: float = 0.95
    calibration_size: int = 0

    def __post_init__(self):
        if not math.isfinite(self.tau):
            raise OddOneError("tau must be finite")
        if not 0.0 < self.target_known_fraction < 1.0:
            raise OddOneError("target_known_fraction must lie in (0, 1)")


def _check_dims(class_probs: np.ndarray, superclass_probs: np.ndarray, smap: SuperclassMap):
    if class_probs.shape[-1] != smap.n_classes:
        raise DimensionMismatch(
            f"{class_probs.shape[-1]} class probabilities for {smap.n_classes} classes"
        )
    if superclass_probs.shape[-1] != smap.n_superclasses:
        raise DimensionMismatch(
            f"{superclass_probs.shape[-1]} superclass probabilities for "
            f"{smap.n_superclasses} slots"
        )


def recalibrate_batch(class_probs, superclass_probs, smap: SuperclassMap) -> np.ndarray:
    """Vectorised recalibration for ``(N, K)`` / ``(N, S+1)`` arrays."""
    class_probs = np.asarray(class_probs, dtype=float)
    superclass_probs = np.asarray(superclass_probs, dtype=float)
    _check_dims(class_probs, superclass_probs, smap)
    return class_probs * superclass_probs[..., smap.assignment_array]


def recalibrate(query: QueryOutput, smap: SuperclassMap) -> RecalibratedScores:
    return RecalibratedScores(
        known_probs=recalibrate_batch(query.class_probs, query.superclass_probs, smap)
    )


def unknown_scores_batch(recal, superclass_probs, variant=DEFAULT_VARIANT) -> np.ndarray:
    """Unknown score per row. ``superclass_probs`` includes the reserved slot last."""
    variant = UnknownVariant.parse(variant)
    recal = np.asarray(recal, dtype=float)
    if variant is UnknownVariant.MSP_SUPER:
        u = 1.0 - np.asarray(superclass_probs, dtype=float)[..., :-1].max(axis=-1)
    elif variant is UnknownVariant.MSP_RECAL:
        u = 1.0 - recal.max(axis=-1)
    else:
        u = 1.0 - recal.sum(axis=-1)
    return np.clip(u, 0.0, 1.0)


def unknown_score(recal: RecalibratedScores, query: QueryOutput, variant=DEFAULT_VARIANT) -> float:
    return float(unknown_scores_batch(recal.known_probs, query.superclass_probs, variant))


def score_query(query: QueryOutput, smap: SuperclassMap, variant=DEFAULT_VARIANT) -> RecalibratedScores:
    recal = recalibrate(query, smap)
    return RecalibratedScores(recal.known_probs, unknown_score(recal, query, variant))


def nearest_rank_quantile(values: Sequence[float], level: float) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    rank = math.ceil(level * v.size - 1e-9)
    return float(v[min(max(rank, 1), v.size) - 1])


def calibrate_threshold(known_scores: Sequence[float], target: float = 0.95) -> Threshold:
    """Pick ``tau`` so at least ``target`` of known instances satisfy ``u <= tau``.

    ``tau`` is the nearest-rank quantile (1-based index ``ceil(target * n)``)
    of the sorted unknown scores of known instances.
    """
    scores = np.asarray(known_scores, dtype=float).ravel()
    if scores.size == 0:
        raise EmptyCalibrationSet("no known instances to calibrate on")
    if np.any((scores < 0) | (scores > 1)) or not np.all(np.isfinite(scores)):
        raise OddOneError("calibration scores must lie in [0, 1]")
    return Threshold(nearest_rank_quantile(scores, target), target, int(scores.size))


def decide_batch(
    known_probs,
    unknown,
    threshold: Threshold | None = None,
    variant=DEFAULT_VARIANT,
) -> tuple[np.ndarray, np.ndarray]:
    """Labels and scores for each query row.

    The thresholded variant flags a query unknown iff ``u > tau``. The
    other variants treat unknown as an extra competing class: unknown wins iff
    ``u`` exceeds the top known score. Label ``K`` denotes unknown.
    """
    variant = UnknownVariant.parse(variant)
    known_probs = np.atleast_2d(np.asarray(known_probs, dtype=float))
    unknown = np.atleast_1d(np.asarray(unknown, dtype=float))
    best = known_probs.argmax(axis=1)
    best_score = known_probs[np.arange(known_probs.shape[0]), best]
    if variant.thresholded:
        if threshold is None:
            raise OddOneError("the thresholded variant needs a calibrated threshold")
        is_unknown = unknown > threshold.tau
    else:
        is_unknown = unknown > best_score
    labels = np.where(is_unknown, known_probs.shape[1], best)
    scores = np.where(is_unknown, unknown, best_score)
    return labels, scores


def decide(
    query: QueryOutput,
    smap: SuperclassMap,
    threshold: Threshold | None,
    variant=DEFAULT_VARIANT,
) -> Detection:
    scored = score_query(query, smap, variant)
    labels, scores = decide_batch(scored.known_probs, scored.unknown_score, threshold, variant)
    return Detection(box=query.box, label=int(labels[0]), score=float(scores[0]))
