"""Estimator interface around the trainable heads and the unknown decision rule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import Detection, SuperclassMap
from .exceptions import ConfigError, DimensionMismatch, EmptyCalibrationSet
from .matching import cost_matrix, hungarian
from .pseudo import TargetSet
from .scoring import UnknownVariant, calibrate_threshold, decide_batch, recalibrate_batch, unknown_scores_batch
from .toytrain import HeadModel, LossWeights, TrainConfig, _safe_box, forward_arrays, sgd_fit


def check_query_features(X, n_features: int | None = None) -> np.ndarray:
    """Validate ``X`` as a finite ``(n_images, n_query, n_features)`` float array."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise DimensionMismatch(f"expected a 3-D array of query features, got {X.ndim}-D")
    if n_features is not None and X.shape[2] != n_features:
        raise DimensionMismatch(f"expected {n_features} features per query, got {X.shape[2]}")
    return X


def check_targets(y, n_images: int, n_classes: int) -> list[TargetSet]:
    y = list(y)
    if len(y) != n_images:
        raise DimensionMismatch(f"{n_images} images but {len(y)} target sets")
    for t in y:
        if not isinstance(t, TargetSet):
            raise TypeError("targets must be TargetSet instances")
        if t.n_gt and (t.labels[: t.n_gt].min() < 0 or t.labels[: t.n_gt].max() >= n_classes):
            raise DimensionMismatch("target label outside the known classes")
    return y


class OddOneOutDetector(BaseEstimator):
    """Query-feature detector that flags objects foreign to every known superclass.

    ``fit`` trains the class, superclass and box heads on matched targets and
    then calibrates the unknown threshold on a seeded subset of the training
    images. ``predict`` turns every query into one :class:`Detection`; label
    ``K`` (the number of known classes) means unknown.

    With ``use_superclass=False`` the superclass loss is dropped and the
    unknown score falls back to ``1 - max(class_probs)``.
    """

    def __init__(
        self,
        superclass_map: SuperclassMap | None = None,
        use_superclass: bool = True,
        no_object: bool | None = None,
        unknown_variant: str = "sum-recal-thr",
        target_known_fraction: float = 0.95,
        calibration_fraction: float = 0.1,
        epochs: int = 40,
        learning_rate: float = 0.3,
        box_lr_scale: float = 0.01,
        lr_drop_epoch: int | None = 30,
        batch_size: int = 8,
        focal_alpha: float = 0.25,
        focal_gamma: float = 2.0,
        w_bbox: float = 5.0,
        w_giou: float = 2.0,
        w_cls: float = 2.0,
        w_sup: float = 2.0,
        init_scale: float = 0.01,
        box_readout: bool = True,
        class_prior: float = 0.01,
        warm_start: bool = False,
        random_state: int = 0,
    ):
        self.superclass_map = superclass_map
        self.use_superclass = use_superclass
        self.no_object = no_object
        self.unknown_variant = unknown_variant
        self.target_known_fraction = target_known_fraction
        self.calibration_fraction = calibration_fraction
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.box_lr_scale = box_lr_scale
        self.lr_drop_epoch = lr_drop_epoch
        self.batch_size = batch_size
        self.focal_alpha = focal_alpha
        self.focal_gamma = focal_gamma
        self.w_bbox = w_bbox
        self.w_giou = w_giou
        self.w_cls = w_cls
        self.w_sup = w_sup
        self.init_scale = init_scale
        self.box_readout = box_readout
        self.class_prior = class_prior
        self.warm_start = warm_start
        self.random_state = random_state

    # -- configuration ---------------------------------------------------

    def _smap(self) -> SuperclassMap:
        if self.superclass_map is None:
            raise ConfigError("superclass_map is required")
        return self.superclass_map

    def _variant(self) -> UnknownVariant:
        return UnknownVariant.parse(self.unknown_variant)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_bbox, self.w_giou, self.w_cls, self.w_sup)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            box_lr_scale=self.box_lr_scale,
            no_object=self.no_object,
            lr_drop_epoch=self.lr_drop_epoch,
            batch_size=self.batch_size,
            seed=self.random_state,
            focal_alpha=self.focal_alpha,
            focal_gamma=self.focal_gamma,
            loss_weights=self.loss_weights(),
        )

    # -- fitting ---------------------------------------------------------

    def fit(self, X, y):
        smap = self._smap()
        if not 0.0 < self.target_known_fraction < 1.0:
            raise ConfigError("target_known_fraction must lie in (0, 1)")
        X = check_query_features(X)
        y = check_targets(y, X.shape[0], smap.n_classes)
        if not (self.warm_start and hasattr(self, "model_")):
            self.model_ = HeadModel.init(
                X.shape[2], smap.n_classes, smap.n_superclasses,
                n_query=X.shape[1], seed=self.random_state, scale=self.init_scale,
                box_readout=self.box_readout, class_prior=self.class_prior,
            )
        self.n_features_in_ = X.shape[2]
        self.train_log_ = sgd_fit(self.model_, list(X), y, smap.assignment_array,
                                  self.train_config(), self.use_superclass)
        n_cal = max(1, math.ceil(self.calibration_fraction * X.shape[0]))
        rng = np.random.default_rng(self.random_state)
        idx = np.sort(rng.choice(X.shape[0], size=min(n_cal, X.shape[0]), replace=False))
        self.calibrate(X[idx], [y[i] for i in idx])
        return self

    def known_instance_scores(self, X, y) -> np.ndarray:
        """Unknown scores of the queries matched to known ground truth."""
        check_is_fitted(self, "model_")
        X = check_query_features(X, self.n_features_in_)
        y = check_targets(y, X.shape[0], self._smap().n_classes)
        cw = self.loss_weights().cost_weights()
        out = []
        for feats, t in zip(X, y):
            if not t.n_gt:
                continue
            o = forward_arrays(self.model_, feats)
            gt = TargetSet(gt=t.gt)
            match = hungarian(cost_matrix(o.class_probs, o.boxes, gt.boxes, gt.labels, cw))
            _, u = self._scores(o)
            out.append(u[match.query_index])
        return np.concatenate(out) if out else np.zeros(0)

    def calibrate(self, X, y):
        """Set ``threshold_`` from the known instances of ``(X, y)``."""
        scores = self.known_instance_scores(X, y)
        if scores.size == 0:
            raise EmptyCalibrationSet("calibration images contain no known objects")
        self.threshold_ = calibrate_threshold(scores, self.target_known_fraction)
        return self

    # -- inference -------------------------------------------------------

    def _scores(self, o) -> tuple[np.ndarray, np.ndarray]:
        if not self.use_superclass:
            known = o.class_probs
            return known, 1.0 - known.max(axis=1)
        recal = recalibrate_batch(o.class_probs, o.superclass_probs, self._smap())
        return recal, unknown_scores_batch(recal, o.superclass_probs, self._variant())

    def score_queries(self, X) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per image: recalibrated known probabilities and unknown scores of every query."""
        check_is_fitted(self, "model_")
        X = check_query_features(X, self.n_features_in_)
        return [self._scores(forward_arrays(self.model_, f)) for f in X]

    def transform(self, X) -> np.ndarray:
        """``(n_images, n_query, K + 1)``: known-class scores with the unknown score last."""
        return np.stack([np.column_stack([k, u]) for k, u in self.score_queries(X)])

    def predict(self, X) -> list[list[Detection]]:
        check_is_fitted(self, ["model_", "threshold_"])
        X = check_query_features(X, self.n_features_in_)
        variant = self._variant() if self.use_superclass else UnknownVariant.SUM_RECAL_THRESHOLDED
        out = []
        for feats in X:
            o = forward_arrays(self.model_, feats)
            known, u = self._scores(o)
            labels, scores = decide_batch(known, u, self.threshold_, variant)
            out.append([
                Detection(_safe_box(b), int(l), float(s))
                for b, l, s in zip(o.boxes, labels, scores)
            ])
        return out


def predict_scenes(detector: OddOneOutDetector, scenes: Sequence) -> dict[int, list[Detection]]:
    X = np.stack([s.query_features for s in scenes])
    return {s.image_id: dets for s, dets in zip(scenes, detector.predict(X))}
