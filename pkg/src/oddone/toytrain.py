"""Trainable detection heads over query features.

Three affine heads read each query feature: a per-class head (independent
sigmoids), a superclass head (softmax over the superclasses plus the reserved
unknown slot) and a box head (four sigmoid outputs paired into corners).
Training minimises the matched set loss with plain mini-batch SGD using
hand-derived gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import BBox, QueryOutput
from .exceptions import ConfigError, DegenerateBatch, DimensionMismatch, InconsistentMatch, OddOneError
from .matching import CostWeights, MatchResult, cost_matrix, hungarian
from .pseudo import TargetSet

logger = logging.getLogger(__name__)

PARAM_NAMES = ("W_cls", "b_cls", "W_sup", "b_sup", "W_box", "b_box")
BOX_PARAMS = ("W_box", "b_box")
MIN_EXTENT = 1e-6


@dataclass
class HeadModel:
    W_cls: np.ndarray
    b_cls: np.ndarray
    W_sup: np.ndarray
    b_sup: np.ndarray
    W_box: np.ndarray
    b_box: np.ndarray
    n_query: int = 100

    def __post_init__(self):
        d = self.W_cls.shape[0]
        if self.W_sup.shape[0] != d or self.W_box.shape != (d, 4) or self.b_box.shape != (4,):
            raise DimensionMismatch("head weight shapes disagree")
        if self.b_cls.shape != (self.W_cls.shape[1],) or self.b_sup.shape != (self.W_sup.shape[1],):
            raise DimensionMismatch("bias shapes disagree with weights")
        if not all(np.all(np.isfinite(p)) for p in self.params().values()):
            raise OddOneError("non-finite head weights")

    @classmethod
    def init(cls, feature_dim, n_classes, n_superclasses, n_query=100, seed=0, scale=0.01,
             box_readout=False, class_prior=0.01) -> "HeadModel":
        """Small random weights; the box head starts at a centred box.

        ``class_prior`` sets the initial per-class probability through the
        class bias, the usual start for focal-loss heads. With
        ``box_readout`` the last four feature columns are taken to be logit
        box corners and the box head starts as their identity readout.
        """
        rng = np.random.default_rng(seed)
        W_box = scale * rng.normal(size=(feature_dim, 4))
        b_box = np.array([-1.0, -1.0, 1.0, 1.0])
        if box_readout:
            W_box[-4:] += np.eye(4)
            b_box = np.zeros(4)
        return cls(
            W_cls=scale * rng.normal(size=(feature_dim, n_classes)),
            b_cls=np.full(n_classes, np.log(class_prior) - np.log1p(-class_prior)),
            W_sup=scale * rng.normal(size=(feature_dim, n_superclasses)),
            b_sup=np.zeros(n_superclasses),
            W_box=W_box,
            b_box=b_box,
            n_query=n_query,
        )

    @property
    def feature_dim(self) -> int:
        return self.W_cls.shape[0]

    @property
    def n_classes(self) -> int:
        return self.W_cls.shape[1]

    @property
    def n_superclasses(self) -> int:
        return self.W_sup.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "HeadModel":
        return replace(self, **{n: p.copy() for n, p in self.params().items()})

    def to_dict(self) -> dict:
        d = {n: p.tolist() for n, p in self.params().items()}
        d.update(feature_dim=self.feature_dim, n_query=self.n_query)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HeadModel":
        return cls(n_query=int(d["n_query"]), **{n: np.asarray(d[n], dtype=float) for n in PARAM_NAMES})


@dataclass(frozen=True)
class LossWeights:
    w_bbox: float = 5.0
    w_giou: float = 2.0
    w_cls: float = 2.0
    w_sup: float = 2.0

    def __post_init__(self):
        for w in (self.w_bbox, self.w_giou, self.w_cls, self.w_sup):
            if not np.isfinite(w) or w < 0:
                raise ConfigError("loss weights must be finite and non-negative")

    def cost_weights(self) -> CostWeights:
        return CostWeights(w_cls=self.w_cls, w_bbox=self.w_bbox, w_giou=self.w_giou)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    learning_rate: float = 0.3
    lr_drop_epoch: int | None = 30
    batch_size: int = 8
    seed: int = 0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    box_lr_scale: float = 0.01
    no_object: bool | None = None

    def __post_init__(self):
        if not self.box_lr_scale >= 0 or not np.isfinite(self.box_lr_scale):
            raise ConfigError("box_lr_scale must be finite and non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if not self.learning_rate >= 0 or not np.isfinite(self.learning_rate):
            raise ConfigError("learning rate must be finite and non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")

    def lr_at(self, epoch: int) -> float:
        if self.lr_drop_epoch is not None and epoch >= self.lr_drop_epoch:
            return self.learning_rate * 0.1
        return self.learning_rate


# -- forward -----------------------------------------------------------------


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(eq=False)
class HeadOutputs:
    """Raw and activated head outputs for a stack of queries."""

    features: np.ndarray
    cls_logits: np.ndarray
    sup_logits: np.ndarray
    box_raw: np.ndarray

    @property
    def class_probs(self) -> np.ndarray:
        return _sigmoid(self.cls_logits)

    @property
    def superclass_probs(self) -> np.ndarray:
        return _softmax(self.sup_logits)

    @property
    def boxes(self) -> np.ndarray:
        return corners(self.box_raw)


def corners(raw: np.ndarray) -> np.ndarray:
    """Pair ``(a, b, c, d)`` into ``(min(a,c), min(b,d), max(a,c), max(b,d))``."""
    return np.concatenate(
        [np.minimum(raw[..., 0:2], raw[..., 2:4]), np.maximum(raw[..., 0:2], raw[..., 2:4])], axis=-1
    )


def forward_arrays(model: HeadModel, features) -> HeadOutputs:
    f = np.asarray(features, dtype=float)
    if f.shape[-1] != model.feature_dim:
        raise DimensionMismatch(f"features have dim {f.shape[-1]}, model expects {model.feature_dim}")
    return HeadOutputs(
        features=f,
        cls_logits=f @ model.W_cls + model.b_cls,
        sup_logits=f @ model.W_sup + model.b_sup,
        box_raw=_sigmoid(f @ model.W_box + model.b_box),
    )


def _safe_box(row) -> BBox:
    x1, y1, x2, y2 = (float(v) for v in row)
    if x2 - x1 < MIN_EXTENT:
        x1, x2 = x1 - MIN_EXTENT / 2, x2 + MIN_EXTENT / 2
    if y2 - y1 < MIN_EXTENT:
        y1, y2 = y1 - MIN_EXTENT / 2, y2 + MIN_EXTENT / 2
    return BBox(x1, y1, x2, y2)


def forward(model: HeadModel, features) -> list[QueryOutput]:
    """Decode one image's query features into :class:`QueryOutput` objects."""
    out = forward_arrays(model, np.atleast_2d(features))
    return [
        QueryOutput(cp, sp, _safe_box(b))
        for cp, sp, b in zip(out.class_probs, out.superclass_probs, out.boxes)
    ]


# -- loss --------------------------------------------------------------------


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def focal_binary(logits, targets, alpha=0.25, gamma=2.0):
    """Sigmoid focal loss per entry and its derivative w.r.t. the logits."""
    sign = np.where(targets > 0.5, 1.0, -1.0)
    z = sign * logits
    log_pt = _log_sigmoid(z)
    pt = np.exp(log_pt)
    a = np.where(targets > 0.5, alpha, 1.0 - alpha)
    one_m = 1.0 - pt
    loss = -a * one_m**gamma * log_pt
    grad = -sign * a * one_m**gamma * (one_m - gamma * pt * log_pt)
    return loss, grad


def focal_categorical(logits, target_index, alpha=0.25, gamma=2.0):
    """Softmax focal loss per row and its derivative w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    rows = np.arange(logits.shape[0])
    log_pk = log_p[rows, target_index]
    pk = p[rows, target_index]
    one_m = 1.0 - pk
    loss = -alpha * one_m**gamma * log_pk
    with np.errstate(divide="ignore", invalid="ignore"):
        lower = np.where(one_m > 0, one_m ** (gamma - 1.0), 0.0) if gamma < 1 else one_m ** (gamma - 1.0)
    coef = -alpha * (one_m**gamma - gamma * lower * pk * log_pk)
    onehot = np.zeros_like(p)
    onehot[rows, target_index] = 1.0
    grad = coef[:, None] * (onehot - p)
    return loss, grad


def _giou_and_grad(pred: np.ndarray, tgt: np.ndarray):
    """Row-wise GIoU of predicted vs target corner boxes and d giou / d pred."""
    px1, py1, px2, py2 = pred.T
    tx1, ty1, tx2, ty2 = tgt.T
    pw, ph = px2 - px1, py2 - py1
    area_p = pw * ph
    area_t = (tx2 - tx1) * (ty2 - ty1)
    iw_raw = np.minimum(px2, tx2) - np.maximum(px1, tx1)
    ih_raw = np.minimum(py2, ty2) - np.maximum(py1, ty1)
    iw, ih = np.clip(iw_raw, 0, None), np.clip(ih_raw, 0, None)
    inter = iw * ih
    union = area_p + area_t - inter
    hw = np.maximum(px2, tx2) - np.minimum(px1, tx1)
    hh = np.maximum(py2, ty2) - np.minimum(py1, ty1)
    hull = hw * hh
    giou = inter / union - (hull - union) / hull

    on_x, on_y = iw_raw > 0, ih_raw > 0
    zero = np.zeros_like(px1)

    def f(mask):
        return mask.astype(float)

    d_iw = np.stack([-f(on_x & (px1 > tx1)), zero, f(on_x & (px2 < tx2)), zero], 1)
    d_ih = np.stack([zero, -f(on_y & (py1 > ty1)), zero, f(on_y & (py2 < ty2))], 1)
    d_inter = d_iw * ih[:, None] + d_ih * iw[:, None]
    d_area = np.stack([-ph, -pw, ph, pw], 1)
    d_hw = np.stack([-f(px1 < tx1), zero, f(px2 > tx2), zero], 1)
    d_hh = np.stack([zero, -f(py1 < ty1), zero, f(py2 > ty2)], 1)
    d_hull = d_hw * hh[:, None] + d_hh * hw[:, None]
    d_union = d_area - d_inter
    u, h = union[:, None], hull[:, None]
    grad = d_inter / u - inter[:, None] * d_union / u**2 + d_union / h - union[:, None] * d_hull / h**2
    return giou, grad


def _corner_grad_to_raw(raw: np.ndarray, d_corners: np.ndarray) -> np.ndarray:
    """Route gradients of (min, max) corners back to the paired raw outputs."""
    d_raw = np.zeros_like(raw)
    first_is_min = raw[:, 0:2] <= raw[:, 2:4]
    d_raw[:, 0:2] = np.where(first_is_min, d_corners[:, 0:2], d_corners[:, 2:4])
    d_raw[:, 2:4] = np.where(first_is_min, d_corners[:, 2:4], d_corners[:, 0:2])
    return d_raw


@dataclass
class LossResult:
    total: float
    terms: dict[str, float]
    raw_terms: dict[str, float]
    grads: dict[str, np.ndarray] | None = None


TERMS = ("bbox", "giou", "cls", "sup")


def _image_terms(out: HeadOutputs, match: MatchResult, targets: TargetSet, assignment, alpha, gamma, superclass,
                 no_object=None):
    """Unnormalised loss sums of one image and the gradients w.r.t. head outputs."""
    n_q = out.cls_logits.shape[0]
    n_t = len(targets)
    q_idx, t_idx = match.query_index, match.target_index
    if len(set(q_idx.tolist())) != q_idx.size or len(set(t_idx.tolist())) != t_idx.size:
        raise InconsistentMatch("a query or target is matched twice")
    if q_idx.size and (q_idx.max() >= n_q or t_idx.max() >= n_t):
        raise InconsistentMatch("match indices outside the query or target range")
    if q_idx.size != min(n_q, n_t):
        raise InconsistentMatch("match is not maximal for these targets")
    labels = targets.labels
    tboxes = targets.boxes
    sums = dict.fromkeys(TERMS, 0.0)
    g_cls = np.zeros_like(out.cls_logits)
    g_sup = np.zeros_like(out.sup_logits)
    g_box = np.zeros_like(out.box_raw)

    if q_idx.size:
        pred = corners(out.box_raw[q_idx])
        tgt = tboxes[t_idx]
        diff = pred - tgt
        sums["bbox"] = float(np.abs(diff).sum())
        giou, d_giou = _giou_and_grad(pred, tgt)
        sums["giou"] = float((1.0 - giou).sum())
        d_corners = {"bbox": np.sign(diff), "giou": -d_giou}
    else:
        d_corners = None

    known = labels[t_idx] >= 0 if q_idx.size else np.zeros(0, bool)
    kq = q_idx[known]
    kl = labels[t_idx[known]]
    matched = np.zeros(n_q, bool)
    matched[q_idx] = True
    unmatched = np.flatnonzero(~matched)

    if no_object is None:
        no_object = not superclass
    if not no_object:
        cls_rows = kq
        cls_targets = np.zeros((kq.size, out.cls_logits.shape[1]))
        cls_targets[np.arange(kq.size), kl] = 1.0
    else:
        cls_rows = np.concatenate([kq, unmatched])
        cls_targets = np.zeros((cls_rows.size, out.cls_logits.shape[1]))
        cls_targets[np.arange(kq.size), kl] = 1.0
    if cls_rows.size:
        l, g = focal_binary(out.cls_logits[cls_rows], cls_targets, alpha, gamma)
        sums["cls"] = float(l.sum())
        g_cls[cls_rows] += g

    if superclass:
        sup_rows = np.concatenate([kq, unmatched])
        unknown_slot = out.sup_logits.shape[1] - 1
        sup_t = np.concatenate([assignment[kl], np.full(unmatched.size, unknown_slot)]).astype(int)
        if sup_rows.size:
            l, g = focal_categorical(out.sup_logits[sup_rows], sup_t, alpha, gamma)
            sums["sup"] = float(l.sum())
            g_sup[sup_rows] += g
    return sums, g_cls, g_sup, d_corners, q_idx


def batch_loss(
    model: HeadModel,
    features: Sequence[np.ndarray],
    matches: Sequence[MatchResult],
    targets: Sequence[TargetSet],
    assignment: np.ndarray,
    weights: LossWeights = LossWeights(),
    alpha: float = 0.25,
    gamma: float = 2.0,
    superclass: bool = True,
    with_grad: bool = True,
    no_object: bool | None = None,
) -> LossResult:
    """Matched set loss over a batch of images, normalised by the target count.

    Localisation terms cover every matched pair (ground truth and pseudo).
    The per-class focal term covers queries matched to ground truth; the
    superclass focal term additionally pushes unmatched queries to the
    reserved unknown slot. With ``superclass=False`` the superclass term is
    dropped. ``no_object`` gives unmatched queries all-zero class targets;
    it defaults to ``not superclass``. Queries matched to pseudo-labels get
    no classification loss.
    """
    if not (len(features) == len(matches) == len(targets)):
        raise DimensionMismatch("features, matches and targets differ in length")
    n_targets = max(1, sum(len(t) for t in targets))
    wmap = {"bbox": weights.w_bbox, "giou": weights.w_giou, "cls": weights.w_cls, "sup": weights.w_sup}
    sums = dict.fromkeys(TERMS, 0.0)
    grads = {n: np.zeros_like(p) for n, p in model.params().items()} if with_grad else None
    assignment = np.asarray(assignment, dtype=int)
    for f, m, t in zip(features, matches, targets):
        out = forward_arrays(model, f)
        s, g_cls, g_sup, d_corners, q_idx = _image_terms(out, m, t, assignment, alpha, gamma, superclass, no_object)
        for k in TERMS:
            sums[k] += s[k]
        if not with_grad:
            continue
        g_box_raw = np.zeros_like(out.box_raw)
        if d_corners is not None:
            dc = weights.w_bbox * d_corners["bbox"] + weights.w_giou * d_corners["giou"]
            g_box_raw[q_idx] = _corner_grad_to_raw(out.box_raw[q_idx], dc)
        g_box = g_box_raw * out.box_raw * (1.0 - out.box_raw)
        g_cls = weights.w_cls * g_cls
        g_sup = weights.w_sup * g_sup if superclass else np.zeros_like(g_sup)
        grads["W_cls"] += f.T @ g_cls
        grads["b_cls"] += g_cls.sum(axis=0)
        grads["W_sup"] += f.T @ g_sup
        grads["b_sup"] += g_sup.sum(axis=0)
        grads["W_box"] += f.T @ g_box
        grads["b_box"] += g_box.sum(axis=0)
    raw = {k: v / n_targets for k, v in sums.items()}
    if not superclass:
        raw["sup"] = 0.0
    terms = {k: wmap[k] * raw[k] for k in TERMS}
    if grads is not None:
        for k in grads:
            grads[k] /= n_targets
    return LossResult(total=float(sum(terms.values())), terms=terms, raw_terms=raw, grads=grads)


def loss(outputs, match: MatchResult, targets: TargetSet, weights: LossWeights = LossWeights(),
         alpha: float = 0.25, gamma: float = 2.0, assignment=None, superclass: bool = True,
         no_object: bool | None = None) -> LossResult:
    """Loss of a single image from already computed head outputs (no gradients).

    ``outputs`` is a :class:`HeadOutputs` or a list of :class:`QueryOutput`;
    for the latter the logits are recovered from the probabilities.
    """
    if not isinstance(outputs, HeadOutputs):
        outputs = _outputs_from_queries(outputs)
    if assignment is None:
        raise ConfigError("assignment (class -> superclass indices) is required")
    s, *_ = _image_terms(outputs, match, targets, np.asarray(assignment, dtype=int), alpha, gamma, superclass,
                         no_object)
    n_targets = max(1, len(targets))
    raw = {k: v / n_targets for k, v in s.items()}
    if not superclass:
        raw["sup"] = 0.0
    wmap = {"bbox": weights.w_bbox, "giou": weights.w_giou, "cls": weights.w_cls, "sup": weights.w_sup}
    terms = {k: wmap[k] * raw[k] for k in TERMS}
    return LossResult(total=float(sum(terms.values())), terms=terms, raw_terms=raw)


def _outputs_from_queries(queries: Sequence[QueryOutput]) -> HeadOutputs:
    with np.errstate(divide="ignore"):
        cp = np.clip(np.stack([q.class_probs for q in queries]), 1e-300, 1 - 1e-16)
        sp = np.clip(np.stack([q.superclass_probs for q in queries]), 1e-300, 1.0)
        boxes = np.stack([q.box.as_array() for q in queries])
    return HeadOutputs(
        features=np.zeros((len(queries), 0)),
        cls_logits=np.log(cp) - np.log1p(-cp),
        sup_logits=np.log(sp),
        box_raw=boxes,
    )


# -- gradient check ----------------------------------------------------------


@dataclass
class Batch:
    features: list[np.ndarray]
    targets: list[TargetSet]
    assignment: np.ndarray
    matches: list[MatchResult] | None = None


def match_batch(model: HeadModel, batch: Batch, weights: LossWeights = LossWeights()) -> list[MatchResult]:
    cw = weights.cost_weights()
    out = []
    for f, t in zip(batch.features, batch.targets):
        o = forward_arrays(model, f)
        out.append(hungarian(cost_matrix(o.class_probs, o.boxes, t.boxes, t.labels, cw)))
    return out


def _check_nondegenerate(model: HeadModel, batch: Batch, eps: float):
    for f, m, t in zip(batch.features, batch.matches, batch.targets):
        o = forward_arrays(model, f)
        raw = o.box_raw[m.query_index]
        if raw.size and np.min(np.abs(raw[:, 0:2] - raw[:, 2:4])) < 100 * eps:
            raise DegenerateBatch("a matched box has near-zero extent")
        if m.pairs:
            pred, tgt = corners(raw), t.boxes[m.target_index]
            if np.min(np.abs(pred - tgt)) < 100 * eps:
                raise DegenerateBatch("a matched box edge coincides with its target edge")
            kink = np.concatenate([pred[:, [0, 1]] - tgt[:, [2, 3]], pred[:, [2, 3]] - tgt[:, [0, 1]]], axis=1)
            if np.min(np.abs(kink)) < 100 * eps:
                raise DegenerateBatch("a matched box touches its target boundary")


def grad_check(
    model: HeadModel,
    batch: Batch,
    eps: float = 1e-5,
    weights: LossWeights = LossWeights(),
    alpha: float = 0.25,
    gamma: float = 2.0,
    superclass: bool = True,
    gradient_fn: Callable[[HeadModel, Batch], dict[str, np.ndarray]] | None = None,
) -> float:
    """Max relative error between analytic and central finite-difference gradients.

    The matching is frozen at ``model``. ``gradient_fn`` can replace the
    analytic gradient (used for negative controls).
    """
    if batch.matches is None:
        batch = replace(batch, matches=match_batch(model, batch, weights))
    _check_nondegenerate(model, batch, eps)

    def value(m: HeadModel) -> float:
        return batch_loss(m, batch.features, batch.matches, batch.targets, batch.assignment,
                          weights, alpha, gamma, superclass, with_grad=False).total

    if gradient_fn is None:
        analytic = batch_loss(model, batch.features, batch.matches, batch.targets, batch.assignment,
                              weights, alpha, gamma, superclass).grads
    else:
        analytic = gradient_fn(model, batch)
    worst = 0.0
    probe = model.copy()
    for name, param in probe.params().items():
        g_a = analytic[name]
        for idx in np.ndindex(param.shape):
            orig = param[idx]
            param[idx] = orig + eps
            up = value(probe)
            param[idx] = orig - eps
            down = value(probe)
            param[idx] = orig
            g_fd = (up - down) / (2 * eps)
            err = abs(g_a[idx] - g_fd) / max(1e-8, abs(g_a[idx]) + abs(g_fd))
            worst = max(worst, err)
    return worst


# -- SGD ---------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    learning_rate: float
    total: float
    terms: dict[str, float]
    n_gt: int
    n_pseudo: int

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "learning_rate": self.learning_rate,
            "total": self.total,
            "terms": dict(self.terms),
            "n_gt": self.n_gt,
            "n_pseudo": self.n_pseudo,
        }


def sgd_fit(
    model: HeadModel,
    features: Sequence[np.ndarray],
    targets: Sequence[TargetSet],
    assignment: np.ndarray,
    config: TrainConfig = TrainConfig(),
    superclass: bool = True,
) -> list[EpochLog]:
    """Train ``model`` in place; re-matches every batch at the current weights."""
    if len(features) != len(targets):
        raise DimensionMismatch("features and targets differ in length")
    rng = np.random.default_rng(config.seed)
    weights = config.loss_weights
    cw = weights.cost_weights()
    n = len(features)
    n_gt = sum(t.n_gt for t in targets)
    n_pseudo = sum(len(t.pseudo) for t in targets)
    log: list[EpochLog] = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        totals = dict.fromkeys(TERMS, 0.0)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            feats = [features[i] for i in idx]
            tgts = [targets[i] for i in idx]
            matches = []
            for f, t in zip(feats, tgts):
                o = forward_arrays(model, f)
                matches.append(hungarian(cost_matrix(o.class_probs, o.boxes, t.boxes, t.labels, cw)))
            res = batch_loss(model, feats, matches, tgts, assignment, weights,
                             config.focal_alpha, config.focal_gamma, superclass,
                             no_object=config.no_object)
            share = len(idx) / n
            total += res.total * share
            for k in TERMS:
                totals[k] += res.terms[k] * share
            if lr > 0:
                for name, p in model.params().items():
                    p -= (lr * config.box_lr_scale if name in BOX_PARAMS else lr) * res.grads[name]
        log.append(EpochLog(epoch, lr, total, totals, n_gt, n_pseudo))
        logger.debug("epoch %d lr %.4g loss %.5f", epoch, lr, total)
    return log


# -- task training -----------------------------------------------------------


def build_targets(
    scenes,
    label_classes: Sequence[str],
    world_classes: Sequence[str],
    pseudo=None,
    seed: int = 0,
    read_classes: Sequence[str] | None = None,
) -> list[TargetSet]:
    """Ground truth per scene, merged with simulated pseudo-labels.

    Labels are positions in ``label_classes``. Only annotations of
    ``read_classes`` (default: all of ``label_classes``) are read. ``pseudo``
    is a :class:`~oddone.pseudo.PseudoConfig`; ``None`` or disabled gives GT
    only.
    """
    from .pseudo import merge_pseudo, scene_seed, simulate_proposals

    read = list(label_classes if read_classes is None else read_classes)
    relabel = [list(label_classes).index(c) for c in read]
    out = []
    for s in scenes:
        gt = [(b, relabel[c]) for b, c in s.annotations(read, world_classes)]
        if pseudo is None or not pseudo.enabled:
            out.append(TargetSet(gt=tuple(gt)))
            continue
        props = simulate_proposals(s, pseudo.noise_model, scene_seed(seed, s.image_id))
        out.append(merge_pseudo(gt, props, pseudo.conf_thr, pseudo.iou_thr, pseudo.cap))
    return out


def train_task(
    dataset,
    task,
    config: TrainConfig = TrainConfig(),
    pseudo=None,
    superclass: bool = True,
    model: HeadModel | None = None,
) -> tuple[HeadModel, list[EpochLog]]:
    """Train heads on the task's current-known annotations of the training split.

    ``pseudo`` is a :class:`~oddone.pseudo.PseudoConfig` (or ``None``);
    ``superclass=False`` drops the superclass term. Pass ``model`` to continue
    training existing heads.
    """
    smap = task.superclass_map
    current = [c for c in smap.classes if c in task.current_known]
    if not current:
        raise ConfigError(f"task {task.task_id} introduces no classes")
    targets = build_targets(dataset.train, smap.classes, dataset.classes, pseudo, config.seed, read_classes=current)
    feats = [s.query_features for s in dataset.train]
    if model is None:
        model = HeadModel.init(feats[0].shape[1], smap.n_classes, smap.n_superclasses,
                               n_query=feats[0].shape[0], seed=config.seed, box_readout=True)
    log = sgd_fit(model, feats, targets, smap.assignment_array, config, superclass)
    return model, log
