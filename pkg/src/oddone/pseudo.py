"""Geometric pseudo-labels: merging proposals with ground truth, and a proposal simulator.

The simulator stands in for a class-agnostic region proposal network. Its
presets mimic proposal sources of different quality; ``"normals"`` has the
highest object recall.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.stats import truncnorm

from .core import BBox
from .exceptions import InvalidNoiseParameters, OddOneError, ParseError
from .geometry import iou_matrix, priority_order

DEFAULT_CONF_THR = 0.5
DEFAULT_IOU_THR = 0.5
DEFAULT_CAP = 20


@dataclass(frozen=True)
class Proposal:
    box: BBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise OddOneError("proposal confidence must lie in [0, 1]")


@dataclass(frozen=True)
class TargetSet:
    """Ground-truth boxes with class labels plus class-agnostic pseudo boxes."""

    gt: tuple[tuple[BBox, int], ...] = ()
    pseudo: tuple[BBox, ...] = ()
    pseudo_confidence: tuple[float, ...] = ()

    @property
    def n_gt(self) -> int:
        return len(self.gt)

    def __len__(self) -> int:
        return len(self.gt) + len(self.pseudo)

    @property
    def boxes(self) -> np.ndarray:
        rows = [b.as_list() for b, _ in self.gt] + [b.as_list() for b in self.pseudo]
        return np.array(rows, dtype=float).reshape(-1, 4)

    @property
    def labels(self) -> np.ndarray:
        """Class index per target; ``-1`` marks pseudo-labels."""
        return np.array([c for _, c in self.gt] + [-1] * len(self.pseudo), dtype=int)


@dataclass(frozen=True)
class ConfidenceModel:
    """Truncated-Gaussian confidences for object, clutter and random proposals."""

    true_mean: float = 0.75
    true_sd: float = 0.15
    spurious_mean: float = 0.4
    spurious_sd: float = 0.15
    clutter_mean: float = 0.55
    clutter_sd: float = 0.15

    def sample(self, rng: np.random.Generator, n: int, spurious: bool, clutter: bool = False) -> np.ndarray:
        if clutter:
            mean, sd = self.clutter_mean, self.clutter_sd
        elif spurious:
            mean, sd = self.spurious_mean, self.spurious_sd
        else:
            mean, sd = self.true_mean, self.true_sd
        if n == 0:
            return np.zeros(0)
        if sd == 0:
            return np.full(n, float(np.clip(mean, 0.0, 1.0)))
        a, b = (0.0 - mean) / sd, (1.0 - mean) / sd
        return truncnorm.rvs(a, b, loc=mean, scale=sd, size=n, random_state=rng)


@dataclass(frozen=True)
class ProposalNoiseModel:
    recall: float = 0.85
    jitter_sigma: float = 0.05
    fp_rate: float = 1.0
    confidence_model: ConfidenceModel = field(default_factory=ConfidenceModel)
    # chance that a background clutter region yields a (spurious) proposal
    clutter_rate: float = 0.0

    def __post_init__(self):
        cm = self.confidence_model
        values = (self.recall, self.jitter_sigma, self.fp_rate, self.clutter_rate, cm.true_mean, cm.true_sd,
                  cm.spurious_mean, cm.spurious_sd, cm.clutter_mean, cm.clutter_sd)
        if not all(np.isfinite(values)):
            raise InvalidNoiseParameters("noise parameters must be finite")
        if not 0.0 <= self.recall <= 1.0 or not 0.0 <= self.clutter_rate <= 1.0:
            raise InvalidNoiseParameters("recall and clutter_rate must lie in [0, 1]")
        if self.jitter_sigma < 0 or self.fp_rate < 0 or min(cm.true_sd, cm.spurious_sd, cm.clutter_sd) < 0:
            raise InvalidNoiseParameters("scales and rates must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "ProposalNoiseModel":
        d = dict(d)
        cm = ConfidenceModel(**d.pop("confidence_model", {}))
        return cls(confidence_model=cm, **d)

    def to_dict(self) -> dict:
        cm = self.confidence_model
        return {
            "recall": self.recall,
            "jitter_sigma": self.jitter_sigma,
            "fp_rate": self.fp_rate,
            "clutter_rate": self.clutter_rate,
            "confidence_model": {
                "true_mean": cm.true_mean,
                "true_sd": cm.true_sd,
                "spurious_mean": cm.spurious_mean,
                "spurious_sd": cm.spurious_sd,
                "clutter_mean": cm.clutter_mean,
                "clutter_sd": cm.clutter_sd,
            },
        }


# Source presets, ordered by object recall: normals > rgb > depth. rgb
# proposals carry the most spurious boxes.
PRESETS: dict[str, ProposalNoiseModel] = {
    "normals": ProposalNoiseModel(recall=0.85, jitter_sigma=0.04, fp_rate=1.0),
    "rgb": ProposalNoiseModel(recall=0.8, jitter_sigma=0.05, fp_rate=2.5),
    "depth": ProposalNoiseModel(recall=0.6, jitter_sigma=0.06, fp_rate=1.0),
    # many proposals per image: background clutter ranks above random boxes,
    # so the cap decides how much of each reaches training
    "dense": ProposalNoiseModel(
        recall=0.85, jitter_sigma=0.04, fp_rate=60.0, clutter_rate=1.0,
        confidence_model=ConfidenceModel(spurious_mean=0.45, spurious_sd=0.1, clutter_mean=0.65, clutter_sd=0.1),
    ),
}
SOURCES = ("normals", "rgb", "depth")


def preset(name: str) -> ProposalNoiseModel:
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidNoiseParameters(f"unknown proposal source {name!r}; choose from {sorted(PRESETS)}") from None


def _scene_boxes(scene) -> np.ndarray:
    if hasattr(scene, "all_boxes"):
        return np.asarray(scene.all_boxes(), dtype=float).reshape(-1, 4)
    return np.array([b.as_list() for b in scene], dtype=float).reshape(-1, 4)


def _valid_box(x1, y1, x2, y2, min_size=1e-3) -> BBox:
    x1, x2 = sorted((float(np.clip(x1, 0, 1)), float(np.clip(x2, 0, 1))))
    y1, y2 = sorted((float(np.clip(y1, 0, 1)), float(np.clip(y2, 0, 1))))
    if x2 - x1 < min_size:
        x1, x2 = (x1, x1 + min_size) if x1 + min_size <= 1 else (x2 - min_size, x2)
    if y2 - y1 < min_size:
        y1, y2 = (y1, y1 + min_size) if y1 + min_size <= 1 else (y2 - min_size, y2)
    return BBox(x1, y1, x2, y2)


def simulate_proposals(scene, noise: ProposalNoiseModel, rng_seed) -> list[Proposal]:
    """Emit noisy proposals for every object in ``scene`` plus spurious boxes.

    Spurious boxes are a Poisson number of random boxes and, when the scene
    records ``clutter_boxes``, jittered copies of clutter regions kept with
    probability ``clutter_rate``. ``scene`` is anything with ``all_boxes()``
    (a synthetic scene) or a sequence of :class:`BBox`. Known and unknown
    objects are treated alike.
    """
    rng = np.random.default_rng(rng_seed)
    boxes = _scene_boxes(scene)
    emit = rng.random(boxes.shape[0]) < noise.recall
    kept = boxes[emit]
    extent = np.tile(kept[:, 2:] - kept[:, :2], 2)  # (w, h, w, h)
    jittered = kept + rng.normal(0.0, 1.0, size=kept.shape) * noise.jitter_sigma * extent
    conf_true = noise.confidence_model.sample(rng, kept.shape[0], spurious=False)
    n_fp = int(rng.poisson(noise.fp_rate))
    centers = rng.random((n_fp, 2))
    sizes = rng.uniform(0.05, 0.4, size=(n_fp, 2))
    conf_fp = noise.confidence_model.sample(rng, n_fp, spurious=True)
    out = [Proposal(_valid_box(*b), float(c)) for b, c in zip(jittered, conf_true)]
    for (cx, cy), (w, h), c in zip(centers, sizes, conf_fp):
        out.append(Proposal(_valid_box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), float(c)))
    clutter = getattr(scene, "clutter_boxes", None)
    if noise.clutter_rate > 0 and clutter is not None and len(clutter):
        clutter = np.asarray(clutter, dtype=float).reshape(-1, 4)
        clutter = clutter[rng.random(clutter.shape[0]) < noise.clutter_rate]
        extent = np.tile(clutter[:, 2:] - clutter[:, :2], 2)
        jittered = clutter + rng.normal(0.0, 1.0, size=clutter.shape) * noise.jitter_sigma * extent
        conf = noise.confidence_model.sample(rng, clutter.shape[0], spurious=True, clutter=True)
        out.extend(Proposal(_valid_box(*b), float(c)) for b, c in zip(jittered, conf))
    return out


def merge_pseudo(
    gt: Sequence[tuple[BBox, int]],
    proposals: Sequence[Proposal],
    conf_thr: float = DEFAULT_CONF_THR,
    iou_thr: float = DEFAULT_IOU_THR,
    cap: int = DEFAULT_CAP,
) -> TargetSet:
    """Merge proposals into the ground truth: threshold, class-agnostic NMS, cap.

    Ground truth enters NMS with score 1.0 and is never suppressed. Surviving
    proposals are capped at ``cap`` by descending confidence; fewer survivors
    are all kept.
    """
    if cap < 0:
        raise OddOneError("cap must be non-negative")
    gt = tuple((b, int(c)) for b, c in gt)
    cand = [p for p in proposals if p.confidence >= conf_thr]
    if not cand or cap == 0:
        return TargetSet(gt=gt)
    conf = np.array([p.confidence for p in cand])
    cand_boxes = np.array([p.box.as_list() for p in cand])
    gt_boxes = np.array([b.as_list() for b, _ in gt], dtype=float).reshape(-1, 4)
    blocked = np.zeros(len(cand), dtype=bool)
    if gt_boxes.shape[0]:
        blocked = iou_matrix(cand_boxes, gt_boxes).max(axis=1) >= iou_thr
    overlaps = iou_matrix(cand_boxes, cand_boxes)
    kept: list[int] = []
    for i in priority_order(conf):
        if blocked[i]:
            continue
        if kept and overlaps[i, kept].max() >= iou_thr:
            continue
        kept.append(int(i))
        if len(kept) == cap:
            break
    return TargetSet(
        gt=gt,
        pseudo=tuple(cand[i].box for i in kept),
        pseudo_confidence=tuple(cand[i].confidence for i in kept),
    )


def write_proposals_jsonl(path, records: Iterable[tuple[object, Sequence[Proposal]]]) -> None:
    with open(path, "w") as fh:
        for image_id, props in records:
            fh.write(
                json.dumps(
                    {
                        "image_id": image_id,
                        "boxes": [p.box.as_list() for p in props],
                        "confidences": [p.confidence for p in props],
                    }
                )
                + "\n"
            )


def read_proposals_jsonl(path) -> Iterator[tuple[object, list[Proposal]]]:
    """Yield ``(image_id, proposals)``; accepts output of external proposal tools."""
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            boxes, confs = rec["boxes"], rec["confidences"]
            if len(boxes) != len(confs):
                raise ParseError(f"line {lineno}: boxes and confidences differ in length")
            props = [Proposal(BBox.from_array(b), float(c)) for b, c in zip(boxes, confs)]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"line {lineno}: {exc}") from None
        yield rec["image_id"], props


@dataclass(frozen=True)
class PseudoConfig:
    """How training targets are augmented with pseudo-labels."""

    enabled: bool = True
    source: str = "normals"
    conf_thr: float = DEFAULT_CONF_THR
    iou_thr: float = DEFAULT_IOU_THR
    cap: int = DEFAULT_CAP
    noise: ProposalNoiseModel | None = None

    @property
    def noise_model(self) -> ProposalNoiseModel:
        return self.noise if self.noise is not None else preset(self.source)

    @classmethod
    def from_dict(cls, d: dict) -> "PseudoConfig":
        d = dict(d)
        if d.get("noise") is not None:
            d["noise"] = ProposalNoiseModel.from_dict(d["noise"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "enabled": self.enabled,
            "source": self.source,
            "conf_thr": self.conf_thr,
            "iou_thr": self.iou_thr,
            "cap": self.cap,
            "noise": None if self.noise is None else self.noise.to_dict(),
        }


def scene_seed(seed: int, image_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(image_id)])
