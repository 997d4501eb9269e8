"""Deterministic synthetic open-world detection data.

Class prototypes sit around per-superclass anchors, so held-out classes of a
known superclass land near that superclass's cluster. Every scene carries
``n_query`` query feature vectors: object slots concatenate the object's
appearance feature with a noisy logit encoding of its box, the remaining
slots hold background clutter (a faded prototype plus noise) with a box of
its own, which proposal sources may fire on.

The box encoding keeps the true centre but pulls the size towards a
reference size, so a head has to recover an object's extent from its
appearance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import BBox, SuperclassMap, TaskSpec, parse_class_config, tasks_from_config
from .exceptions import ConfigError, DuplicateImageId, ParseError

BOX_GRID = 1024  # box corners live on a 1/1024 grid so xywh round trips are exact

DEFAULT_CLASSES = {
    "classes": [
        "cat", "dog", "horse", "bear",
        "car", "bus", "bicycle", "boat",
        "chair", "sofa", "bed", "table",
    ],
    "superclasses": {
        "animal": ["cat", "dog", "horse", "bear"],
        "vehicle": ["car", "bus", "bicycle", "boat"],
        "furniture": ["chair", "sofa", "bed", "table"],
    },
    "tasks": [
        {"id": 1, "current_known": ["cat", "dog", "horse", "car", "bus", "bicycle", "chair", "sofa", "bed"]},
        {"id": 2, "current_known": ["bear", "boat", "table"]},
    ],
}


@dataclass(frozen=True)
class WorldConfig:
    classes: Mapping = field(default_factory=lambda: DEFAULT_CLASSES)
    feature_dim: int = 16
    superclass_separation: float = 3.0
    class_offset: float = 2.5
    noise_sigma: float = 0.3
    background_sigma: float = 0.5
    background_context: float = 0.6
    box_noise: float = 0.05
    size_evidence: float = 0.3
    reference_size: float = 0.2
    size_spread: float = 0.15
    objects_per_image: tuple[int, int] = (2, 5)
    n_train: int = 400
    n_test: int = 400
    n_query: int = 20
    unknown_ids: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.background_sigma < 0 or self.box_noise < 0:
            raise ConfigError("noise scales must be non-negative")
        if not 0.0 <= self.background_context <= 1.0:
            raise ConfigError("background_context must lie in [0, 1]")
        if not 0.0 <= self.size_evidence <= 1.0 or not 0.0 < self.reference_size < 1.0:
            raise ConfigError("size_evidence must lie in [0, 1] and reference_size in (0, 1)")
        if self.feature_dim < 4:
            raise ConfigError("feature_dim must be at least 4")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi or hi > self.n_query:
            raise ConfigError("objects_per_image must satisfy 0 <= min <= max <= n_query")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("split sizes must be non-negative")
        classes = set(self.classes.get("classes", ()))
        if not set(self.unknown_ids) <= classes:
            raise ConfigError("unknown_ids must be class names of the world")

    @property
    def query_dim(self) -> int:
        return self.feature_dim + 4

    @classmethod
    def from_dict(cls, d: Mapping) -> "WorldConfig":
        d = dict(d)
        for key in ("objects_per_image", "unknown_ids"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown world config fields {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects_per_image"] = list(self.objects_per_image)
        d["unknown_ids"] = list(self.unknown_ids)
        return d


@dataclass(eq=False)
class Scene:
    """One image: objects (global class indices) and its query features."""

    image_id: int
    boxes: np.ndarray
    classes: np.ndarray
    annotated: np.ndarray
    query_features: np.ndarray
    query_object: np.ndarray
    split: str = "train"
    clutter_boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def all_boxes(self) -> np.ndarray:
        return self.boxes

    @property
    def n_objects(self) -> int:
        return int(self.classes.size)

    def annotations(self, class_names: Sequence[str], world_classes: Sequence[str]) -> list[tuple[BBox, int]]:
        """Annotated objects of the given classes, labelled by position in ``class_names``."""
        label_of = {world_classes.index(n): i for i, n in enumerate(class_names)}
        return [
            (BBox.from_array(b), label_of[int(c)])
            for b, c, a in zip(self.boxes, self.classes, self.annotated)
            if a and int(c) in label_of
        ]


@dataclass(eq=False)
class SynthDataset:
    config: WorldConfig
    superclass_map: SuperclassMap
    tasks: tuple[TaskSpec, ...]
    train: list[Scene]
    test: list[Scene]
    prototypes: np.ndarray | None = None

    @property
    def classes(self) -> tuple[str, ...]:
        return self.superclass_map.classes

    def split(self, name: str) -> list[Scene]:
        return {"train": self.train, "test": self.test}[name]

    def task(self, task_id: int) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise ConfigError(f"no task {task_id}")


def _unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _logit(p):
    return np.log(p) - np.log1p(-p)


def make_prototypes(config: WorldConfig, smap: SuperclassMap, rng) -> np.ndarray:
    n_super = smap.n_superclasses - 1
    anchors = config.superclass_separation * _unit_rows(rng, n_super, config.feature_dim)
    offsets = config.class_offset * _unit_rows(rng, smap.n_classes, config.feature_dim)
    return anchors[smap.assignment_array] + offsets


def _quantize(x):
    return np.round(np.asarray(x) * BOX_GRID) / BOX_GRID


def _sample_box(rng, size):
    w, h = np.clip(size, 2.0 / BOX_GRID, 0.9)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    x1, y1 = _quantize(x1), _quantize(y1)
    x2 = min(_quantize(x1 + w), 1.0)
    y2 = min(_quantize(y1 + h), 1.0)
    if x2 <= x1:
        x2 = x1 + 1.0 / BOX_GRID
    if y2 <= y1:
        y2 = y1 + 1.0 / BOX_GRID
    return np.array([x1, y1, x2, y2])


def _evidence_box(box, config) -> np.ndarray:
    """The box as seen by a query: true centre, size pulled towards the reference size."""
    centre = (box[:2] + box[2:]) / 2
    size = box[2:] - box[:2]
    s = config.size_evidence
    seen = size**s * config.reference_size ** (1.0 - s)
    return np.concatenate([centre - seen / 2, centre + seen / 2])


def _encode_box(box, rng, noise, config):
    inner = np.clip(_evidence_box(box, config), 0.5 / BOX_GRID, 1 - 0.5 / BOX_GRID)
    return _logit(inner) + rng.normal(0.0, noise, size=4) if noise > 0 else _logit(inner)


def _make_scene(image_id, split, rng, config, prototypes, sizes, annotated_mask) -> Scene:
    lo, hi = config.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    n_classes = prototypes.shape[0]
    classes = rng.integers(0, n_classes, size=n_obj)
    boxes = np.array(
        [_sample_box(rng, sizes[c] * np.exp(rng.normal(0.0, config.size_spread, 2))) for c in classes]
    ).reshape(-1, 4)
    slots = rng.permutation(config.n_query)[:n_obj]
    feats = np.empty((config.n_query, config.query_dim))
    owner = np.full(config.n_query, -1, dtype=int)
    clutter = np.empty((config.n_query, 4))
    for q in range(config.n_query):
        context = config.background_context * prototypes[rng.integers(0, n_classes)]
        feats[q, : config.feature_dim] = context + rng.normal(0.0, config.background_sigma, config.feature_dim)
        size = np.exp(rng.uniform(np.log(0.05), np.log(0.5), 2))
        clutter[q] = _sample_box(rng, size)
        feats[q, config.feature_dim :] = _encode_box(clutter[q], rng, 0.0, config)
    for k, (q, c) in enumerate(zip(slots, classes)):
        appearance = prototypes[c] + (rng.normal(0.0, config.noise_sigma, config.feature_dim) if config.noise_sigma > 0 else 0.0)
        feats[q, : config.feature_dim] = appearance
        feats[q, config.feature_dim :] = _encode_box(boxes[k], rng, config.box_noise, config)
        owner[q] = k
    annotated = np.ones(n_obj, dtype=bool) if split == "test" else annotated_mask[classes]
    return Scene(
        image_id=image_id,
        boxes=boxes,
        classes=classes.astype(int),
        annotated=annotated,
        query_features=feats,
        query_object=owner,
        split=split,
        clutter_boxes=clutter[np.setdiff1d(np.arange(config.n_query), slots)],
    )


def generate(config: WorldConfig = WorldConfig()) -> SynthDataset:
    """Generate train/test scenes; identical configs give identical data."""
    parsed = parse_class_config(config.classes)
    smap = parsed.superclass_map
    root = np.random.default_rng(config.seed)
    world_rng, train_rng, test_rng = (np.random.default_rng(s) for s in root.bit_generator.seed_seq.spawn(3))
    prototypes = make_prototypes(config, smap, world_rng)
    sizes = np.exp(world_rng.uniform(np.log(0.08), np.log(0.45), size=(smap.n_classes, 2)))
    annotated_mask = np.array([c not in config.unknown_ids for c in smap.classes])
    train = [_make_scene(i, "train", train_rng, config, prototypes, sizes, annotated_mask) for i in range(config.n_train)]
    test = [
        _make_scene(config.n_train + i, "test", test_rng, config, prototypes, sizes, annotated_mask)
        for i in range(config.n_test)
    ]
    return SynthDataset(config, smap, parsed.tasks, train, test, prototypes)


# -- serialisation -----------------------------------------------------------


def to_coco(dataset: SynthDataset) -> dict:
    smap = dataset.superclass_map
    images, annotations = [], []
    ann_id = 1
    for split in ("train", "test"):
        for scene in dataset.split(split):
            images.append({
                "id": scene.image_id, "split": split, "width": 1.0, "height": 1.0,
                "clutter": [[float(v) for v in b] for b in scene.clutter_boxes],
            })
            slot_of = {int(k): int(q) for q, k in enumerate(scene.query_object) if k >= 0}
            for k in range(scene.n_objects):
                x1, y1, x2, y2 = (float(v) for v in scene.boxes[k])
                annotations.append(
                    {
                        "id": ann_id,
                        "image_id": scene.image_id,
                        "category_id": int(scene.classes[k]),
                        "bbox": [x1, y1, x2 - x1, y2 - y1],
                        "area": (x2 - x1) * (y2 - y1),
                        "iscrowd": 0,
                        "annotated": bool(scene.annotated[k]),
                        "query_slot": slot_of.get(k, -1),
                    }
                )
                ann_id += 1
    return {
        "info": {"world": dataset.config.to_dict()},
        "categories": [
            {"id": i, "name": c, "supercategory": smap.superclass_name_of(i)} for i, c in enumerate(smap.classes)
        ],
        "images": images,
        "annotations": annotations,
        "tasks": [
            {"id": t.task_id, "current_known": [c for c in smap.classes if c in t.current_known]}
            for t in dataset.tasks
        ],
    }


def save(dataset: SynthDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dataset.json").write_text(json.dumps(to_coco(dataset), sort_keys=True, indent=1))
    scenes = dataset.train + dataset.test
    feats = np.stack([s.query_features for s in scenes]) if scenes else np.zeros((0, dataset.config.n_query, dataset.config.query_dim))
    feats.astype("<f8").tofile(out / "features.bin")
    sidecar = {"shape": list(feats.shape), "dtype": "<f8", "order": "C", "image_ids": [s.image_id for s in scenes]}
    (out / "features.json").write_text(json.dumps(sidecar, sort_keys=True))
    return out


def load(data_dir) -> SynthDataset:
    root = Path(data_dir)
    try:
        coco = json.loads((root / "dataset.json").read_text())
        sidecar = json.loads((root / "features.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read dataset at {root}: {exc}") from None
    config = WorldConfig.from_dict(coco["info"]["world"])
    parsed = parse_class_config(config.classes)
    feats = np.fromfile(root / "features.bin", dtype=sidecar["dtype"]).reshape(sidecar["shape"])
    ids = [img["id"] for img in coco["images"]]
    if len(set(ids)) != len(ids):
        raise DuplicateImageId("dataset.json lists an image id twice")
    row = {iid: r for r, iid in enumerate(sidecar["image_ids"])}
    by_image: dict[int, list[dict]] = {i: [] for i in ids}
    for ann in coco["annotations"]:
        by_image[ann["image_id"]].append(ann)
    train, test = [], []
    for img in coco["images"]:
        anns = by_image[img["id"]]
        boxes = np.array([[a["bbox"][0], a["bbox"][1], a["bbox"][0] + a["bbox"][2], a["bbox"][1] + a["bbox"][3]] for a in anns]).reshape(-1, 4)
        owner = np.full(config.n_query, -1, dtype=int)
        for k, a in enumerate(anns):
            if a.get("query_slot", -1) >= 0:
                owner[a["query_slot"]] = k
        scene = Scene(
            image_id=img["id"],
            boxes=boxes,
            classes=np.array([a["category_id"] for a in anns], dtype=int),
            annotated=np.array([a.get("annotated", True) for a in anns], dtype=bool),
            query_features=np.array(feats[row[img["id"]]]),
            query_object=owner,
            split=img["split"],
            clutter_boxes=np.array(img.get("clutter", []), dtype=float).reshape(-1, 4),
        )
        (train if img["split"] == "train" else test).append(scene)
    return SynthDataset(config, parsed.superclass_map, parsed.tasks, train, test)


def digest(data_dir) -> str:
    h = hashlib.sha256()
    for name in ("dataset.json", "features.json", "features.bin"):
        h.update((Path(data_dir) / name).read_bytes())
    return h.hexdigest()
