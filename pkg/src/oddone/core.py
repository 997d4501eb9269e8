"""Domain types shared by every other module.

Boxes are stored in corner form ``(x_min, y_min, x_max, y_max)``. Classes and
superclasses are addressed by small dense integers assigned in config order;
names are kept as metadata only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import (
    ConfigError,
    DimensionMismatch,
    EmptyClassSet,
    MissingAssignment,
    OddOneError,
    UnknownClassId,
)

UNKNOWN_SUPERCLASS = "unknown"
UNKNOWN_NAME = "unknown"


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise OddOneError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise OddOneError(f"degenerate box {coords}")

    @classmethod
    def from_array(cls, a) -> "BBox":
        x1, y1, x2, y2 = (float(v) for v in a)
        return cls(x1, y1, x2, y2)

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        """COCO ``[x, y, width, height]`` convention."""
        return cls(x, y, x + w, y + h)

    def to_cxcywh(self) -> tuple[float, float, float, float]:
        w = self.x_max - self.x_min
        h = self.y_max - self.y_min
        return (self.x_min + w / 2, self.y_min + h / 2, w, h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max - self.x_min, self.y_max - self.y_min)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=float)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class SuperclassMap:
    """A one-level partition of classes into superclasses.

    The last superclass slot is always the reserved unknown superclass, which
    owns no class. ``assignment[c]`` is the superclass index of class ``c``.
    """

    classes: tuple[str, ...]
    superclasses: tuple[str, ...]
    assignment: tuple[int, ...]
    partial: frozenset[str] = frozenset()

    def __post_init__(self):
        if not self.classes:
            raise EmptyClassSet("a superclass map needs at least one class")
        if len(self.assignment) != len(self.classes):
            raise MissingAssignment("assignment must cover every class")
        if not self.superclasses or self.superclasses[-1] != UNKNOWN_SUPERCLASS:
            raise ConfigError("the reserved unknown superclass must be the last slot")
        n_real = len(self.superclasses) - 1
        if any(not 0 <= s < n_real for s in self.assignment):
            raise ConfigError("classes may only be assigned to non-reserved superclasses")
        used = set(self.assignment)
        for s, name in enumerate(self.superclasses[:-1]):
            if s not in used and name not in self.partial:
                raise ConfigError(f"superclass {name!r} has no classes")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_superclasses(self) -> int:
        """Number of slots including the reserved unknown superclass."""
        return len(self.superclasses)

    @property
    def unknown_index(self) -> int:
        return len(self.superclasses) - 1

    @property
    def assignment_array(self) -> np.ndarray:
        return np.asarray(self.assignment, dtype=int)

    def class_index(self, class_id) -> int:
        if isinstance(class_id, (int, np.integer)) and not isinstance(class_id, bool):
            if 0 <= class_id < len(self.classes):
                return int(class_id)
        elif class_id in self.classes:
            return self.classes.index(class_id)
        raise UnknownClassId(f"unknown class id {class_id!r}")

    def superclass_of(self, class_id) -> int:
        return self.assignment[self.class_index(class_id)]

    def superclass_name_of(self, class_id) -> str:
        return self.superclasses[self.superclass_of(class_id)]

    def members(self, superclass) -> tuple[int, ...]:
        s = superclass if isinstance(superclass, (int, np.integer)) else self.superclasses.index(superclass)
        return tuple(c for c, a in enumerate(self.assignment) if a == s)

    def restrict(self, keep: Iterable[str]) -> "SuperclassMap":
        """Sub-map over ``keep`` (in this map's order); empty superclasses are dropped."""
        keep = set(keep)
        missing = keep - set(self.classes)
        if missing:
            raise UnknownClassId(f"unknown classes {sorted(missing)}")
        classes = [c for c in self.classes if c in keep]
        return validate_superclass_map(
            classes, {c: self.superclass_name_of(c) for c in classes}
        )

    def to_config(self) -> dict:
        groups: dict[str, list[str]] = {s: [] for s in self.superclasses[:-1]}
        for c, s in zip(self.classes, self.assignment):
            groups[self.superclasses[s]].append(c)
        return {"classes": list(self.classes), "superclasses": groups}


def validate_superclass_map(
    classes: Sequence[str],
    assignment: Mapping[str, str],
    partial: Iterable[str] = (),
) -> SuperclassMap:
    """Build a :class:`SuperclassMap` from class names and a class->superclass dict.

    Superclass indices follow first appearance in ``classes`` order; the
    reserved unknown superclass is appended last.
    """
    classes = list(classes)
    if not classes:
        raise EmptyClassSet("class set is empty")
    if len(set(classes)) != len(classes):
        raise ConfigError("duplicate class names")
    extra = set(assignment) - set(classes)
    if extra:
        raise UnknownClassId(f"assignment mentions unknown classes {sorted(extra)}")
    missing = [c for c in classes if c not in assignment]
    if missing:
        raise MissingAssignment(f"no superclass for {missing}")
    supers: list[str] = []
    for c in classes:
        s = assignment[c]
        if s == UNKNOWN_SUPERCLASS:
            raise ConfigError("the unknown superclass is reserved")
        if s not in supers:
            supers.append(s)
    partial = frozenset(partial)
    for p in sorted(partial - set(supers)):
        supers.append(p)
    return SuperclassMap(
        classes=tuple(classes),
        superclasses=tuple(supers) + (UNKNOWN_SUPERCLASS,),
        assignment=tuple(supers.index(assignment[c]) for c in classes),
        partial=partial,
    )


def superclass_of(class_id, smap: SuperclassMap) -> int:
    return smap.superclass_of(class_id)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    previously_known: frozenset[str]
    current_known: frozenset[str]
    superclass_map: SuperclassMap

    def __post_init__(self):
        if self.task_id < 1:
            raise ConfigError("task ids start at 1")
        if self.previously_known & self.current_known:
            raise ConfigError("previously and currently known classes overlap")
        if set(self.superclass_map.classes) != self.previously_known | self.current_known:
            raise ConfigError("superclass map must cover exactly the known classes")

    @property
    def known(self) -> tuple[str, ...]:
        """Known classes in map order; position is the class label."""
        return self.superclass_map.classes

    @property
    def unknown_label(self) -> int:
        return self.superclass_map.n_classes

    def label_name(self, label: int) -> str:
        return UNKNOWN_NAME if label == self.unknown_label else self.known[label]

    def digest(self) -> str:
        import hashlib

        payload = json.dumps(
            {
                "task_id": self.task_id,
                "previously_known": sorted(self.previously_known),
                "current_known": sorted(self.current_known),
                "map": self.superclass_map.to_config(),
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class QueryOutput:
    class_probs: np.ndarray
    superclass_probs: np.ndarray
    box: BBox

    def __post_init__(self):
        cp = _frozen(self.class_probs)
        sp = _frozen(self.superclass_probs)
        if cp.ndim != 1 or sp.ndim != 1:
            raise DimensionMismatch("probability vectors must be 1-D")
        if np.any((cp < 0) | (cp > 1)) or not np.all(np.isfinite(cp)):
            raise OddOneError("class probabilities must lie in [0, 1]")
        if np.any((sp < 0) | (sp > 1)) or abs(sp.sum() - 1.0) > 1e-9:
            raise OddOneError("superclass probabilities must be a distribution")
        object.__setattr__(self, "class_probs", cp)
        object.__setattr__(self, "superclass_probs", sp)


@dataclass(frozen=True, eq=False)
class RecalibratedScores:
    known_probs: np.ndarray
    unknown_score: float | None = None


@dataclass(frozen=True)
class Detection:
    box: BBox
    label: int
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise OddOneError("detection score must be finite")


@dataclass(frozen=True)
class BenchmarkClasses:
    """A parsed superclass/task config file."""

    superclass_map: SuperclassMap
    tasks: tuple[TaskSpec, ...] = field(default_factory=tuple)


def tasks_from_config(smap: SuperclassMap, task_entries: Sequence[Mapping]) -> tuple[TaskSpec, ...]:
    tasks = []
    seen: set[str] = set()
    for entry in sorted(task_entries, key=lambda e: int(e["id"])):
        current = frozenset(entry["current_known"])
        unknown = current - set(smap.classes)
        if unknown:
            raise UnknownClassId(f"task {entry['id']} names unknown classes {sorted(unknown)}")
        known = seen | current
        tasks.append(
            TaskSpec(
                task_id=int(entry["id"]),
                previously_known=frozenset(seen),
                current_known=current,
                superclass_map=smap.restrict(known),
            )
        )
        seen = known
    return tuple(tasks)


def parse_class_config(cfg: Mapping) -> BenchmarkClasses:
    try:
        classes = list(cfg["classes"])
        groups = cfg["superclasses"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"config is missing field {exc}") from None
    assignment: dict[str, str] = {}
    for sup, members in groups.items():
        for c in members:
            if c in assignment:
                raise ConfigError(f"class {c!r} assigned to two superclasses")
            assignment[c] = sup
    smap = validate_superclass_map(classes, assignment, partial=cfg.get("partial", ()))
    return BenchmarkClasses(smap, tasks_from_config(smap, cfg.get("tasks", ())))


def load_class_config(path) -> BenchmarkClasses:
    with open(path) as fh:
        return parse_class_config(json.load(fh))


GROUPINGS = ("A", "B", "C", "D")


def load_grouping(benchmark: str = "sowod", group: str = "D") -> BenchmarkClasses:
    """Bundled task-1 superclass groupings (``benchmark`` in {"sowod", "mowod"})."""
    if group not in GROUPINGS or benchmark not in ("sowod", "mowod"):
        raise ConfigError(f"no bundled grouping {benchmark}/{group}")
    text = resources.files("oddone.data").joinpath(f"{benchmark}_t1_{group}.json").read_text()
    return parse_class_config(json.loads(text))


def write_class_config(path, smap: SuperclassMap, tasks: Sequence[TaskSpec] = ()) -> None:
    cfg = smap.to_config()
    cfg["tasks"] = [{"id": t.task_id, "current_known": sorted(t.current_known, key=smap.classes.index)} for t in tasks]
    Path(path).write_text(json.dumps(cfg, indent=2))
