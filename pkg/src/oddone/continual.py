"""Incremental task protocol with exemplar replay and the component ablation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import BBox, SuperclassMap, TaskSpec
from .estimator import OddOneOutDetector, predict_scenes
from .exceptions import ConfigError, EmptyDataset, OddOneError
from .matching import cost_matrix, hungarian
from .owod_eval import EvalReport, evaluate
from .pseudo import PseudoConfig, TargetSet, merge_pseudo, scene_seed, simulate_proposals
from .scoring import recalibrate_batch
from .synthworld import SynthDataset, WorldConfig, generate
from .toytrain import HeadModel, forward_arrays

logger = logging.getLogger(__name__)


class ProtocolViolation(OddOneError):
    """A task tried to read annotations it is not allowed to see."""


# -- task views --------------------------------------------------------------


class SceneView:
    """A training scene as visible during one task."""

    def __init__(self, scene, allowed: frozenset[str], log: set[str]):
        self._scene = scene
        self._allowed = allowed
        self._log = log
        self.image_id = scene.image_id
        self.query_features = scene.query_features
        self.clutter_boxes = scene.clutter_boxes

    def all_boxes(self) -> np.ndarray:
        # class-agnostic geometry is what a proposal source sees
        return self._scene.all_boxes()

    def annotations(self, class_names: Sequence[str], world_classes: Sequence[str]):
        denied = set(class_names) - self._allowed
        if denied:
            raise ProtocolViolation(f"annotations of {sorted(denied)} are not visible in this task")
        self._log.update(class_names)
        return self._scene.annotations(class_names, world_classes)


class TaskView(Sequence):
    """Training scenes exposing only the annotations of ``allowed`` classes.

    ``read_classes`` records every class whose annotations were requested.
    """

    def __init__(self, scenes: Sequence, allowed: Iterable[str]):
        self.allowed = frozenset(allowed)
        self.read_classes: set[str] = set()
        self._views = [SceneView(s, self.allowed, self.read_classes) for s in scenes]
        self._by_id = {v.image_id: v for v in self._views}

    def __len__(self) -> int:
        return len(self._views)

    def __getitem__(self, i):
        return self._views[i]

    def by_id(self, image_id) -> SceneView:
        return self._by_id[image_id]


# -- exemplars ---------------------------------------------------------------


@dataclass
class ExemplarStore:
    """Stored images with their annotations as (box, class name) pairs."""

    budget: int
    images: dict[int, tuple[tuple[BBox, str], ...]] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) > self.budget:
            raise ConfigError(f"{len(self.images)} exemplar images exceed the budget of {self.budget}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_ids(self) -> list[int]:
        return sorted(self.images)

    @property
    def classes(self) -> set[str]:
        return {c for anns in self.images.values() for _, c in anns}

    def union(self, other: "ExemplarStore") -> "ExemplarStore":
        merged = dict(self.images)
        for i, anns in other.images.items():
            merged[i] = tuple(dict.fromkeys(merged.get(i, ()) + anns))
        return ExemplarStore(self.budget + other.budget, merged)

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "images": {str(i): [[*b.as_list(), c] for b, c in self.images[i]] for i in self.image_ids},
        }


def instance_scores(model: HeadModel, scenes, task: TaskSpec, classes: Sequence[str],
                    world_classes: Sequence[str], superclass: bool = True, weights=None):
    """Score each ground-truth instance by its matched query's recalibrated probability.

    Yields ``(image_id, class name, score)``; instances left unmatched score 0.
    """
    from .matching import CostWeights

    cw = weights or CostWeights()
    smap = task.superclass_map
    known = list(task.known)
    for s in scenes:
        anns = s.annotations(classes, world_classes)
        if not anns:
            continue
        labels = np.array([known.index(classes[c]) for _, c in anns])
        boxes = np.array([b.as_list() for b, _ in anns])
        o = forward_arrays(model, s.query_features)
        probs = recalibrate_batch(o.class_probs, o.superclass_probs, smap) if superclass else o.class_probs
        match = hungarian(cost_matrix(o.class_probs, o.boxes, boxes, labels, cw))
        score = np.zeros(len(anns))
        for q, t in match.pairs:
            score[t] = probs[q, labels[t]]
        for (_, c), v in zip(anns, score):
            yield s.image_id, classes[c], float(v)


def select_exemplars(
    model: HeadModel,
    scenes,
    task: TaskSpec,
    per_class: int = 25,
    budget: int = 20,
    seed: int = 0,
    world_classes: Sequence[str] | None = None,
    superclass: bool = True,
    classes: Sequence[str] | None = None,
) -> ExemplarStore:
    """Images holding each class's ``per_class`` highest- and lowest-scoring instances.

    Instances are ranked by :func:`instance_scores`. The image union is cut
    to ``budget`` by a seeded uniform draw. ``classes`` defaults to the
    task's current-known classes.
    """
    if len(scenes) == 0:
        raise EmptyDataset("no scenes to select exemplars from")
    if world_classes is None:
        raise ConfigError("world_classes is required")
    classes = [c for c in task.known if c in (task.current_known if classes is None else set(classes))]
    by_class: dict[str, list[tuple[float, int, int]]] = {c: [] for c in classes}
    for n, (image_id, c, v) in enumerate(instance_scores(model, scenes, task, classes, world_classes, superclass)):
        by_class[c].append((v, image_id, n))
    if not any(by_class.values()):
        raise EmptyDataset("no instances of the selected classes")
    chosen: set[int] = set()
    for inst in by_class.values():
        inst.sort(key=lambda r: (-r[0], r[1], r[2]))
        picked = inst[:per_class] + inst[max(per_class, len(inst) - per_class):]
        chosen.update(image_id for _, image_id, _ in picked)
    ids = sorted(chosen)
    if len(ids) > budget:
        rng = np.random.default_rng(seed)
        ids = sorted(int(i) for i in rng.choice(ids, size=budget, replace=False))
    views = {s.image_id: s for s in scenes}
    images = {
        i: tuple((b, classes[c]) for b, c in views[i].annotations(classes, world_classes))
        for i in ids
    }
    return ExemplarStore(budget, images)


# -- head expansion ----------------------------------------------------------


def expand_model(model: HeadModel, old: SuperclassMap, new: SuperclassMap, seed: int = 0,
                 class_prior: float = 0.01) -> HeadModel:
    """Heads for ``new`` that keep every class and superclass ``old`` already had."""
    fresh = HeadModel.init(model.feature_dim, new.n_classes, new.n_superclasses,
                           n_query=model.n_query, seed=seed, class_prior=class_prior)
    for j, c in enumerate(new.classes):
        if c in old.classes:
            i = old.classes.index(c)
            fresh.W_cls[:, j] = model.W_cls[:, i]
            fresh.b_cls[j] = model.b_cls[i]
    for j, s in enumerate(new.superclasses):
        if s in old.superclasses:
            i = old.superclasses.index(s)
            fresh.W_sup[:, j] = model.W_sup[:, i]
            fresh.b_sup[j] = model.b_sup[i]
    fresh.W_box[:] = model.W_box
    fresh.b_box[:] = model.b_box
    return fresh


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    name: str
    pseudo: bool
    superclass: bool
    no_object: bool | None = None
    variant: str = "sum-recal-thr"

    @property
    def training_key(self) -> tuple:
        return (self.pseudo, self.superclass, self.no_object)

    def to_dict(self) -> dict:
        return {"name": self.name, "pseudo": self.pseudo, "superclass": self.superclass,
                "no_object": self.no_object, "variant": self.variant}


# baseline: set-prediction detector, unmatched queries supervised as no-object.
# The other rows follow the matched-only classification rule.
DEFAULT_ROWS = (
    AblationRow("baseline", pseudo=False, superclass=False, no_object=True),
    AblationRow("+pseudo", pseudo=True, superclass=False, no_object=False),
    AblationRow("+pseudo+superclass", pseudo=True, superclass=True, no_object=False),
)

VARIANT_ROWS = tuple(
    AblationRow(f"+pseudo+superclass/{v}", pseudo=True, superclass=True, no_object=False, variant=v)
    for v in ("msp-super", "msp-recal", "sum-recal")
)

DETECTOR_KEYS = (
    "target_known_fraction", "calibration_fraction", "epochs", "learning_rate", "box_lr_scale",
    "lr_drop_epoch", "batch_size", "focal_alpha", "focal_gamma", "w_bbox", "w_giou", "w_cls",
    "w_sup", "init_scale", "box_readout", "class_prior",
)


@dataclass(frozen=True)
class BenchmarkConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    detector: Mapping = field(default_factory=dict)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    rows: tuple[AblationRow, ...] = DEFAULT_ROWS
    task_ids: tuple[int, ...] | None = None
    exemplars_per_class: int = 25
    exemplar_budget: int = 20
    finetune_fraction: float = 0.5
    seed: int = 0
    top_k_per_image: int = 100

    def __post_init__(self):
        bad = set(self.detector) - set(DETECTOR_KEYS)
        if bad:
            raise ConfigError(f"unknown detector settings {sorted(bad)}")
        names = [r.name for r in self.rows]
        if len(set(names)) != len(names) or not names:
            raise ConfigError("ablation row names must be unique and non-empty")
        if not 0.0 <= self.finetune_fraction <= 1.0:
            raise ConfigError("finetune_fraction must lie in [0, 1]")
        if self.exemplar_budget < 0 or self.exemplars_per_class < 1:
            raise ConfigError("exemplar budget must be >= 0 and per-class count >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "BenchmarkConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown benchmark config fields {sorted(unknown)}")
        if "world" in d:
            d["world"] = WorldConfig.from_dict(d["world"])
        if "pseudo" in d:
            d["pseudo"] = PseudoConfig.from_dict(d["pseudo"])
        if "rows" in d:
            d["rows"] = tuple(AblationRow(**r) for r in d["rows"])
        if d.get("task_ids") is not None:
            d["task_ids"] = tuple(int(t) for t in d["task_ids"])
        if "detector" in d:
            d["detector"] = dict(d["detector"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "detector": dict(self.detector),
            "pseudo": self.pseudo.to_dict(),
            "rows": [r.to_dict() for r in self.rows],
            "task_ids": None if self.task_ids is None else list(self.task_ids),
            "exemplars_per_class": self.exemplars_per_class,
            "exemplar_budget": self.exemplar_budget,
            "finetune_fraction": self.finetune_fraction,
            "seed": self.seed,
            "top_k_per_image": self.top_k_per_image,
        }

    def digest(self) -> str:
        return config_digest(self.to_dict())


def config_digest(d) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def load_benchmark_config(path) -> BenchmarkConfig:
    try:
        return BenchmarkConfig.from_dict(json.loads(Path(path).read_text()))
    except (json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


# -- protocol ----------------------------------------------------------------


def task_seed(seed: int, task_id: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([int(seed), int(task_id), int(salt)]).generate_state(1)[0])


@dataclass
class TaskOutcome:
    task: TaskSpec
    detector: OddOneOutDetector
    reports: dict[str, EvalReport]
    taus: dict[str, float]
    exemplars: ExemplarStore
    read_classes: frozenset[str]
    train_log: list
    finetune_log: list


def _targets(views, stored: Mapping[int, tuple] | None, task: TaskSpec, world_classes, pseudo, seed):
    """Targets for ``views``; stored annotations replace the view's own when given."""
    known = list(task.known)
    current = [c for c in known if c in task.current_known]
    out = []
    for v in views:
        if stored is None:
            gt = [(b, known.index(current[c])) for b, c in v.annotations(current, world_classes)]
        else:
            gt = [(b, known.index(c)) for b, c in stored[v.image_id]]
        if pseudo is None or not pseudo.enabled:
            out.append(TargetSet(gt=tuple(gt)))
        else:
            props = simulate_proposals(v, pseudo.noise_model, scene_seed(seed, v.image_id))
            out.append(merge_pseudo(gt, props, pseudo.conf_thr, pseudo.iou_thr, pseudo.cap))
    return out


def run_task_sequence(config: BenchmarkConfig, dataset: SynthDataset, rows: Sequence[AblationRow]) -> list[TaskOutcome]:
    """Run every task for one training configuration; ``rows`` share it and differ in variant."""
    key = rows[0].training_key
    logger.info("training configuration pseudo=%s superclass=%s no_object=%s", *key)
    if any(r.training_key != key for r in rows):
        raise ConfigError("rows of one sequence must share their training switches")
    pseudo_on, superclass, no_object = key
    pseudo = config.pseudo if pseudo_on else None
    task_ids = config.task_ids or tuple(t.task_id for t in dataset.tasks)
    world_classes = dataset.classes
    outcomes: list[TaskOutcome] = []
    store: ExemplarStore | None = None
    prev: tuple[HeadModel, SuperclassMap] | None = None
    for task_id in task_ids:
        task = dataset.task(task_id)
        smap = task.superclass_map
        view = TaskView(dataset.train, task.current_known)
        det = OddOneOutDetector(
            smap, use_superclass=superclass, no_object=no_object, unknown_variant=rows[0].variant,
            random_state=task_seed(config.seed, task_id), **config.detector,
        )
        X = np.stack([v.query_features for v in view])
        y = _targets(view, None, task, world_classes, pseudo, config.seed)
        if prev is not None:
            det.set_params(warm_start=True)
            det.model_ = expand_model(prev[0], prev[1], smap, seed=task_seed(config.seed, task_id, 1),
                                      class_prior=det.class_prior)
        det.fit(X, y)
        train_log = det.train_log_
        finetune_log: list = []

        cal_X, cal_y = _calibration_pool(det, X, y, task_id, config.seed)
        if store is not None and len(store) and config.finetune_fraction > 0:
            fresh = select_exemplars(det.model_, view, task, config.exemplars_per_class, config.exemplar_budget,
                                     task_seed(config.seed, task_id, 2), world_classes, superclass)
            pool = store.union(fresh)
            ids = pool.image_ids
            fx = np.stack([dataset_scene(dataset, i).query_features for i in ids])
            fy = _targets([view.by_id(i) for i in ids], pool.images, task, world_classes, pseudo, config.seed)
            ft_epochs = max(1, math.ceil(config.finetune_fraction * det.epochs))
            base = det.get_params()
            det.set_params(epochs=ft_epochs, lr_drop_epoch=max(1, ft_epochs // 2))
            det.fit(fx, fy)
            det.set_params(epochs=base["epochs"], lr_drop_epoch=base["lr_drop_epoch"])
            finetune_log = det.train_log_
            cal_X = np.concatenate([cal_X, fx])
            cal_y = cal_y + fy

        reports, taus = {}, {}
        for row in rows:
            det.set_params(unknown_variant=row.variant)
            det.calibrate(cal_X, cal_y)
            taus[row.name] = det.threshold_.tau
            preds = predict_scenes(det, dataset.test)
            reports[row.name] = evaluate(preds, dataset.test, task, world_classes, config.top_k_per_image)
        det.set_params(unknown_variant=rows[0].variant)
        det.calibrate(cal_X, cal_y)

        selected = select_exemplars(det.model_, view, task, config.exemplars_per_class, config.exemplar_budget,
                                    task_seed(config.seed, task_id, 3), world_classes, superclass)
        store = selected if store is None else store.union(selected)
        outcomes.append(TaskOutcome(task, det, reports, taus, store, frozenset(view.read_classes),
                                    train_log, finetune_log))
        prev = (det.model_.copy(), smap)
    return outcomes


def dataset_scene(dataset: SynthDataset, image_id: int):
    for s in dataset.train:
        if s.image_id == image_id:
            return s
    raise KeyError(image_id)


def _calibration_pool(det: OddOneOutDetector, X, y, task_id: int, seed: int):
    n = X.shape[0]
    n_cal = max(1, math.ceil(det.calibration_fraction * n))
    rng = np.random.default_rng(task_seed(seed, task_id, 4))
    idx = np.sort(rng.choice(n, size=min(n_cal, n), replace=False))
    return X[idx], [y[i] for i in idx]


# -- results -----------------------------------------------------------------


ABLATION_COLUMNS = ("row", "task", "u_recall", "map_prev", "map_current", "map_both")


@dataclass
class BenchmarkResult:
    config: BenchmarkConfig
    rows: dict[str, list[TaskOutcome]]

    def report(self, row: str, task_id: int) -> EvalReport:
        for o in self.rows[row]:
            if o.task.task_id == task_id:
                return o.reports[row]
        raise KeyError((row, task_id))

    def to_dict(self) -> dict:
        out = {"config": self.config.to_dict(), "config_digest": self.config.digest(), "rows": []}
        for r in self.config.rows:
            tasks = []
            for o in self.rows[r.name]:
                tasks.append({
                    "task_id": o.task.task_id,
                    "report": o.reports[r.name].to_dict(),
                    "tau": o.taus[r.name],
                    "exemplar_images": o.exemplars.image_ids,
                    "annotation_classes_read": sorted(o.read_classes),
                    "final_train_loss": o.train_log[-1].total if o.train_log else None,
                    "final_finetune_loss": o.finetune_log[-1].total if o.finetune_log else None,
                })
            out["rows"].append({**r.to_dict(), "tasks": tasks})
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def ablation_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in self.config.rows:
            for o in self.rows[r.name]:
                w.writerow([r.name, *o.reports[r.name].csv_row()])
        return buf.getvalue()


def checkpoint_dict(det: OddOneOutDetector, task: TaskSpec) -> dict:
    m = det.model_
    return {
        "feature_dim": m.feature_dim,
        "n_query": m.n_query,
        "weights": {"W_cls": m.W_cls.tolist(), "W_sup": m.W_sup.tolist(), "W_box": m.W_box.tolist()},
        "biases": {"b_cls": m.b_cls.tolist(), "b_sup": m.b_sup.tolist(), "b_box": m.b_box.tolist()},
        "taskspec_digest": task.digest(),
        "task_id": task.task_id,
        "superclass_map": task.superclass_map.to_config(),
        "tau": det.threshold_.tau if hasattr(det, "threshold_") else None,
        "target_known_fraction": det.target_known_fraction,
        "variant": det.unknown_variant,
        "use_superclass": det.use_superclass,
    }


def model_from_checkpoint(d: Mapping) -> HeadModel:
    try:
        params = {**d["weights"], **d["biases"]}
        return HeadModel(n_query=int(d["n_query"]), **{k: np.asarray(v, dtype=float) for k, v in params.items()})
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed checkpoint: {exc}") from None


def detector_from_checkpoint(d: Mapping, task: TaskSpec | None = None) -> OddOneOutDetector:
    """A fitted detector from :func:`checkpoint_dict` output.

    With ``task`` given, the checkpoint must have been written for it.
    """
    from .core import parse_class_config
    from .scoring import Threshold

    if task is not None and d.get("taskspec_digest") != task.digest():
        raise ConfigError(f"checkpoint was not trained for task {task.task_id}")
    try:
        smap = parse_class_config(d["superclass_map"]).superclass_map
        det = OddOneOutDetector(smap, use_superclass=bool(d["use_superclass"]), unknown_variant=d["variant"],
                                target_known_fraction=float(d.get("target_known_fraction", 0.95)))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed checkpoint: {exc}") from None
    det.model_ = model_from_checkpoint(d)
    det.n_features_in_ = det.model_.feature_dim
    if d.get("tau") is not None:
        det.threshold_ = Threshold(float(d["tau"]), det.target_known_fraction)
    return det


def run_benchmark(config: BenchmarkConfig, out_dir=None, dataset: SynthDataset | None = None,
                  jobs: int = 1) -> BenchmarkResult:
    """Run the task protocol once per distinct training configuration among the rows.

    With ``out_dir`` writes ``<row>/task_<t>/{checkpoint,tau,report}.json``,
    ``ablation.csv`` and ``results.json``. ``jobs > 1`` runs the training
    configurations in worker processes; results do not depend on it.
    """
    dataset = dataset or generate(config.world)
    groups: dict[tuple, list[AblationRow]] = {}
    for r in config.rows:
        groups.setdefault(r.training_key, []).append(r)
    members = list(groups.values())
    if jobs > 1 and len(members) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            sequences = list(pool.map(run_task_sequence, [config] * len(members), [dataset] * len(members), members))
    else:
        sequences = [run_task_sequence(config, dataset, m) for m in members]
    rows: dict[str, list[TaskOutcome]] = {}
    for group, outcomes in zip(members, sequences):
        for r in group:
            rows[r.name] = outcomes
    result = BenchmarkResult(config, rows)
    if out_dir is not None:
        write_results(result, Path(out_dir))
    return result


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name).strip("_") or "row"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_results(result: BenchmarkResult, out: Path) -> list[Path]:
    written = []
    for r in result.config.rows:
        for o in result.rows[r.name]:
            d = out / _slug(r.name) / f"task_{o.task.task_id}"
            ckpt = checkpoint_dict(o.detector, o.task)
            ckpt.update(tau=o.taus[r.name], variant=r.variant)
            files = {
                "checkpoint.json": ckpt,
                "tau.json": {"tau": o.taus[r.name], "variant": r.variant},
                "report.json": o.reports[r.name].to_dict(),
            }
            for name, payload in files.items():
                _write(d / name, json.dumps(payload, sort_keys=True, indent=2))
                written.append(d / name)
    _write(out / "ablation.csv", result.ablation_csv())
    _write(out / "results.json", result.to_json())
    return written + [out / "ablation.csv", out / "results.json"]
