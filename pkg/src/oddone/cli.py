"""Command-line entry point, COCO ingestion and run manifests."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .continual import (
    BenchmarkConfig, TaskView, _targets, checkpoint_dict, config_digest, detector_from_checkpoint,
    load_benchmark_config, run_benchmark, select_exemplars, task_seed, write_results,
)
from .core import BBox, TaskSpec, tasks_from_config, validate_superclass_map
from .estimator import OddOneOutDetector, predict_scenes
from .exceptions import ConfigError, DuplicateImageId, MissingSupercategory, OddOneError, ParseError
from .owod_eval import detections_from_jsonl, detections_to_jsonl, evaluate
from .pseudo import PRESETS, PseudoConfig
from .scoring import UnknownVariant
from .synthworld import Scene, WorldConfig, generate, load, save
from . import sweeps

logger = logging.getLogger("oddone")

SEED_ENV = "O1O_SEED"


# -- COCO ingestion ----------------------------------------------------------


@dataclass
class CocoDataset:
    """Annotations of a COCO-style file; scenes carry no query features."""

    scenes: list[Scene]
    superclass_map: object
    tasks: tuple[TaskSpec, ...]

    @property
    def classes(self) -> tuple[str, ...]:
        return self.superclass_map.classes


def read_coco_annotations(path) -> CocoDataset:
    """Parse images, annotations and categories; every category needs a supercategory.

    Boxes are converted from ``[x, y, w, h]`` to corners. Repeated image ids
    raise :class:`DuplicateImageId`.
    """
    try:
        coco = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path} is not valid JSON: {exc}") from None
    try:
        images, annotations, categories = coco["images"], coco["annotations"], coco["categories"]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path} is missing field {exc}") from None

    ids = [img["id"] for img in images]
    seen: set = set()
    for i in ids:
        if i in seen:
            raise DuplicateImageId(f"image id {i!r} appears more than once in {path}")
        seen.add(i)

    cats = sorted(categories, key=lambda c: c["id"])
    for c in cats:
        if not c.get("supercategory"):
            raise MissingSupercategory(f"category {c.get('name')!r} has no supercategory")
    names = [c["name"] for c in cats]
    smap = validate_superclass_map(names, {c["name"]: c["supercategory"] for c in cats})
    index_of = {c["id"]: smap.classes.index(c["name"]) for c in cats}
    tasks = tasks_from_config(smap, coco.get("tasks") or [{"id": 1, "current_known": names}])

    by_image: dict = {i: [] for i in ids}
    for ann in annotations:
        if ann.get("image_id") not in by_image:
            raise ParseError(f"annotation {ann.get('id')!r} refers to unknown image {ann.get('image_id')!r}")
        if ann.get("category_id") not in index_of:
            raise ParseError(f"annotation {ann.get('id')!r} has unknown category {ann.get('category_id')!r}")
        by_image[ann["image_id"]].append(ann)
    scenes = []
    for img in images:
        anns = by_image[img["id"]]
        try:
            boxes = [BBox.from_xywh(*a["bbox"]).as_list() for a in anns]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad bbox in image {img['id']!r}: {exc}") from None
        scenes.append(Scene(
            image_id=img["id"],
            boxes=np.array(boxes, dtype=float).reshape(-1, 4),
            classes=np.array([index_of[a["category_id"]] for a in anns], dtype=int),
            annotated=np.array([a.get("annotated", True) for a in anns], dtype=bool),
            query_features=np.zeros((0, 0)),
            query_object=np.zeros(0, dtype=int),
            split=img.get("split", "test"),
        ))
    return CocoDataset(scenes, smap, tasks)


# -- manifests ---------------------------------------------------------------


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    tool_version: str = __version__
    started: str = field(default_factory=_now)
    finished: str | None = None
    outputs: list[str] = field(default_factory=list)

    @property
    def config_digest(self) -> str:
        return config_digest(self.config)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "timestamps": {"started": self.started, "finished": self.finished},
            "outputs": sorted(self.outputs),
        }

    def write(self, path) -> Path:
        return atomic_write(path, json.dumps(self.to_dict(), sort_keys=True, indent=2))


# -- helpers -----------------------------------------------------------------


def resolve_seed(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path} is not valid JSON: {exc}") from None


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write(out, text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _task_training(ds, task: TaskSpec, pseudo: PseudoConfig | None, seed: int):
    view = TaskView(ds.train, task.current_known)
    X = np.stack([v.query_features for v in view])
    return X, _targets(view, None, task, ds.classes, pseudo, seed)


def _calibration_subset(X, y, fraction: float, seed: int, task_id: int):
    n = X.shape[0]
    k = min(n, max(1, math.ceil(fraction * n)))
    idx = np.sort(np.random.default_rng(task_seed(seed, task_id, 4)).choice(n, size=k, replace=False))
    return X[idx], [y[i] for i in idx]


def _pseudo_from_args(args) -> PseudoConfig | None:
    if args.no_pseudo:
        return None
    return PseudoConfig(source=args.source, cap=args.pseudo_cap)


def _benchmark_config(args, seed: int) -> BenchmarkConfig:
    cfg = load_benchmark_config(args.config) if args.config else BenchmarkConfig()
    cfg = replace(cfg, seed=seed, world=replace(cfg.world, seed=seed))
    if getattr(args, "unknown_variant", None):
        cfg = replace(cfg, rows=tuple(replace(r, variant=args.unknown_variant) for r in cfg.rows))
    return cfg


# -- commands ----------------------------------------------------------------


def cmd_gen(args, seed):
    base = WorldConfig.from_dict(_read_json(args.config)) if args.config else WorldConfig()
    overrides = {k: getattr(args, k) for k in ("n_train", "n_test", "n_query") if getattr(args, k) is not None}
    world = replace(base, seed=seed, **overrides)
    manifest = RunManifest("gen", world.to_dict(), seed)
    out = Path(args.out)
    manifest.write(out / "manifest.json")
    save(generate(world), out)
    manifest.outputs = [str(out / n) for n in ("dataset.json", "features.bin", "features.json")]
    manifest.finished = _now()
    manifest.write(out / "manifest.json")
    print(json.dumps({"out": str(out), "images": world.n_train + world.n_test}))


def cmd_train(args, seed):
    ds = load(args.data)
    task = ds.task(args.task)
    pseudo = _pseudo_from_args(args)
    X, y = _task_training(ds, task, pseudo, seed)
    kw = {"epochs": args.epochs} if args.epochs else {}
    det = OddOneOutDetector(
        task.superclass_map, use_superclass=not args.no_superclass,
        no_object=args.no_object, unknown_variant=args.unknown_variant or "sum-recal-thr",
        random_state=task_seed(seed, task.task_id), **kw,
    ).fit(X, y)
    det.calibrate(*_calibration_subset(X, y, det.calibration_fraction, seed, task.task_id))
    ckpt = checkpoint_dict(det, task)
    ckpt["training"] = {"pseudo": None if pseudo is None else pseudo.to_dict(), "seed": seed,
                        "final_loss": det.train_log_[-1].total}
    _emit(json.dumps(ckpt, sort_keys=True), args.out)


def _load_detector(args, task):
    det = detector_from_checkpoint(_read_json(args.model), task)
    if getattr(args, "unknown_variant", None):
        det.set_params(unknown_variant=args.unknown_variant)
    return det


def cmd_calibrate(args, seed):
    ds = load(args.data)
    task = ds.task(args.task)
    det = _load_detector(args, task)
    X, y = _task_training(ds, task, None, seed)
    det.calibrate(*_calibration_subset(X, y, args.fraction, seed, task.task_id))
    out = {"tau": det.threshold_.tau, "variant": det.unknown_variant,
           "calibration_size": det.threshold_.calibration_size,
           "target_known_fraction": det.threshold_.target_known_fraction}
    if args.update:
        ckpt = _read_json(args.model)
        ckpt.update(tau=det.threshold_.tau, variant=det.unknown_variant)
        atomic_write(args.model, json.dumps(ckpt, sort_keys=True))
    _emit(json.dumps(out, sort_keys=True, indent=2), args.out)


def cmd_predict(args, seed):
    ds = load(args.data)
    task = ds.task(args.task)
    det = _load_detector(args, task)
    preds = predict_scenes(det, ds.split(args.split))
    _emit(detections_to_jsonl(preds, task), args.out)


def cmd_eval(args, seed):
    if bool(args.data) == bool(args.coco):
        raise ConfigError("give exactly one of --data or --coco")
    if args.coco:
        ds = read_coco_annotations(args.coco)
        scenes, classes = ds.scenes, ds.classes
        task = next((t for t in ds.tasks if t.task_id == args.task), None)
        if task is None:
            raise ConfigError(f"no task {args.task} in {args.coco}")
    else:
        ds = load(args.data)
        scenes, classes, task = ds.split(args.split), ds.classes, ds.task(args.task)
    if bool(args.pred) == bool(args.model):
        raise ConfigError("give exactly one of --pred or --model")
    if args.pred:
        try:
            text = Path(args.pred).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {args.pred}: {exc}") from None
        try:
            preds = detections_from_jsonl(text, task)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"{args.pred}: {exc}") from None
    else:
        if args.coco:
            raise ConfigError("--model needs query features; use --data")
        preds = predict_scenes(_load_detector(args, task), scenes)
    report = evaluate(preds, scenes, task, classes, args.top_k)
    if args.csv:
        atomic_write(args.csv, report.to_csv())
    _emit(report.to_json(), args.out)


def cmd_select_exemplars(args, seed):
    ds = load(args.data)
    task = ds.task(args.task)
    det = _load_detector(args, task)
    view = TaskView(ds.train, task.current_known)
    store = select_exemplars(det.model_, view, task, args.per_class, args.budget,
                             task_seed(seed, task.task_id, 3), ds.classes, det.use_superclass)
    _emit(json.dumps(store.to_dict(), sort_keys=True, indent=2), args.out)


def cmd_run_benchmark(args, seed):
    cfg = _benchmark_config(args, seed)
    out = Path(args.out)
    manifest = RunManifest("run-benchmark", cfg.to_dict(), seed)
    manifest.write(out / "manifest.json")
    result = run_benchmark(cfg, jobs=args.jobs)
    manifest.outputs = [str(p) for p in write_results(result, out)]
    manifest.finished = _now()
    manifest.write(out / "manifest.json")
    sys.stdout.write(result.ablation_csv())


def _sweep(name: str, extra):
    def run(args, seed):
        if args.config:
            cfg = _benchmark_config(args, seed)
        else:
            base = sweeps.count_sweep_config(seed) if name == "pseudo-count" else BenchmarkConfig(seed=seed)
            cfg = replace(base, world=replace(base.world, seed=seed))
        kwargs = extra(args)
        out = Path(args.out)
        manifest = RunManifest(f"sweep-{name}", {"benchmark": cfg.to_dict(), "sweep": kwargs}, seed)
        manifest.write(out / "manifest.json")
        points = sweeps.SWEEPS[name](cfg, jobs=args.jobs, **kwargs)
        csv_text = sweeps.points_to_csv(points)
        manifest.outputs = [str(atomic_write(out / "sweep.json", sweeps.points_to_json(points))),
                            str(atomic_write(out / "sweep.csv", csv_text))]
        manifest.finished = _now()
        manifest.write(out / "manifest.json")
        sys.stdout.write(csv_text)
    return run


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("counts must be non-negative")
    return values


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oddone", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"run seed (default: ${SEED_ENV} or 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")
    variant = argparse.ArgumentParser(add_help=False)
    variant.add_argument("--unknown-variant", choices=[v.value for v in UnknownVariant], default=None)
    task = argparse.ArgumentParser(add_help=False)
    task.add_argument("--data", required=True, help="dataset directory written by `gen`")
    task.add_argument("--task", type=int, required=True)
    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", required=True, help="checkpoint JSON written by `train`")
    out = argparse.ArgumentParser(add_help=False)
    out.add_argument("--out", default=None, help="output file (default: stdout)")

    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="world config JSON")
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--n-query", type=int)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train", parents=[common, variant, task, out], help="train one task's heads")
    s.add_argument("--no-pseudo", action="store_true")
    s.add_argument("--no-superclass", action="store_true")
    s.add_argument("--no-object", action=argparse.BooleanOptionalAction, default=None,
                   help="supervise unmatched queries as background (default: only without superclasses)")
    s.add_argument("--source", choices=sorted(PRESETS), default="normals")
    s.add_argument("--pseudo-cap", type=int, default=20)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("calibrate", parents=[common, variant, task, model, out], help="recalibrate tau")
    s.add_argument("--fraction", type=float, default=0.1)
    s.add_argument("--update", action="store_true", help="write tau back into the checkpoint")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("predict", parents=[common, variant, task, model, out], help="write detections as JSONL")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", parents=[common, variant, out], help="evaluate detections")
    s.add_argument("--data")
    s.add_argument("--coco", help="COCO-style annotation file instead of --data")
    s.add_argument("--task", type=int, required=True)
    s.add_argument("--pred", help="detections JSONL")
    s.add_argument("--model", help="checkpoint to predict with instead of --pred")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--top-k", type=int, default=100)
    s.add_argument("--csv", help="also write a one-row CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("select-exemplars", parents=[common, task, model, out], help="pick replay images")
    s.add_argument("--per-class", type=int, default=25)
    s.add_argument("--budget", type=int, default=20)
    s.set_defaults(func=cmd_select_exemplars)

    s = sub.add_parser("run-benchmark", parents=[common, variant], help="run the task protocol and ablation")
    s.add_argument("--config", help="benchmark config JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run_benchmark)

    sweep_defs = {
        "pseudo-count": (lambda sp: sp.add_argument("--counts", type=_int_list, default=sweeps.DEFAULT_COUNTS),
                         lambda a: {"counts": a.counts}),
        "source": (lambda sp: sp.add_argument("--sources", type=_str_list, default=sweeps.SOURCES),
                   lambda a: {"sources": a.sources}),
        "groups": (lambda sp: sp.add_argument("--groups", type=_str_list, default=sweeps.GROUPINGS),
                   lambda a: {"groups": a.groups}),
    }
    for name, (add, extra) in sweep_defs.items():
        s = sub.add_parser(f"sweep-{name}", parents=[common], help=f"{name} sweep")
        s.add_argument("--config", help="benchmark config JSON")
        s.add_argument("--out", required=True)
        add(s)
        s.set_defaults(func=_sweep(name, extra))
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        args.func(args, resolve_seed(args.seed))
    except (OddOneError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
