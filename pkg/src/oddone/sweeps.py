"""Parameter sweeps over the benchmark: pseudo-label count, proposal source, superclass grouping."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

from .continual import AblationRow, BenchmarkConfig, run_benchmark
from .core import GROUPINGS, TaskSpec, load_grouping
from .exceptions import ConfigError
from .pseudo import SOURCES, PseudoConfig
from .synthworld import SynthDataset, WorldConfig, generate

DEFAULT_COUNTS = (1, 5, 20, 50)
FULL_ROW = AblationRow("+pseudo+superclass", pseudo=True, superclass=True, no_object=False)

# Held-out classes of the grouping world: one per superclass with room to spare.
GROUP_HOLDOUT = ("giraffe", "truck", "boat")


@dataclass(frozen=True)
class SweepPoint:
    parameter: str
    value: object
    task_id: int
    u_recall: float | None
    map_both: float | None
    map_current: float | None
    map_prev: float | None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _point(parameter, value, result, row: str, task_id: int) -> SweepPoint:
    r = result.report(row, task_id)
    return SweepPoint(parameter, value, task_id, r.u_recall, r.map_both, r.map_current, r.map_prev)


def _single(config: BenchmarkConfig, row: AblationRow) -> BenchmarkConfig:
    task_ids = config.task_ids[:1] if config.task_ids else (1,)
    return replace(config, rows=(row,), task_ids=task_ids)


def _run_one(args):
    parameter, value, config, dataset = args
    result = run_benchmark(config, dataset=dataset)
    return _point(parameter, value, result, config.rows[0].name, config.task_ids[0])


def _map(jobs: int, work: list) -> list[SweepPoint]:
    if jobs <= 1 or len(work) <= 1:
        return [_run_one(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, work))


def sweep_pseudo_count(config: BenchmarkConfig, counts: Sequence[int] = DEFAULT_COUNTS,
                       row: AblationRow = FULL_ROW, jobs: int = 1) -> list[SweepPoint]:
    """One single-task run per pseudo-label cap; everything else fixed."""
    if not row.pseudo:
        raise ConfigError("a pseudo-count sweep needs a row with pseudo-labels on")
    base = _single(config, row)
    dataset = generate(base.world)
    work = [("pseudo_cap", int(c), replace(base, pseudo=replace(base.pseudo, cap=int(c))), dataset) for c in counts]
    return _map(jobs, work)


def sweep_source(config: BenchmarkConfig, sources: Sequence[str] = SOURCES,
                 row: AblationRow = FULL_ROW, jobs: int = 1) -> list[SweepPoint]:
    """One single-task run per proposal-source preset."""
    base = _single(config, row)
    dataset = generate(base.world)
    work = [
        ("source", s, replace(base, pseudo=replace(base.pseudo, source=s, noise=None)), dataset)
        for s in sources
    ]
    return _map(jobs, work)


def grouping_world(world: WorldConfig, holdout: Sequence[str] = GROUP_HOLDOUT, generator: str = "D") -> WorldConfig:
    """A world over the bundled task-1 classes, laid out by grouping ``generator``.

    The ``holdout`` classes never become known and serve as unknown objects.
    """
    cfg = load_grouping("sowod", generator).superclass_map.to_config()
    missing = set(holdout) - set(cfg["classes"])
    if missing:
        raise ConfigError(f"holdout classes {sorted(missing)} are not in the grouping")
    known = [c for c in cfg["classes"] if c not in holdout]
    cfg["tasks"] = [{"id": 1, "current_known": known}]
    return replace(world, classes=cfg)


def grouping_task(dataset: SynthDataset, group: str) -> TaskSpec:
    task = dataset.task(1)
    smap = load_grouping("sowod", group).superclass_map.restrict(task.known)
    return TaskSpec(1, frozenset(), task.current_known, smap)


def sweep_groups(config: BenchmarkConfig, groups: Sequence[str] = GROUPINGS, row: AblationRow = FULL_ROW,
                 holdout: Sequence[str] = GROUP_HOLDOUT, jobs: int = 1) -> list[SweepPoint]:
    """Train with each bundled superclass grouping on one grouping world."""
    base = _single(replace(config, world=grouping_world(config.world, holdout), task_ids=(1,)), row)
    dataset = generate(base.world)
    work = [("grouping", g, base, replace(dataset, tasks=(grouping_task(dataset, g),))) for g in groups]
    return _map(jobs, work)


SWEEPS: dict[str, Callable[..., list[SweepPoint]]] = {
    "pseudo-count": sweep_pseudo_count,
    "source": sweep_source,
    "groups": sweep_groups,
}


def points_to_csv(points: Sequence[SweepPoint]) -> str:
    buf = io.StringIO()
    cols = list(SweepPoint.__dataclass_fields__)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for p in points:
        w.writerow(["" if v is None else (f"{100 * v:.2f}" if isinstance(v, float) else v) for v in (getattr(p, c) for c in cols)])
    return buf.getvalue()


def points_to_json(points: Sequence[SweepPoint]) -> str:
    return json.dumps([p.to_dict() for p in points], sort_keys=True, indent=2)


COUNT_SWEEP_QUERIES = 100


def count_sweep_config(seed: int = 0) -> BenchmarkConfig:
    """The pseudo-count sweep setup: a proposal-heavy source, 100 queries per image.

    With the default 20 queries a cap of 20 would leave no query unmatched,
    and the unknown superclass slot would get no training signal at all.
    """
    world = replace(WorldConfig(), n_query=COUNT_SWEEP_QUERIES)
    return BenchmarkConfig(world=world, pseudo=PseudoConfig(source="dense"), task_ids=(1,), seed=seed)
