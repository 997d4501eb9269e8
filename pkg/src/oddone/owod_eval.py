"""Open-world evaluation: known-class AP@0.5 splits and unknown recall."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import UNKNOWN_NAME, BBox, Detection, TaskSpec
from .exceptions import DuplicateImageId, UnknownClassInPredictions
from .geometry import iou_matrix, priority_order

IOU_THR = 0.5


def _greedy_match(det_image, det_boxes, scores, gt_by_image, iou_thr):
    """TP flags for detections taken in score order against per-image GT."""
    order = priority_order(scores)
    used = {img: np.zeros(len(b), dtype=bool) for img, b in gt_by_image.items()}
    tp = np.zeros(order.size, dtype=bool)
    for rank, d in enumerate(order):
        gts = gt_by_image.get(det_image[d])
        if gts is None or len(gts) == 0:
            continue
        ious = iou_matrix(det_boxes[d], gts)[0]
        ious[used[det_image[d]]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_thr:
            used[det_image[d]][best] = True
            tp[rank] = True
    return tp, used


def average_precision(
    dets: Sequence[tuple[object, Detection]],
    gts: Mapping[object, Sequence[BBox]],
    iou_thr: float = IOU_THR,
) -> float | None:
    """All-point interpolated AP for one class.

    ``dets`` are ``(image_id, detection)`` pairs, ``gts`` maps image ids to
    the class's ground-truth boxes. Returns ``None`` when there is no GT.
    """
    gt_arrays = {img: np.array([b.as_list() for b in bs]).reshape(-1, 4) for img, bs in gts.items()}
    n_gt = sum(len(b) for b in gt_arrays.values())
    if n_gt == 0:
        return None
    if not dets:
        return 0.0
    det_image = [img for img, _ in dets]
    det_boxes = np.array([d.box.as_list() for _, d in dets])
    scores = np.array([d.score for _, d in dets])
    tp, _ = _greedy_match(det_image, det_boxes, scores, gt_arrays, iou_thr)
    return _ap_from_tp(tp, n_gt)


def _ap_from_tp(tp: np.ndarray, n_gt: int) -> float:
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalReport:
    task_id: int
    per_class_ap: dict[str, float]
    map_prev: float | None
    map_current: float | None
    map_both: float | None
    u_recall: float | None
    unknown_matched: int
    unknown_total: int
    gt_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "u_recall": self.u_recall,
            "map_prev": self.map_prev,
            "map_current": self.map_current,
            "map_both": self.map_both,
            "per_class_ap": dict(self.per_class_ap),
            "counts": {
                "unknown_matched": self.unknown_matched,
                "unknown_total": self.unknown_total,
                "gt": dict(self.gt_counts),
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    CSV_COLUMNS = ("task", "u_recall", "map_prev", "map_current", "map_both")

    def csv_row(self) -> list:
        pct = lambda v: "" if v is None else f"{100 * v:.2f}"
        return [self.task_id, pct(self.u_recall), pct(self.map_prev), pct(self.map_current), pct(self.map_both)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        w.writerow(self.csv_row())
        return buf.getvalue()


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _check_unique(ids, what):
    seen = set()
    for i in ids:
        if i in seen:
            raise DuplicateImageId(f"{what} contains image id {i!r} more than once")
        seen.add(i)


def evaluate(
    predictions: Mapping[object, Sequence[Detection]] | Sequence[tuple[object, Sequence[Detection]]],
    scenes,
    task: TaskSpec,
    world_classes: Sequence[str],
    top_k_per_image: int = 100,
    iou_thr: float = IOU_THR,
) -> EvalReport:
    """Evaluate per-image detections against every object of ``scenes``.

    Objects of classes outside the task's known set are unknown ground truth.
    Only detections labelled unknown can recall them; known-labelled
    detections are scored class-wise against known ground truth.
    """
    _check_unique([s.image_id for s in scenes], "dataset")
    if isinstance(predictions, Mapping):
        pred_items = list(predictions.items())
    else:
        pred_items = list(predictions)
        _check_unique([i for i, _ in pred_items], "predictions")
    # canonical image order so score ties do not depend on input order
    pred_items.sort(key=lambda item: (type(item[0]).__name__, item[0]))
    known = task.known
    K = len(known)
    known_world = {world_classes.index(c): i for i, c in enumerate(known)}

    gt_known: dict[int, dict[object, list[BBox]]] = {k: {} for k in range(K)}
    gt_unknown: dict[object, np.ndarray] = {}
    for s in scenes:
        unk = []
        for b, c in zip(s.boxes, s.classes):
            if int(c) in known_world:
                gt_known[known_world[int(c)]].setdefault(s.image_id, []).append(BBox.from_array(b))
            else:
                unk.append(b)
        gt_unknown[s.image_id] = np.array(unk, dtype=float).reshape(-1, 4)

    per_class: dict[int, list[tuple[object, Detection]]] = {k: [] for k in range(K)}
    unk_img, unk_boxes, unk_scores = [], [], []
    for image_id, dets in pred_items:
        dets = list(dets)
        for d in dets:
            if not 0 <= d.label <= K:
                raise UnknownClassInPredictions(f"label {d.label} is not valid for task {task.task_id}")
        scores = np.array([d.score for d in dets])
        for i in priority_order(scores)[:top_k_per_image] if dets else []:
            d = dets[i]
            if d.label == K:
                unk_img.append(image_id)
                unk_boxes.append(d.box.as_list())
                unk_scores.append(d.score)
            else:
                per_class[d.label].append((image_id, d))

    aps = {known[k]: average_precision(per_class[k], gt_known[k], iou_thr) for k in range(K)}
    per_class_ap = {c: v for c, v in aps.items() if v is not None}
    n_unknown = sum(len(b) for b in gt_unknown.values())
    matched = 0
    if n_unknown and unk_scores:
        _, used = _greedy_match(unk_img, np.array(unk_boxes), np.array(unk_scores), gt_unknown, iou_thr)
        matched = int(sum(u.sum() for u in used.values()))
    return EvalReport(
        task_id=task.task_id,
        per_class_ap=per_class_ap,
        map_prev=_mean(per_class_ap.get(c) for c in known if c in task.previously_known),
        map_current=_mean(per_class_ap.get(c) for c in known if c in task.current_known),
        map_both=_mean(per_class_ap.values()),
        u_recall=matched / n_unknown if n_unknown else None,
        unknown_matched=matched,
        unknown_total=n_unknown,
        gt_counts={known[k]: sum(len(v) for v in gt_known[k].values()) for k in range(K)},
    )


def detections_to_jsonl(predictions, task: TaskSpec) -> str:
    lines = []
    for image_id, dets in (predictions.items() if isinstance(predictions, Mapping) else predictions):
        for d in dets:
            lines.append(
                json.dumps({"image_id": image_id, "label": task.label_name(d.label), "box": d.box.as_list(), "score": d.score})
            )
    return "\n".join(lines) + ("\n" if lines else "")


def detections_from_jsonl(text: str, task: TaskSpec) -> dict[object, list[Detection]]:
    """Parse ``{image_id, label, box, score}`` lines; ``"unknown"`` is the unknown label."""
    out: dict[object, list[Detection]] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        name = rec["label"]
        if name == UNKNOWN_NAME:
            label = task.unknown_label
        elif name in task.known:
            label = task.known.index(name)
        else:
            raise UnknownClassInPredictions(f"label {name!r} is neither known in task {task.task_id} nor unknown")
        out.setdefault(rec["image_id"], []).append(Detection(BBox.from_array(rec["box"]), label, float(rec["score"])))
    return out
