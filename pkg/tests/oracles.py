"""Independent reference implementations the package is checked against."""

import itertools

import numpy as np

from oddone.core import BBox
from oddone.geometry import iou

from conftest import random_boxes


def brute_force_min(cost):
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return min(sum(cost[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


def reference_merge(gt, proposals, conf_thr, iou_thr, cap):
    """Straight-line restatement: sort, scan, compare against everything kept so far."""
    order = sorted((p for p in proposals if p.confidence >= conf_thr), key=lambda p: -p.confidence)
    kept_gt = [b for b, _ in gt]
    kept = []
    for p in order:
        if len(kept) == cap:
            break
        if any(iou(p.box, k) >= iou_thr for k in kept_gt + [q.box for q in kept]):
            continue
        kept.append(p)
    return [q.box for q in kept]


def brute_ap(dets, gts, thr=0.5):
    """Precision at every recall level from explicit prefix counts, then the
    upper envelope integrated as a step function over recall."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1].score, i))
    n_gt = sum(len(v) for v in gts.values())
    used = {k: [False] * len(v) for k, v in gts.items()}
    hits = []
    for i in order:
        img, d = dets[i]
        best, best_j = -1.0, None
        for j, g in enumerate(gts.get(img, [])):
            if not used[img][j]:
                v = iou(d.box, g)
                if v > best:
                    best, best_j = v, j
        ok = best_j is not None and best >= thr
        if ok:
            used[img][best_j] = True
        hits.append(ok)
    points = []
    for n in range(1, len(hits) + 1):
        tp = sum(hits[:n])
        points.append((tp / n_gt, tp / n))
    ap, prev_r = 0.0, 0.0
    for r in sorted({r for r, _ in points}):
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in points if rr >= r)
            prev_r = r
    return ap


def grad_batch(seed):
    """A small random model and two-image batch with GT and pseudo targets."""
    from oddone.exceptions import DegenerateBatch
    from oddone.pseudo import TargetSet
    from oddone.toytrain import Batch, HeadModel, _check_nondegenerate, match_batch

    gen = np.random.default_rng(seed)
    while True:
        model = HeadModel.init(5, 3, 3, n_query=4, seed=int(gen.integers(1 << 30)), scale=0.5)
        model.b_cls[:] = gen.normal(size=3)
        model.b_sup[:] = gen.normal(size=3)
        feats, targets = [], []
        for _ in range(2):
            feats.append(gen.normal(size=(4, 5)))
            b = random_boxes(gen, 3, 0.1, 0.4)
            targets.append(TargetSet(gt=tuple((BBox.from_array(x), int(c)) for x, c in zip(b[:2], gen.integers(0, 3, 2))),
                                     pseudo=(BBox.from_array(b[2]),)))
        batch = Batch(feats, targets, np.array([0, 0, 1]))
        batch.matches = match_batch(model, batch)
        try:
            _check_nondegenerate(model, batch, 1e-5)
        except DegenerateBatch:
            continue
        return model, batch
