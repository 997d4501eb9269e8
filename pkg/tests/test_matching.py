import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from oddone.core import BBox, QueryOutput
from oddone.exceptions import DimensionMismatch, NonFiniteCost, OddOneError
from oddone.matching import CostWeights, cost_matrix, hungarian, pairwise_cost
from oddone.pseudo import TargetSet

from oracles import brute_force_min


def test_matches_exhaustive_search(rng):
    for _ in range(300):
        n, m = rng.integers(1, 6, size=2)
        cost = rng.normal(size=(n, m)) * 3
        res = hungarian(cost)
        assert len(res.pairs) == min(n, m)
        assert res.total_cost(cost) == pytest.approx(brute_force_min(cost), abs=1e-9)


def test_agrees_with_scipy_on_larger_problems(rng):
    for n, m in [(20, 7), (7, 20), (30, 30), (100, 3)]:
        cost = rng.random((n, m))
        r, c = linear_sum_assignment(cost)
        assert hungarian(cost).total_cost(cost) == pytest.approx(cost[r, c].sum(), abs=1e-9)


def test_unmatched_queries_listed():
    cost = np.array([[1.0], [0.0], [2.0]])
    res = hungarian(cost)
    assert res.pairs == ((1, 0),)
    assert res.unmatched_queries == {0, 2}


def test_empty_and_invalid():
    assert hungarian(np.zeros((3, 0))).unmatched_queries == {0, 1, 2}
    with pytest.raises(NonFiniteCost):
        hungarian(np.array([[np.inf]]))
    with pytest.raises(DimensionMismatch):
        hungarian(np.zeros(3))


def test_cost_terms():
    probs = np.array([[0.8, 0.1], [0.3, 0.6]])
    boxes = np.array([[0.1, 0.1, 0.4, 0.4], [0.5, 0.5, 0.9, 0.9]])
    tboxes = np.array([[0.1, 0.1, 0.4, 0.4], [0.5, 0.5, 0.9, 0.9]])
    c = cost_matrix(probs, boxes, tboxes, np.array([0, -1]))
    assert c[0, 0] == pytest.approx(2 * 0.2)
    assert c[1, 1] == pytest.approx(0.0)  # pseudo target: no class term
    with pytest.raises(DimensionMismatch):
        cost_matrix(probs, boxes, tboxes, np.array([0, 5]))


def test_pairwise_cost_uses_target_set():
    qs = [QueryOutput(np.array([0.9, 0.1]), np.array([0.5, 0.5]), BBox(0, 0, 0.5, 0.5))]
    t = TargetSet(gt=((BBox(0, 0, 0.5, 0.5), 0),), pseudo=(BBox(0.5, 0.5, 1, 1),))
    c = pairwise_cost(qs, t)
    assert c.shape == (1, 2) and c[0, 0] == pytest.approx(0.2)


def test_cost_weight_validation():
    with pytest.raises(OddOneError):
        CostWeights(0, 0, 0)
    with pytest.raises(OddOneError):
        CostWeights(-1, 1, 1)
