import numpy as np
import pytest
from sklearn.base import clone

from oddone.estimator import OddOneOutDetector, check_query_features, check_targets, predict_scenes
from oddone.exceptions import ConfigError, DimensionMismatch
from oddone.pseudo import TargetSet
from oddone.toytrain import build_targets


@pytest.fixture(scope="module")
def task1(tiny_world):
    task = tiny_world.task(1)
    smap = task.superclass_map
    cur = [c for c in smap.classes if c in task.current_known]
    X = np.stack([s.query_features for s in tiny_world.train])
    y = build_targets(tiny_world.train, smap.classes, tiny_world.classes, read_classes=cur)
    return task, X, y


@pytest.fixture(scope="module")
def fitted(task1):
    task, X, y = task1
    return OddOneOutDetector(task.superclass_map, epochs=3, lr_drop_epoch=2).fit(X, y)


def test_params_and_clone(smap):
    est = OddOneOutDetector(smap, epochs=5)
    p = est.get_params()
    assert p["epochs"] == 5 and p["superclass_map"] is smap
    c = clone(est)
    assert c.get_params()["epochs"] == 5 and not hasattr(c, "model_")
    assert est.set_params(learning_rate=0.1).learning_rate == 0.1


def test_validation_helpers():
    assert check_query_features(np.zeros((4, 3))).shape == (1, 4, 3)
    with pytest.raises(DimensionMismatch):
        check_query_features(np.zeros((2, 4, 3)), n_features=5)
    with pytest.raises(ValueError):
        check_query_features(np.full((1, 2, 2), np.nan))
    with pytest.raises(DimensionMismatch):
        check_targets([TargetSet()], 2, 3)
    with pytest.raises(TypeError):
        check_targets([None], 1, 3)


def test_fit_requires_map(task1):
    _, X, y = task1
    with pytest.raises(ConfigError):
        OddOneOutDetector().fit(X, y)


def test_transform_and_predict_shapes(fitted, task1, tiny_world):
    task, X, _ = task1
    K = task.superclass_map.n_classes
    T = fitted.transform(X[:3])
    assert T.shape == (3, X.shape[1], K + 1)
    assert np.all((T >= 0) & (T <= 1))
    dets = fitted.predict(X[:2])
    assert len(dets) == 2 and len(dets[0]) == X.shape[1]
    assert all(0 <= d.label <= K for d in dets[0])
    by_id = predict_scenes(fitted, tiny_world.test[:2])
    assert list(by_id) == [s.image_id for s in tiny_world.test[:2]]
    with pytest.raises(DimensionMismatch):
        fitted.predict(X[:1, :, :-1])


def test_fit_is_deterministic(task1, fitted):
    task, X, y = task1
    again = OddOneOutDetector(task.superclass_map, epochs=3, lr_drop_epoch=2).fit(X, y)
    np.testing.assert_array_equal(again.transform(X[:2]), fitted.transform(X[:2]))
    assert again.threshold_ == fitted.threshold_


def test_unknown_decision_uses_threshold(fitted, task1):
    _, X, _ = task1
    K = fitted.superclass_map.n_classes
    u = fitted.transform(X[:4])[..., -1]
    labels = np.array([[d.label for d in img] for img in fitted.predict(X[:4])])
    np.testing.assert_array_equal(labels == K, u > fitted.threshold_.tau)


def test_superclass_off_falls_back_to_max_prob(task1):
    task, X, y = task1
    est = OddOneOutDetector(task.superclass_map, use_superclass=False, epochs=1).fit(X[:10], y[:10])
    T = est.transform(X[:2])
    np.testing.assert_allclose(T[..., -1], 1 - T[..., :-1].max(axis=-1))
