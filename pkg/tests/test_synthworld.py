from dataclasses import replace

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from oddone.exceptions import ConfigError, DuplicateImageId
from oddone.synthworld import WorldConfig, digest, generate, load, save, to_coco


def _small(**kw):
    return WorldConfig(n_train=12, n_test=8, **kw)


def test_same_seed_gives_identical_files(tmp_path):
    save(generate(_small(seed=4)), tmp_path / "a")
    save(generate(_small(seed=4)), tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    save(generate(_small(seed=5)), tmp_path / "c")
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


def test_save_load_round_trip(tmp_path):
    ds = generate(_small(seed=1))
    back = load(save(ds, tmp_path))
    assert back.config == ds.config
    assert [t.digest() for t in back.tasks] == [t.digest() for t in ds.tasks]
    for a, b in zip(ds.train + ds.test, back.train + back.test):
        assert a.image_id == b.image_id and a.split == b.split
        np.testing.assert_array_equal(a.boxes, b.boxes)
        np.testing.assert_array_equal(a.classes, b.classes)
        np.testing.assert_array_equal(a.annotated, b.annotated)
        np.testing.assert_array_equal(a.query_features, b.query_features)
        np.testing.assert_array_equal(a.query_object, b.query_object)
        np.testing.assert_array_equal(a.clutter_boxes, b.clutter_boxes)


def test_duplicate_ids_rejected_on_load(tmp_path):
    import json
    out = save(generate(_small()), tmp_path)
    coco = json.loads((out / "dataset.json").read_text())
    coco["images"].append(dict(coco["images"][0]))
    (out / "dataset.json").write_text(json.dumps(coco))
    with pytest.raises(DuplicateImageId):
        load(out)


def test_noise_free_objects_sit_on_prototypes():
    ds = generate(_small(noise_sigma=0.0, objects_per_image=(1, 1)))
    d = ds.config.feature_dim
    for s in ds.train:
        (q,) = np.flatnonzero(s.query_object >= 0)
        np.testing.assert_array_equal(s.query_features[q, :d], ds.prototypes[s.classes[0]])


def test_superclass_clusters():
    ds = generate(WorldConfig(n_train=0, n_test=0, class_offset=1.0))
    p, a = ds.prototypes, ds.superclass_map.assignment_array
    dist = np.linalg.norm(p[:, None] - p[None], axis=-1)
    same = dist[(a[:, None] == a[None]) & ~np.eye(len(a), dtype=bool)]
    diff = dist[a[:, None] != a[None]]
    assert same.mean() < diff.mean()


def test_unknown_classes_unannotated_in_train_only():
    ds = generate(_small(unknown_ids=("bear",)))
    bear = ds.classes.index("bear")
    for s in ds.train:
        assert not s.annotated[s.classes == bear].any()
    assert all(s.annotated.all() for s in ds.test)
    ids = [s.image_id for s in ds.train + ds.test]
    assert len(set(ids)) == len(ids)


def test_coco_boxes_are_xywh():
    ds = generate(_small())
    coco = to_coco(ds)
    s, ann = ds.train[0], coco["annotations"][0]
    x1, y1, x2, y2 = s.boxes[0]
    assert ann["bbox"] == [x1, y1, x2 - x1, y2 - y1]
    assert {c["supercategory"] for c in coco["categories"]} == {"animal", "vehicle", "furniture"}


def _probe_accuracy(scale):
    cfg = WorldConfig(n_train=150, n_test=0, noise_sigma=1.0, seed=2,
                      superclass_separation=3.0 * scale, class_offset=2.5 * scale)
    ds = generate(cfg)
    d = cfg.feature_dim
    X = np.concatenate([s.query_features[s.query_object >= 0, :d] for s in ds.train])
    y = np.concatenate([s.classes[s.query_object[s.query_object >= 0]] for s in ds.train])
    return LogisticRegression(max_iter=2000).fit(X, y).score(X, y)


def test_separation_raises_probe_accuracy():
    acc = [_probe_accuracy(s) for s in (0.2, 0.5, 1.0)]
    assert acc[0] < acc[1] < acc[2]


def test_config_validation():
    with pytest.raises(ConfigError):
        WorldConfig(n_query=1)
    assert WorldConfig.from_dict(_small().to_dict()) == _small()
