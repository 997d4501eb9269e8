import json
from pathlib import Path

import numpy as np
import pytest

from oddone.cli import RunManifest, main, read_coco_annotations, resolve_seed
from oddone.exceptions import ConfigError, DuplicateImageId, MissingSupercategory, ParseError

FIX = Path(__file__).parent / "fixtures"


def test_coco_boxes_converted_to_corners():
    ds = read_coco_annotations(FIX / "coco_small.json")
    s = ds.scenes[0]
    assert s.image_id == 7
    np.testing.assert_array_equal(s.boxes, [[10, 20, 40, 60]])
    assert ds.superclass_map.superclass_name_of(ds.classes.index("zebra")) == "animal"
    assert ds.tasks[0].known == ("cat", "car")


def test_coco_duplicate_ids():
    with pytest.raises(DuplicateImageId, match="7"):
        read_coco_annotations(FIX / "coco_duplicate_ids.json")


def test_coco_missing_supercategory():
    with pytest.raises(MissingSupercategory):
        read_coco_annotations(FIX / "coco_missing_supercategory.json")


def test_coco_malformed(tmp_path):
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(ParseError):
        read_coco_annotations(tmp_path / "x.json")
    (tmp_path / "y.json").write_text('{"images": []}')
    with pytest.raises(ParseError):
        read_coco_annotations(tmp_path / "y.json")


def test_seed_resolution(monkeypatch):
    monkeypatch.delenv("O1O_SEED", raising=False)
    assert resolve_seed(None) == 0
    monkeypatch.setenv("O1O_SEED", "9")
    assert resolve_seed(None) == 9
    assert resolve_seed(3) == 3
    monkeypatch.setenv("O1O_SEED", "x")
    with pytest.raises(ConfigError):
        resolve_seed(None)


def test_manifest_digest_ignores_key_order():
    a = RunManifest("gen", {"a": 1, "b": {"c": 2, "d": 3}}, 0)
    b = RunManifest("gen", {"b": {"d": 3, "c": 2}, "a": 1}, 0)
    assert a.config_digest == b.config_digest


def test_exit_codes(capsys, tmp_path):
    assert main(["no-such-command"]) == 2
    code = main(["eval", "--coco", str(FIX / "coco_duplicate_ids.json"), "--task", "1",
                 "--pred", str(tmp_path / "p.jsonl")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err == {"command": "eval", "error": "DuplicateImageId", "message": err["message"]}


def test_eval_on_coco(tmp_path, capsys):
    pred = tmp_path / "p.jsonl"
    pred.write_text('{"image_id": 7, "label": "cat", "box": [10, 20, 40, 60], "score": 0.9}\n'
                    '{"image_id": 8, "label": "unknown", "box": [50, 50, 70, 70], "score": 0.8}\n')
    assert main(["eval", "--coco", str(FIX / "coco_small.json"), "--task", "1", "--pred", str(pred),
                 "--csv", str(tmp_path / "r.csv")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["u_recall"] == 1.0 and report["per_class_ap"] == {"cat": 1.0}
    assert (tmp_path / "r.csv").read_text().splitlines()[1] == "1,100.00,,100.00,100.00"


def test_gen_train_predict_eval_pipeline(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("O1O_SEED", "5")
    data, ckpt, pred = tmp_path / "data", tmp_path / "ckpt.json", tmp_path / "pred.jsonl"
    assert main(["gen", "--out", str(data), "--n-train", "20", "--n-test", "10"]) == 0
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["timestamps"]["finished"]
    assert main(["train", "--data", str(data), "--task", "1", "--epochs", "2", "--out", str(ckpt)]) == 0
    assert main(["calibrate", "--data", str(data), "--task", "1", "--model", str(ckpt), "--update"]) == 0
    assert main(["predict", "--data", str(data), "--task", "1", "--model", str(ckpt), "--out", str(pred)]) == 0
    assert len(pred.read_text().splitlines()) == 10 * 20
    capsys.readouterr()
    assert main(["eval", "--data", str(data), "--task", "1", "--pred", str(pred)]) == 0
    assert "map_both" in json.loads(capsys.readouterr().out)
    assert main(["select-exemplars", "--data", str(data), "--task", "1", "--model", str(ckpt),
                 "--budget", "4"]) == 0
    assert len(json.loads(capsys.readouterr().out)["images"]) <= 4
    # a checkpoint trained for task 1 is refused for task 2
    assert main(["predict", "--data", str(data), "--task", "2", "--model", str(ckpt)]) == 1
