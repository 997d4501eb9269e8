import pytest

from oddone.core import (
    GROUPINGS, UNKNOWN_SUPERCLASS, BBox, SuperclassMap, TaskSpec, load_grouping, parse_class_config,
    validate_superclass_map, write_class_config,
)
from oddone.exceptions import ConfigError, EmptyClassSet, MissingAssignment, OddOneError, UnknownClassId


def test_bbox_conversions_round_trip():
    b = BBox.from_xywh(10, 20, 30, 40)
    assert b.as_list() == [10, 20, 40, 60]
    assert BBox.from_cxcywh(*b.to_cxcywh()) == b
    assert b.to_xywh() == (10, 20, 30, 40)
    assert b.area == 1200


@pytest.mark.parametrize("coords", [(0, 0, 0, 1), (0.5, 0, 0.2, 1), (0, 0, float("nan"), 1)])
def test_bbox_rejects_degenerate(coords):
    with pytest.raises(OddOneError):
        BBox(*coords)


def test_map_appends_reserved_slot(smap):
    assert smap.superclasses == ("animal", "vehicle", "furniture", UNKNOWN_SUPERCLASS)
    assert smap.n_superclasses == 4 and smap.unknown_index == 3
    assert smap.superclass_of("bus") == 1
    assert smap.members("animal") == (0, 1)
    assert smap.class_index(4) == 4


def test_map_errors():
    with pytest.raises(EmptyClassSet):
        validate_superclass_map([], {})
    with pytest.raises(MissingAssignment):
        validate_superclass_map(["a", "b"], {"a": "x"})
    with pytest.raises(UnknownClassId):
        validate_superclass_map(["a"], {"a": "x", "zzz": "y"})
    with pytest.raises(ConfigError):
        validate_superclass_map(["a"], {"a": UNKNOWN_SUPERCLASS})
    with pytest.raises(ConfigError):
        SuperclassMap(("a",), ("x", "y", UNKNOWN_SUPERCLASS), (0,))


def test_partial_superclass_may_be_empty():
    m = validate_superclass_map(["a"], {"a": "x"}, partial=["later"])
    assert m.superclasses == ("x", "later", UNKNOWN_SUPERCLASS)


def test_unknown_class_lookup(smap):
    with pytest.raises(UnknownClassId):
        smap.class_index("zebra")
    with pytest.raises(UnknownClassId):
        smap.class_index(99)


def test_restrict_drops_empty_groups(smap):
    sub = smap.restrict(["cat", "chair"])
    assert sub.classes == ("cat", "chair")
    assert sub.superclasses == ("animal", "furniture", UNKNOWN_SUPERCLASS)


@pytest.mark.parametrize("benchmark", ["sowod", "mowod"])
@pytest.mark.parametrize("group", GROUPINGS)
def test_bundled_groupings_are_valid(benchmark, group):
    parsed = load_grouping(benchmark, group)
    assert parsed.superclass_map.n_classes >= 19
    assert parsed.tasks[0].task_id == 1


def test_default_grouping_names():
    smap = load_grouping("sowod", "D").superclass_map
    assert set(smap.superclasses[:-1]) == {"animal", "person", "vehicle"}


def test_unknown_grouping():
    with pytest.raises(ConfigError):
        load_grouping("sowod", "Z")


def test_task_spec_invariants(smap):
    with pytest.raises(ConfigError):
        TaskSpec(1, frozenset({"cat"}), frozenset({"cat"}), smap)
    with pytest.raises(ConfigError):
        TaskSpec(1, frozenset(), frozenset({"cat"}), smap)
    t = TaskSpec(2, frozenset({"cat", "dog"}), frozenset({"car", "bus", "chair"}), smap)
    assert t.unknown_label == 5 and t.label_name(5) == "unknown"
    assert t.digest() == TaskSpec(2, frozenset({"dog", "cat"}), frozenset({"chair", "car", "bus"}), smap).digest()


def test_class_config_round_trip(tmp_path, smap):
    cfg = {"classes": list(smap.classes), "superclasses": smap.to_config()["superclasses"],
           "tasks": [{"id": 1, "current_known": ["cat", "car"]}, {"id": 2, "current_known": ["dog", "bus", "chair"]}]}
    parsed = parse_class_config(cfg)
    assert parsed.tasks[1].previously_known == {"cat", "car"}
    assert parsed.tasks[0].superclass_map.classes == ("cat", "car")
    write_class_config(tmp_path / "c.json", parsed.superclass_map, parsed.tasks)
    from oddone.core import load_class_config
    again = load_class_config(tmp_path / "c.json")
    assert again.superclass_map == parsed.superclass_map
    assert [t.digest() for t in again.tasks] == [t.digest() for t in parsed.tasks]


def test_class_config_rejects_double_assignment():
    with pytest.raises(ConfigError):
        parse_class_config({"classes": ["a"], "superclasses": {"x": ["a"], "y": ["a"]}})
