import dataclasses

import pytest

from yolosmall import netdef
from yolosmall.netdef import (BUILTIN_NAMES, GraphError, LayerSpec, NetworkGraph,
                              build_builtin, residual_pairs, validate)


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_builtins_validate(name):
    assert validate(build_builtin(name)) == []


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_text_round_trip(name, tmp_path):
    g = build_builtin(name, 8)
    assert netdef.loads(netdef.dumps(g)) == g
    netdef.save(g, tmp_path / "g.net")
    assert netdef.load(tmp_path / "g.net") == g


def test_layer_counts():
    assert len(build_builtin("yolo_s").layers) == 30
    assert len(build_builtin("yolo_l").layers) == 75
    assert [h.layer for h in build_builtin("yolo_l").heads] == [50, 62, 74]
    assert [h.layer for h in build_builtin("yolo_s").heads] == [29]


def test_residual_blocks():
    # the layer table labels 7 blocks in the small net and 19 in the large one
    assert len(residual_pairs(build_builtin("yolo_s"))) == 7
    assert len(residual_pairs(build_builtin("yolo_l"))) == 19


def test_head_channels_follow_class_count():
    g = build_builtin("yolo_s", 8)
    assert g.layers[g.heads[0].layer - 1].filters == 3 * (5 + 8)
    g6 = build_builtin("yolo_s", 8, boxes_per_cell=6)
    assert g6.layers[g6.heads[0].layer - 1].filters == 6 * 13
    assert len(g6.heads[0].anchors) == 6


def test_multi_head_rejects_six_boxes():
    with pytest.raises(GraphError):
        build_builtin("yolo_l", boxes_per_cell=6)


def test_unknown_builtin():
    with pytest.raises(GraphError):
        build_builtin("yolo_xl")


def test_forward_reference_detected():
    g = build_builtin("yolo_s")
    layers = list(g.layers)
    layers[21] = dataclasses.replace(layers[21], route_sources=(25,))
    problems = validate(dataclasses.replace(g, layers=tuple(layers)))
    assert any("forward reference at layer 21" in p for p in problems)


def test_shape_violation_detected():
    g = build_builtin("yolo_s")
    layers = list(g.layers)
    # concatenating the 104x104 map with a 52x52 one is impossible
    layers[23] = dataclasses.replace(layers[23], route_sources=(8, 20))
    problems = validate(dataclasses.replace(g, layers=tuple(layers)))
    assert any("shape" in p for p in problems)


def test_bad_head_channels_detected():
    g = build_builtin("yolo_s")
    layers = list(g.layers)
    layers[28] = dataclasses.replace(layers[28], filters=100)
    assert validate(dataclasses.replace(g, layers=tuple(layers)))


def test_loads_reports_line_numbers():
    with pytest.raises(GraphError, match="line 2"):
        netdef.loads("net name=x width=8 height=8 channels=3\n0 bogus\n")


def test_hand_written_graph():
    text = """net name=tiny width=8 height=8 channels=3
0 conv filters=4 size=3 stride=1 bn=1 activation=leaky
1 conv filters=4 size=3 stride=2 bn=1 activation=leaky
2 reshape
3 conv filters=18 size=1 stride=1 bn=0 activation=linear
4 yolo classes=1 boxes=3 anchors=1,1,2,2,3,3
"""
    g = netdef.loads(text)
    assert validate(g) == []
    assert g.layers[2] == LayerSpec("reshape")
    assert isinstance(g, NetworkGraph)
