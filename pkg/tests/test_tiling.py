import numpy as np
import pytest
from hypothesis import given, strategies as st

from yolosmall.postproc import Box, Detection
from yolosmall.tiling import (Detector, TilingError, detect, detect_tiled, letterbox,
                              plan_tiles, resize_bilinear, to_global, to_local)


def test_full_hd_plan():
    p = plan_tiles(1920, 1080, 2, 2, 50, 50)
    assert p.tile_size == (985, 565)
    assert p.steps == (935, 515)
    assert [t[:2] for t in p.tiles] == [(0, 0), (935, 0), (0, 515), (935, 515)]


def test_square_plan():
    p = plan_tiles(1024, 1024, 2, 2, 50, 50)
    assert p.tile_size == (537, 537)


def test_single_tile_is_whole_image():
    p = plan_tiles(300, 200, 1, 1, 0, 0)
    assert p.tiles == ((0, 0, 300, 200),)
    assert p.overlap_bands() == []


def test_overlap_not_smaller_than_tile():
    with pytest.raises(TilingError):
        plan_tiles(100, 100, 2, 2, 200, 0)
    with pytest.raises(TilingError):
        plan_tiles(100, 100, 0, 1, 0, 0)


@given(st.integers(1, 3000), st.integers(1, 3000), st.integers(1, 6), st.integers(1, 6),
       st.integers(0, 200), st.integers(0, 200))
def test_plan_invariants(W, H, nx, ny, ox, oy):
    try:
        p = plan_tiles(W, H, nx, ny, ox, oy)
    except TilingError:
        return
    dx, dy = p.tile_size
    assert dx == -(-(W + (nx - 1) * ox) // nx)
    assert dy == -(-(H + (ny - 1) * oy) // ny)
    covered_x = np.zeros(W, bool)
    covered_y = np.zeros(H, bool)
    for x, y, w, h in p.tiles:
        assert 0 <= x and x + w <= W and 0 <= y and y + h <= H
        covered_x[x:x + w] = True
        covered_y[y:y + h] = True
    assert covered_x.all() and covered_y.all()


@st.composite
def tile_and_box(draw):
    tx, ty = draw(st.integers(0, 4000)), draw(st.integers(0, 4000))
    x = draw(st.floats(0, 900))
    y = draw(st.floats(0, 500))
    w = draw(st.floats(0.5, 300))
    h = draw(st.floats(0.5, 300))
    return (tx, ty, 985, 565), Box(x, y, x + w, y + h)


@given(tile_and_box())
def test_tile_coordinate_round_trip(case):
    tile, box = case
    back = to_local(to_global(box, tile), tile)
    assert back.as_tuple() == pytest.approx(box.as_tuple(), abs=0.5)


@given(st.integers(1, 300), st.integers(1, 300), tile_and_box())
def test_letterbox_round_trip(w, h, case):
    _, box = case
    _, lb = letterbox(np.zeros((1, h, w), np.float32), 416, 416)
    back = lb.to_source(lb.to_canvas(box))
    assert back.as_tuple() == pytest.approx(box.as_tuple(), abs=0.5)


def test_letterbox_centres_with_black_bars():
    img = np.ones((3, 100, 200), np.float32)
    canvas, lb = letterbox(img, 416, 416)
    assert lb.scale == pytest.approx(2.08)
    assert (lb.pad_x, lb.pad_y) == (0, 104)
    assert canvas[:, :104].max() == 0 and canvas[:, 104 + 208:].max() == 0
    assert np.allclose(canvas[:, 104:312], 1.0)


def test_bilinear_identity_and_constant():
    rng = np.random.default_rng(0)
    x = rng.random((2, 5, 7), dtype=np.float32)
    assert np.array_equal(resize_bilinear(x, 7, 5), x)
    assert np.allclose(resize_bilinear(np.full((1, 3, 3), 0.3, np.float32), 11, 4), 0.3)


def test_bilinear_midpoints():
    x = np.array([[[0.0, 1.0]]], np.float32)
    assert resize_bilinear(x, 4, 1)[0, 0].tolist() == pytest.approx([0, 0.25, 0.75, 1])


class FixedDetector:
    """Emits the given tile-local boxes for every window it sees."""

    def __init__(self, boxes):
        self.boxes = boxes
        self.calls = []

    def __call__(self, tile):
        self.calls.append(tile.shape)
        return [Detection(Box(*b), c, p) for b, c, p in self.boxes]


def test_single_tile_equals_plain_detect():
    img = np.zeros((3, 120, 160), np.float32)
    det = FixedDetector([((10, 10, 50, 40), 0, 0.9), ((12, 11, 52, 41), 0, 0.8),
                         ((150, 100, 170, 130), 1, 0.5)])
    plan = plan_tiles(160, 120, 1, 1, 0, 0)
    assert detect_tiled(img, plan, det) == detect(img, det)


def test_duplicates_in_overlap_collapse():
    img = np.zeros((3, 1080, 1920), np.float32)
    plan = plan_tiles(1920, 1080, 2, 2, 50, 50)

    emitted = []

    class Straddle:
        def __init__(self):
            self.i = 0

        def __call__(self, tile):
            x, y, _, _ = plan.tiles[self.i]
            self.i += 1
            b = Box(940 - x, 520 - y, 980 - x, 560 - y)
            emitted.append(b)
            return [Detection(b, 0, 0.5 + 0.1 * self.i)]

    out = detect_tiled(img, plan, Straddle())
    assert len(emitted) == 4
    assert len(out) == 1
    assert out[0].box.as_tuple() == (940, 520, 980, 560)
    assert out[0].confidence == pytest.approx(0.9)


def test_interior_detection_never_suppressed():
    img = np.zeros((3, 1080, 1920), np.float32)
    plan = plan_tiles(1920, 1080, 2, 2, 50, 50)
    # identical box in every tile, but placed deep inside each tile, away from bands
    det = FixedDetector([((100, 100, 140, 140), 0, 0.7)])
    out = detect_tiled(img, plan, det)
    assert len(out) == 4
    assert sorted(d.box.x_min for d in out) == [100, 100, 1035, 1035]


def test_output_clamped_to_image():
    img = np.zeros((3, 100, 100), np.float32)
    det = FixedDetector([((-20, -5, 30, 30), 0, 0.9), ((90, 90, 200, 200), 0, 0.8),
                         ((120, 0, 140, 10), 0, 0.7)])
    out = detect_tiled(img, plan_tiles(100, 100, 1, 1, 0, 0), det)
    assert [d.box.as_tuple() for d in out] == [(0, 0, 30, 30), (90, 90, 100, 100)]


def test_plan_image_mismatch():
    with pytest.raises(TilingError):
        detect_tiled(np.zeros((3, 10, 10), np.float32), plan_tiles(20, 20, 1, 1, 0, 0),
                     FixedDetector([]))


def test_workers_do_not_change_result():
    rng = np.random.default_rng(0)
    img = rng.random((3, 300, 400), dtype=np.float32)
    plan = plan_tiles(400, 300, 3, 2, 30, 20)

    def det(tile):
        m = float(tile.mean())
        return [Detection(Box(5, 5, tile.shape[2] - 5, 40), 0, m),
                Detection(Box(tile.shape[2] - 40, 5, tile.shape[2], 35), 1, m / 2)]

    assert detect_tiled(img, plan, det, workers=1) == detect_tiled(img, plan, det, workers=4)


def test_network_detector_runs_end_to_end():
    from yolosmall.engine import random_weights
    from yolosmall.netdef import build_builtin

    g = build_builtin("tiny_yolov3", 2, input_size=64)
    d = Detector(g, random_weights(g, 0), conf_threshold=0.0, nms_iou=0.45)
    img = np.random.default_rng(1).random((3, 50, 90), dtype=np.float32)
    plan = plan_tiles(90, 50, 2, 1, 10, 0)
    out = detect_tiled(img, plan, d)
    assert out
    for x in out:
        assert 0 <= x.box.x_min < x.box.x_max <= 90
        assert 0 <= x.box.y_min < x.box.y_max <= 50
