import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import naive_conv, passthrough_by_phase
from yolosmall import engine
from yolosmall.engine import (ConvWeights, WeightError, conv2d, forward, load_weights,
                              maxpool2d, random_weights, reshape_passthrough, save_weights,
                              upsample2x)
from yolosmall.netdef import LayerSpec, build_builtin, loads


def _random_case(seed):
    rng = np.random.default_rng(seed)
    cin, cout = rng.integers(1, 5, size=2)
    h, w = rng.integers(1, 8, size=2)
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    dilation = int(rng.choice([1, 2])) if k == 3 else 1
    bn = bool(rng.integers(2))
    leaky = bool(rng.integers(2))
    layer = LayerSpec("conv", filters=int(cout), kernel=k, stride=stride, dilation=dilation,
                      activation="leaky" if leaky else "linear", batch_norm=bn)
    x = rng.normal(size=(cin, h, w)).astype(np.float32)
    kern = rng.normal(size=(cout, cin, k, k)).astype(np.float32)
    bias = rng.normal(size=cout).astype(np.float32)
    if bn:
        wts = ConvWeights(kern, bias, rng.uniform(0.5, 1.5, cout).astype(np.float32),
                          rng.normal(size=cout).astype(np.float32),
                          rng.uniform(0.2, 2.0, cout).astype(np.float32))
    else:
        wts = ConvWeights(kern, bias)
    return layer, x, wts


@pytest.mark.parametrize("seed", range(100))
def test_conv_matches_naive_loops(seed):
    layer, x, w = _random_case(seed)
    got = conv2d(x, layer, w)
    want = np.array(naive_conv(x.tolist(), w.kernel.tolist(), w.bias.tolist(), layer.stride,
                               layer.dilation, layer.activation == "leaky",
                               None if w.gamma is None else w.gamma.tolist(),
                               None if w.mean is None else w.mean.tolist(),
                               None if w.var is None else w.var.tolist()))
    assert got.shape == want.shape
    scale = max(1.0, float(np.abs(want).max()))
    assert np.max(np.abs(got - want)) / scale <= 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_passthrough_matches_phase_enumeration(seed):
    rng = np.random.default_rng(seed)
    c, h, w = rng.integers(1, 5), 2 * rng.integers(1, 5), 2 * rng.integers(1, 5)
    x = rng.normal(size=(c, h, w)).astype(np.float32)
    assert np.array_equal(reshape_passthrough(x), np.array(passthrough_by_phase(x.tolist()),
                                                           dtype=np.float32))


def test_passthrough_rejects_odd_size():
    with pytest.raises(ValueError):
        reshape_passthrough(np.zeros((1, 3, 4), np.float32))


@given(st.integers(1, 4), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2 ** 31))
def test_maxpool_stride_one_matches_window_max(c, h, w, seed):
    x = np.random.default_rng(seed).normal(size=(c, h, w)).astype(np.float32)
    got = maxpool2d(x, 2, 1)
    for y in range(h):
        for q in range(w):
            # total padding is one pixel, placed after the data
            assert got[:, y, q].tolist() == x[:, y:y + 2, q:q + 2].max(axis=(1, 2)).tolist()


def test_upsample_nearest():
    x = np.arange(4, dtype=np.float32).reshape(1, 2, 2)
    assert upsample2x(x)[0].tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]


SMALL = """net name=small width=16 height=16 channels=3
0 conv filters=40 size=3 stride=1 bn=1 activation=leaky
1 conv filters=36 size=3 stride=2 bn=1 activation=leaky
2 conv filters=20 size=1 stride=1 bn=1 activation=leaky
3 conv filters=36 size=3 stride=1 bn=1 activation=leaky residual=1
4 route layers=0
5 reshape
6 route layers=5,3
7 conv filters=18 size=1 stride=1 bn=0 activation=linear
8 yolo classes=1 boxes=3 anchors=2,2,4,4,8,8
"""


def test_forward_small_graph_deterministic_across_threads():
    g = loads(SMALL)
    w = random_weights(g, 3)
    img = np.random.default_rng(0).random((3, 16, 16), dtype=np.float32)
    a = forward(g, w, img, threads=1)[0]
    b = forward(g, w, img, threads=4)[0]
    c = forward(g, w, img, threads=1)[0]
    assert a.shape == (18, 8, 8)
    assert a.tobytes() == b.tobytes() == c.tobytes()


def test_forward_residual_is_added():
    g = loads(SMALL)
    w = random_weights(g, 1)
    img = np.random.default_rng(1).random((3, 16, 16), dtype=np.float32)
    # recompute layer 3 by hand from the ops
    x0 = conv2d(img, g.layers[0], w[0])
    x1 = conv2d(x0, g.layers[1], w[1])
    x2 = conv2d(x1, g.layers[2], w[2])
    x3 = conv2d(x2, g.layers[3], w[3]) + x1
    x6 = np.concatenate([reshape_passthrough(x0), x3])
    x7 = conv2d(x6, g.layers[7], w[7])
    assert np.array_equal(forward(g, w, img)[0], x7)


def test_forward_rejects_wrong_image_shape():
    g = loads(SMALL)
    with pytest.raises(ValueError):
        forward(g, random_weights(g), np.zeros((3, 8, 8), np.float32))


def test_missing_weights():
    g = loads(SMALL)
    w = random_weights(g)
    del w[3]
    with pytest.raises(WeightError):
        forward(g, w, np.zeros((3, 16, 16), np.float32))


def test_weight_shape_mismatch():
    g = loads(SMALL)
    w = random_weights(g)
    w[2] = ConvWeights(np.zeros((20, 5, 1, 1), np.float32), w[2].bias, w[2].gamma, w[2].mean,
                       w[2].var)
    with pytest.raises(WeightError):
        forward(g, w, np.zeros((3, 16, 16), np.float32))


def _same(a, b):
    assert a.keys() == b.keys()
    for k in a:
        for f in ("kernel", "bias", "gamma", "mean", "var"):
            x, y = getattr(a[k], f), getattr(b[k], f)
            assert (x is None and y is None) or np.array_equal(x, y)


def test_binary_weights_round_trip(tmp_path):
    g = loads(SMALL)
    w = random_weights(g, 5)
    save_weights(g, w, tmp_path / "w.bin")
    _same(load_weights(g, tmp_path / "w.bin"), w)


def test_text_weights_round_trip(tmp_path):
    g = loads(SMALL)
    w = random_weights(g, 6)
    text = engine.dumps_weights_text(g, w)
    assert text.startswith("yolosmall-weights")
    _same(engine.loads_weights_text(g, text), w)
    (tmp_path / "w.txt").write_text(text)
    _same(load_weights(g, tmp_path / "w.txt"), w)


def test_truncated_and_oversized_weights(tmp_path):
    g = loads(SMALL)
    save_weights(g, random_weights(g), tmp_path / "w.bin")
    data = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-4])
    (tmp_path / "long.bin").write_bytes(data + b"\0\0\0\0")
    (tmp_path / "magic.bin").write_bytes(b"XXXX" + data[4:])
    for name in ("short.bin", "long.bin", "magic.bin"):
        with pytest.raises(WeightError):
            load_weights(g, tmp_path / name)


def test_random_weights_seeded():
    g = build_builtin("tiny_yolov3", 2)
    a, b = random_weights(g, 9), random_weights(g, 9)
    assert all(np.array_equal(a[k].kernel, b[k].kernel) for k in a)
    z = random_weights(g, zero=True)
    assert all(not z[k].kernel.any() for k in z)
