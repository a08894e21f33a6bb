"""CPU forward pass.

Feature maps are ``float32`` numpy arrays laid out channel-major as
``(channels, height, width)``.  Convolution is cross-correlation (no kernel
flip) with Darknet-style same padding: ``(extent - 1) // 2`` pixels before,
whatever remains to reach ``ceil(in / stride)`` outputs after.

Batch norm is folded into the kernel before the convolution::

    y = gamma * (x - mean) / sqrt(var + 1e-5) + beta

followed by ``max(x, 0.1 x)`` for leaky layers.  A residual partner's output
is added after the activation.

Output channels are processed in fixed blocks of :data:`CHANNEL_BLOCK` and
BLAS is pinned to one thread inside :func:`forward`, so results are
bit-identical whatever the worker count.

Weight files
------------
Binary, little-endian.  A header of five ``int32``: magic ``0x534C4F59``
(``b"YOLS"``), version major, minor, revision, and images-seen.  Then, for
every conv layer in index order, ``float32`` blocks:

* with batch norm: ``beta[Cout]``, ``gamma[Cout]``, ``mean[Cout]``, ``var[Cout]``
* without: ``bias[Cout]``

followed by the kernel ``[Cout][Cin][k][k]`` (row-major).  The file must end
exactly after the last block.

The text variant holds the same numbers in the same order, whitespace
separated, after a first line ``yolosmall-weights``; ``#`` starts a comment.
"""
from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .analysis import infer_shapes
from .netdef import LayerSpec, NetworkGraph

BN_EPS = 1e-5
LEAKY_SLOPE = 0.1
CHANNEL_BLOCK = 32
WEIGHTS_MAGIC = 0x534C4F59
WEIGHTS_VERSION = (0, 2, 0)
THREADS_ENV = "YOLOSMALL_THREADS"


class WeightError(ValueError):
    pass


@dataclass
class ConvWeights:
    kernel: np.ndarray                 # (Cout, Cin, k, k)
    bias: np.ndarray                   # beta when batch-normed
    gamma: np.ndarray | None = None
    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @property
    def batch_norm(self) -> bool:
        return self.gamma is not None

    @property
    def size(self) -> int:
        n = self.kernel.size + self.bias.size
        if self.batch_norm:
            n += self.gamma.size + self.mean.size + self.var.size
        return n

    def folded(self) -> tuple[np.ndarray, np.ndarray]:
        """Kernel and bias with batch norm absorbed (float64)."""
        k = self.kernel.astype(np.float64)
        if not self.batch_norm:
            return k, self.bias.astype(np.float64)
        scale = self.gamma.astype(np.float64) / np.sqrt(self.var.astype(np.float64) + BN_EPS)
        return k * scale[:, None, None, None], self.bias - self.mean * scale


WeightSet = dict[int, ConvWeights]


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def tensor_shape(x: np.ndarray) -> tuple[int, int, int]:
    """(width, height, channels) of a channel-major feature map."""
    c, h, w = x.shape
    return (w, h, c)


# ---------------------------------------------------------------------------
# layer ops

def _same_pad(size: int, extent: int, stride: int, before: int) -> tuple[int, int]:
    out = -(-size // stride)
    after = max((out - 1) * stride + extent - size - before, 0)
    return out, after


def conv2d(x: np.ndarray, layer: LayerSpec, weights: ConvWeights, *,
           threads: int = 1) -> np.ndarray:
    """Same-padded convolution + folded batch norm + activation."""
    cin = x.shape[0]
    k, s, d = layer.kernel, layer.stride, layer.dilation
    expected = (layer.filters, cin, k, k)
    if weights.kernel.shape != expected or weights.bias.shape != (layer.filters,):
        raise WeightError(f"conv weights shaped {weights.kernel.shape}, expected {expected}")
    if weights.batch_norm != layer.batch_norm:
        raise WeightError("batch-norm terms present/absent contrary to the layer")

    ext = d * (k - 1) + 1
    before = (ext - 1) // 2
    _, h, w = x.shape
    ho, pad_h = _same_pad(h, ext, s, before)
    wo, pad_w = _same_pad(w, ext, s, before)
    xp = np.pad(x.astype(np.float64, copy=False),
                ((0, 0), (before, pad_h), (before, pad_w)))
    cols = np.empty((cin, k * k, ho * wo))
    for ky in range(k):
        for kx in range(k):
            cols[:, ky * k + kx] = xp[:, ky * d: ky * d + (ho - 1) * s + 1: s,
                                      kx * d: kx * d + (wo - 1) * s + 1: s].reshape(cin, ho * wo)
    cols = cols.reshape(cin * k * k, ho * wo)
    kern, bias = weights.folded()
    kern = kern.reshape(layer.filters, cin * k * k)
    out = np.empty((layer.filters, ho * wo), dtype=np.float32)

    def block(lo: int) -> None:
        hi = min(lo + CHANNEL_BLOCK, layer.filters)
        acc = kern[lo:hi] @ cols
        acc += bias[lo:hi, None]
        if layer.activation == "leaky":
            np.maximum(acc, LEAKY_SLOPE * acc, out=acc)
        out[lo:hi] = acc

    starts = range(0, layer.filters, CHANNEL_BLOCK)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(block, starts))
    else:
        for lo in starts:
            block(lo)
    return out.reshape(layer.filters, ho, wo)


def maxpool2d(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    c, h, w = x.shape
    ho, wo = -(-h // stride), -(-w // stride)
    th = max((ho - 1) * stride + size - h, 0)
    tw = max((wo - 1) * stride + size - w, 0)
    xp = np.pad(x, ((0, 0), (th // 2, th - th // 2), (tw // 2, tw - tw // 2)),
                constant_values=-np.inf)
    out = np.full((c, ho, wo), -np.inf, dtype=x.dtype)
    for ky in range(size):
        for kx in range(size):
            np.maximum(out, xp[:, ky: ky + (ho - 1) * stride + 1: stride,
                               kx: kx + (wo - 1) * stride + 1: stride], out=out)
    return out


def upsample2x(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def reshape_passthrough(x: np.ndarray) -> np.ndarray:
    """Space-to-depth: ``(d, h, w) -> (4d, h/2, w/2)``.

    Output channel ``4c + 2*row_phase + col_phase`` holds
    ``x[c, row_phase::2, col_phase::2]``.
    """
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"reshape-passthrough needs even spatial size, got {w}x{h}")
    return (x.reshape(c, h // 2, 2, w // 2, 2)
             .transpose(0, 2, 4, 1, 3)
             .reshape(4 * c, h // 2, w // 2))


# ---------------------------------------------------------------------------
# whole network

def _last_use(graph: NetworkGraph) -> list[int]:
    last = list(range(len(graph.layers)))
    for i, layer in enumerate(graph.layers):
        refs = list(layer.route_sources)
        if layer.residual_partner is not None:
            refs.append(layer.residual_partner)
        if i > 0 and layer.kind != "route":
            refs.append(i - 1)
        for r in refs:
            last[r] = max(last[r], i)
    for h in graph.heads:
        last[h.layer] = len(graph.layers)
    return last


def forward(graph: NetworkGraph, weights: WeightSet, image: np.ndarray, *,
            threads: int | None = None) -> list[np.ndarray]:
    """Run the network; returns one raw tensor per head, in ``graph.heads`` order."""
    threads = default_threads() if threads is None else threads
    w, h, c = graph.input_shape
    if image.shape != (c, h, w):
        raise ValueError(f"image shaped {image.shape}, network expects {(c, h, w)}")
    shapes = infer_shapes(graph)
    last = _last_use(graph)
    outs: dict[int, np.ndarray] = {}
    prev = image.astype(np.float32, copy=False)
    with threadpool_limits(limits=1):
        for i, layer in enumerate(graph.layers):
            if layer.kind == "conv":
                if i not in weights:
                    raise WeightError(f"no weights for conv layer {i}")
                y = conv2d(prev, layer, weights[i], threads=threads)
                if layer.residual_partner is not None:
                    y = y + outs[layer.residual_partner]
            elif layer.kind == "maxpool":
                y = maxpool2d(prev, layer.kernel, layer.stride)
            elif layer.kind == "upsample":
                y = upsample2x(prev)
            elif layer.kind == "reshape":
                y = reshape_passthrough(prev)
            elif layer.kind == "route":
                y = np.concatenate([outs[s] for s in layer.route_sources], axis=0)
            else:
                y = prev
            if tensor_shape(y) != shapes[i]:
                raise AssertionError(f"layer {i}: runtime shape {tensor_shape(y)} != {shapes[i]}")
            outs[i] = y
            prev = y
            for j in [j for j in outs if last[j] <= i]:
                del outs[j]
    return [outs[hd.layer] for hd in graph.heads]


# ---------------------------------------------------------------------------
# weights: synthetic, binary, text

def _conv_inputs(graph: NetworkGraph) -> dict[int, int]:
    shapes = infer_shapes(graph)
    cin = {}
    for i, layer in enumerate(graph.layers):
        if layer.kind == "conv":
            cin[i] = graph.input_shape[2] if i == 0 else shapes[i - 1][2]
    return cin


def random_weights(graph: NetworkGraph, seed: int = 0, *, zero: bool = False) -> WeightSet:
    """He-scaled random weights (or all zeros), BN statistics near identity."""
    rng = np.random.default_rng(seed)
    ws: WeightSet = {}
    for i, cin in _conv_inputs(graph).items():
        layer = graph.layers[i]
        n, k = layer.filters, layer.kernel
        shape = (n, cin, k, k)
        if zero:
            kern = np.zeros(shape, np.float32)
            bias = np.zeros(n, np.float32)
        else:
            std = np.sqrt(2.0 / (cin * k * k))
            kern = (rng.standard_normal(shape) * std).astype(np.float32)
            bias = (rng.standard_normal(n) * 0.01).astype(np.float32)
        if layer.batch_norm:
            if zero:
                gamma = np.ones(n, np.float32)
                mean = np.zeros(n, np.float32)
                var = np.ones(n, np.float32)
            else:
                gamma = rng.uniform(0.5, 1.5, n).astype(np.float32)
                mean = (rng.standard_normal(n) * 0.01).astype(np.float32)
                var = rng.uniform(0.5, 1.5, n).astype(np.float32)
            ws[i] = ConvWeights(kern, bias, gamma, mean, var)
        else:
            ws[i] = ConvWeights(kern, bias)
    return ws


def _flatten(graph: NetworkGraph, weights: WeightSet) -> np.ndarray:
    parts = []
    for i in sorted(_conv_inputs(graph)):
        cw = weights[i]
        parts.append(cw.bias)
        if cw.batch_norm:
            parts += [cw.gamma, cw.mean, cw.var]
        parts.append(cw.kernel.ravel())
    return np.concatenate(parts).astype("<f4")


def _unflatten(graph: NetworkGraph, flat: np.ndarray) -> WeightSet:
    ws: WeightSet = {}
    pos = 0

    def take(n: int) -> np.ndarray:
        nonlocal pos
        if pos + n > flat.size:
            raise WeightError(f"weights truncated: need {pos + n} floats, have {flat.size}")
        chunk = flat[pos: pos + n].astype(np.float32)
        pos += n
        return chunk

    for i, cin in sorted(_conv_inputs(graph).items()):
        layer = graph.layers[i]
        n, k = layer.filters, layer.kernel
        bias = take(n)
        bn = (take(n), take(n), take(n)) if layer.batch_norm else (None, None, None)
        kern = take(n * cin * k * k).reshape(n, cin, k, k)
        ws[i] = ConvWeights(kern, bias, *bn)
    if pos != flat.size:
        raise WeightError(f"{flat.size - pos} trailing floats after the last conv layer")
    return ws


def save_weights(graph: NetworkGraph, weights: WeightSet, path, *, seen: int = 0) -> None:
    header = struct.pack("<5i", WEIGHTS_MAGIC, *WEIGHTS_VERSION, seen)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_flatten(graph, weights).tobytes())


def load_weights(graph: NetworkGraph, path) -> WeightSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len("yolosmall-weights")] == b"yolosmall-weights":
        return loads_weights_text(graph, raw.decode("utf-8"))
    if len(raw) < 20:
        raise WeightError("weight file shorter than its header")
    magic, *_ = struct.unpack("<5i", raw[:20])
    if magic != WEIGHTS_MAGIC:
        raise WeightError(f"bad magic 0x{magic & 0xFFFFFFFF:08X}")
    body = raw[20:]
    if len(body) % 4:
        raise WeightError("weight payload is not a whole number of float32 values")
    return _unflatten(graph, np.frombuffer(body, dtype="<f4"))


def dumps_weights_text(graph: NetworkGraph, weights: WeightSet) -> str:
    lines = ["yolosmall-weights"]
    flat = _flatten(graph, weights)
    for i in range(0, flat.size, 8):
        lines.append(" ".join(repr(float(v)) for v in flat[i: i + 8]))
    return "\n".join(lines) + "\n"


def loads_weights_text(graph: NetworkGraph, text: str) -> WeightSet:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "yolosmall-weights":
        raise WeightError("text weights must start with 'yolosmall-weights'")
    tokens = []
    for line in lines[1:]:
        tokens += line.split("#", 1)[0].split()
    try:
        flat = np.array([float(t) for t in tokens], dtype=np.float32)
    except ValueError as exc:
        raise WeightError(f"bad float in text weights: {exc}") from None
    return _unflatten(graph, flat)
