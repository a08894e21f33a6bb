"""Detection-network graphs: layer records, built-in architectures, text format.

A graph is an ordered list of :class:`LayerSpec` rows.  Residual additions are
not separate rows: the second conv of a residual pair carries the index of the
layer whose output it adds (``residual_partner``), so row numbers line up with
the usual published layer tables.

Text format (one layer per line, UTF-8, ``#`` starts a comment)::

    net name=yolo_s width=416 height=416 channels=3
    0 conv filters=32 size=3 stride=1 bn=1 activation=leaky
    3 conv filters=64 size=3 stride=1 bn=1 activation=leaky residual=1
    21 route layers=8
    22 reshape
    29 yolo classes=80 boxes=3 anchors=10,13,16,30,33,23

Keys not given take the :class:`LayerSpec` defaults.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

LAYER_KINDS = ("conv", "upsample", "route", "reshape", "yolo", "maxpool")
ACTIVATIONS = ("leaky", "linear")
BUILTIN_NAMES = ("yolo_s", "yolo_l", "yolov3", "tiny_yolov3", "ju2019")

# Placeholder priors (network-input pixels).  Real priors come from
# ``anchors.kmeans_iou`` on the target dataset.
COCO_ANCHORS = (
    (10, 13), (16, 30), (33, 23), (30, 61), (62, 45),
    (59, 119), (116, 90), (156, 198), (373, 326),
)
TINY_ANCHORS = ((10, 14), (23, 27), (37, 58), (81, 82), (135, 169), (344, 319))


class GraphError(ValueError):
    """Raised for malformed graph definitions or unknown built-ins."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: int = 1
    stride: int = 1
    dilation: int = 1
    activation: str = "linear"
    batch_norm: bool = False
    route_sources: tuple[int, ...] = ()
    residual_partner: int | None = None


@dataclass(frozen=True)
class Head:
    """A detection output: the yolo row index and how its channels decode."""

    layer: int
    anchors: tuple[tuple[float, float], ...]
    classes: int
    boxes: int

    @property
    def channels(self) -> int:
        return self.boxes * (5 + self.classes)


@dataclass(frozen=True)
class NetworkGraph:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int] = (416, 416, 3)
    heads: tuple[Head, ...] = ()
    name: str = ""

    def __len__(self) -> int:
        return len(self.layers)

    def head_at(self, index: int) -> Head:
        for h in self.heads:
            if h.layer == index:
                return h
        raise KeyError(index)

    def with_input(self, width: int, height: int | None = None) -> "NetworkGraph":
        height = width if height is None else height
        return replace(self, input_shape=(width, height, self.input_shape[2]))


class _Builder:
    def __init__(self) -> None:
        self.layers: list[LayerSpec] = []
        self.heads: list[int] = []

    @property
    def last(self) -> int:
        return len(self.layers) - 1

    def conv(self, filters, kernel=3, stride=1, *, dilation=1, residual=None,
             linear=False) -> int:
        self.layers.append(LayerSpec(
            "conv", filters=filters, kernel=kernel, stride=stride,
            dilation=dilation,
            activation="linear" if linear else "leaky",
            batch_norm=not linear, residual_partner=residual,
        ))
        return self.last

    def residual(self, bottleneck: int, width: int, repeats: int) -> int:
        for _ in range(repeats):
            start = self.last
            self.conv(bottleneck, 1)
            self.conv(width, 3, residual=start)
        return self.last

    def route(self, *sources: int) -> int:
        self.layers.append(LayerSpec("route", route_sources=tuple(sources)))
        return self.last

    def upsample(self) -> int:
        self.layers.append(LayerSpec("upsample", kernel=1, stride=2))
        return self.last

    def reshape(self) -> int:
        self.layers.append(LayerSpec("reshape"))
        return self.last

    def maxpool(self, size: int, stride: int) -> int:
        self.layers.append(LayerSpec("maxpool", kernel=size, stride=stride))
        return self.last

    def head(self, channels: int) -> int:
        self.conv(channels, 1, linear=True)
        self.layers.append(LayerSpec("yolo"))
        self.heads.append(self.last)
        return self.last


def _darknet_backbone(b: _Builder, stages: Sequence[int]) -> list[int]:
    """Stem plus strided stages; returns the index ending each stage."""
    b.conv(32, 3)
    ends = []
    width = 32
    for repeats in stages:
        width *= 2
        b.conv(width, 3, 2)
        ends.append(b.residual(width // 2, width, repeats))
    return ends


def _yolo_s(b: _Builder, ch: int) -> None:
    ends = _darknet_backbone(b, (1, 2, 2, 2))       # ends: 3, 8, 13, 18
    b.conv(128, 1)                                   # 19
    up = b.upsample()                                # 20
    b.route(ends[1])                                 # 21
    shuffled = b.reshape()                           # 22
    b.route(shuffled, up, ends[2])                   # 23 -> 512+128+256
    for _ in range(2):
        b.conv(256, 1)
        b.conv(512, 3)
    b.head(ch)


def _yolo_l(b: _Builder, ch: int) -> None:
    ends = _darknet_backbone(b, (1, 2, 8, 8))        # ends: 3, 8, 25, 42
    _fpn_heads(b, ch, [ends[3], ends[2], ends[1]], widths=(512, 512, 256), laterals=(128, 128))


def _yolov3(b: _Builder, ch: int) -> None:
    ends = _darknet_backbone(b, (1, 2, 8, 8, 4))     # ends: 3, 8, 25, 42, 51
    _fpn_heads(b, ch, [ends[4], ends[3], ends[2]], widths=(1024, 512, 256), laterals=(256, 128))


def _fpn_heads(b: _Builder, ch: int, skips: list[int], widths: Sequence[int],
               laterals: Sequence[int]) -> None:
    for i, (skip, width) in enumerate(zip(skips, widths)):
        if i > 0:
            b.route(branch)
            b.conv(laterals[i - 1], 1)
            up = b.upsample()
            b.route(up, skip)
        for _ in range(3):
            b.conv(width // 2, 1)
            b.conv(width, 3)
        branch = b.last - 1                          # the last 1x1 of the set
        b.head(ch)


def _tiny_yolov3(b: _Builder, ch: int) -> None:
    width = 16
    for _ in range(5):
        b.conv(width, 3)
        b.maxpool(2, 2)
        width *= 2
    b.conv(512, 3)                                   # 10
    b.maxpool(2, 1)                                  # 11
    b.conv(1024, 3)                                  # 12
    neck = b.conv(256, 1)                            # 13
    b.conv(512, 3)
    b.head(ch)                                    # 15, 16
    b.route(neck)
    b.conv(128, 1)
    up = b.upsample()
    b.route(up, 8)
    b.conv(256, 3)
    b.head(ch)


def _ju2019(b: _Builder, ch: int) -> None:
    # 31 convs, one reshape-passthrough, dilated 3x3s at stride 8 and a 1x1
    # reduction after every concatenation.  Widths are a reconstruction fitted
    # to the published totals (params, BFLOPs, head RF/CS).
    b.conv(8, 3)
    b.conv(40, 3, 2)
    b.residual(20, 40, 1)
    b.conv(96, 3, 2)
    fine = b.residual(48, 96, 2)                     # 8: 104x104x96
    b.conv(112, 3, 2)                                # 9
    b.conv(56, 1)
    prev = b.conv(112, 3)
    for _ in range(2):
        b.conv(56, 1)
        cur = b.conv(112, 3, dilation=2)
        b.route(cur, prev)
        prev = b.conv(112, 1)
    b.route(fine)
    b.conv(24, 1)
    shuffled = b.reshape()
    b.route(shuffled, prev)
    b.conv(112, 1)
    b.conv(112, 3)
    for _ in range(4):
        b.conv(56, 1)
        b.conv(112, 1)
    b.conv(56, 1)
    b.head(ch)


_BUILDERS = {
    "yolo_s": _yolo_s,
    "yolo_l": _yolo_l,
    "yolov3": _yolov3,
    "tiny_yolov3": _tiny_yolov3,
    "ju2019": _ju2019,
}

_ANCHOR_POOL = {
    "yolo_s": COCO_ANCHORS,
    "yolo_l": COCO_ANCHORS,
    "yolov3": COCO_ANCHORS,
    "tiny_yolov3": TINY_ANCHORS,
    "ju2019": COCO_ANCHORS,
}


def build_builtin(name: str, class_count: int = 80, *, boxes_per_cell: int | None = None,
                  input_size: int = 416) -> NetworkGraph:
    """Build one of the five reference networks.

    Parameters
    ----------
    name : str
        One of ``yolo_s``, ``yolo_l``, ``yolov3``, ``tiny_yolov3``, ``ju2019``.
    class_count : int
        Number of object classes C; head convs emit ``B * (5 + C)`` channels.
    boxes_per_cell : int, optional
        B for single-head networks (``yolo_s``, ``ju2019``).  Defaults to 3;
        pass 6 to attach all six anchors to the single head.  Multi-head
        networks always use 3.
    input_size : int
        Square input side in pixels.
    """
    if name not in _BUILDERS:
        raise GraphError(f"unknown network {name!r}; expected one of {BUILTIN_NAMES}")
    if class_count < 1:
        raise GraphError("class_count must be >= 1")

    single = name in ("yolo_s", "ju2019")
    boxes = (boxes_per_cell or 3) if single else 3
    if not single and boxes_per_cell not in (None, 3):
        raise GraphError(f"{name} has several heads; boxes_per_cell is fixed at 3")

    b = _Builder()
    _BUILDERS[name](b, boxes * (5 + class_count))

    pool = _ANCHOR_POOL[name]
    heads = []
    if single:
        heads.append(Head(b.heads[0], tuple(pool[:boxes]), class_count, boxes))
    else:
        # heads are built coarse-to-fine; coarse heads take the largest priors
        n = len(b.heads)
        for i, idx in enumerate(b.heads):
            run = pool[3 * (n - 1 - i): 3 * (n - i)]
            heads.append(Head(idx, tuple(run), class_count, 3))
    return NetworkGraph(tuple(b.layers), (input_size, input_size, 3), tuple(heads), name)


def residual_pairs(graph: NetworkGraph) -> list[tuple[int, int, int]]:
    """``(partner, first conv, second conv)`` for every residual block."""
    out = []
    for i, layer in enumerate(graph.layers):
        if layer.kind == "conv" and layer.residual_partner is not None:
            out.append((layer.residual_partner, i - 1, i))
    return out


def validate(graph: NetworkGraph) -> list[str]:
    """Return a list of human-readable violations; empty means valid."""
    problems: list[str] = []
    n = len(graph.layers)
    for i, layer in enumerate(graph.layers):
        if layer.kind not in LAYER_KINDS:
            problems.append(f"unknown layer kind {layer.kind!r} at layer {i}")
            continue
        if layer.kind == "route":
            if not layer.route_sources:
                problems.append(f"route without sources at layer {i}")
            for s in layer.route_sources:
                if s >= i:
                    problems.append(f"forward reference at layer {i}")
                elif s < 0:
                    problems.append(f"negative route source {s} at layer {i}")
        elif layer.route_sources:
            problems.append(f"route sources on non-route layer {i}")
        if layer.kind in ("conv", "maxpool"):
            if layer.kernel < 1 or layer.stride < 1 or layer.dilation < 1:
                problems.append(f"non-positive kernel/stride/dilation at layer {i}")
        if layer.kind == "conv":
            if layer.filters < 1:
                problems.append(f"conv without filters at layer {i}")
            if layer.activation not in ACTIVATIONS:
                problems.append(f"unknown activation {layer.activation!r} at layer {i}")
        if layer.residual_partner is not None:
            if layer.kind != "conv":
                problems.append(f"residual on non-conv layer {i}")
            elif not 0 <= layer.residual_partner < i:
                problems.append(f"forward reference at layer {i}")
        if layer.kind != "yolo" and any(h.layer == i for h in graph.heads):
            problems.append(f"head points at non-yolo layer {i}")
        if layer.kind == "yolo" and not any(h.layer == i for h in graph.heads):
            problems.append(f"yolo layer {i} has no head configuration")
        if layer.kind == "yolo" and i == 0:
            problems.append("yolo layer cannot be first")
    for h in graph.heads:
        if not 0 <= h.layer < n:
            problems.append(f"head refers to missing layer {h.layer}")
        if len(h.anchors) != h.boxes:
            problems.append(f"head at layer {h.layer}: {len(h.anchors)} anchors for B={h.boxes}")
    if problems:
        return problems

    from .analysis import ShapeError, infer_shapes

    try:
        shapes = infer_shapes(graph)
    except ShapeError as exc:
        return [f"shape violation: {exc}"]
    for partner, _, second in residual_pairs(graph):
        if shapes[partner] != shapes[second]:
            problems.append(
                f"residual shape mismatch at layer {second}: "
                f"{shapes[second]} vs partner {partner} {shapes[partner]}")
    for h in graph.heads:
        if shapes[h.layer][2] != h.channels:
            problems.append(
                f"head at layer {h.layer} has {shapes[h.layer][2]} channels, "
                f"expected B*(5+C) = {h.channels}")
    return problems


# ---------------------------------------------------------------------------
# text format

def _fmt_num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def dumps(graph: NetworkGraph) -> str:
    w, h, c = graph.input_shape
    lines = [f"net name={graph.name or 'unnamed'} width={w} height={h} channels={c}"]
    for i, layer in enumerate(graph.layers):
        parts = [str(i), layer.kind]
        if layer.kind == "conv":
            parts += [f"filters={layer.filters}", f"size={layer.kernel}",
                      f"stride={layer.stride}", f"bn={int(layer.batch_norm)}",
                      f"activation={layer.activation}"]
            if layer.dilation != 1:
                parts.append(f"dilation={layer.dilation}")
            if layer.residual_partner is not None:
                parts.append(f"residual={layer.residual_partner}")
        elif layer.kind == "maxpool":
            parts += [f"size={layer.kernel}", f"stride={layer.stride}"]
        elif layer.kind == "route":
            parts.append("layers=" + ",".join(map(str, layer.route_sources)))
        elif layer.kind == "yolo":
            head = graph.head_at(i)
            flat = ",".join(_fmt_num(v) for wh in head.anchors for v in wh)
            parts += [f"classes={head.classes}", f"boxes={head.boxes}", f"anchors={flat}"]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def loads(text: str) -> NetworkGraph:
    name = ""
    input_shape = (416, 416, 3)
    layers: list[LayerSpec] = []
    heads: list[Head] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            if tokens[0] == "net":
                kv = _kv(tokens[1:])
                name = kv.get("name", "")
                if name == "unnamed":
                    name = ""
                input_shape = (int(kv["width"]), int(kv["height"]), int(kv.get("channels", 3)))
                continue
            index, kind, kv = int(tokens[0]), tokens[1], _kv(tokens[2:])
        except (IndexError, KeyError, ValueError) as exc:
            raise GraphError(f"line {lineno}: cannot parse {raw!r} ({exc})") from None
        if index != len(layers):
            raise GraphError(f"line {lineno}: expected layer index {len(layers)}, got {index}")
        if kind not in LAYER_KINDS:
            raise GraphError(f"line {lineno}: unknown layer kind {kind!r}")
        try:
            if kind == "conv":
                res = kv.get("residual")
                layers.append(LayerSpec(
                    "conv", filters=int(kv["filters"]), kernel=int(kv.get("size", 1)),
                    stride=int(kv.get("stride", 1)), dilation=int(kv.get("dilation", 1)),
                    activation=kv.get("activation", "linear"),
                    batch_norm=kv.get("bn", "0") == "1",
                    residual_partner=None if res is None else int(res)))
            elif kind == "maxpool":
                layers.append(LayerSpec("maxpool", kernel=int(kv.get("size", 2)),
                                        stride=int(kv.get("stride", 2))))
            elif kind == "route":
                src = tuple(int(s) for s in kv["layers"].split(","))
                layers.append(LayerSpec("route", route_sources=src))
            elif kind == "upsample":
                layers.append(LayerSpec("upsample", kernel=1, stride=2))
            elif kind == "reshape":
                layers.append(LayerSpec("reshape"))
            else:
                vals = [float(v) for v in kv["anchors"].split(",")] if kv.get("anchors") else []
                anchors = tuple(zip(vals[0::2], vals[1::2]))
                heads.append(Head(index, anchors, int(kv["classes"]), int(kv["boxes"])))
                layers.append(LayerSpec("yolo"))
        except (KeyError, ValueError) as exc:
            raise GraphError(f"line {lineno}: bad {kind} definition ({exc})") from None
    # integer-valued anchors round-trip as ints so graphs compare equal
    heads = [replace(h, anchors=tuple(tuple(_int_if_whole(v) for v in wh) for wh in h.anchors))
             for h in heads]
    return NetworkGraph(tuple(layers), input_shape, tuple(heads), name)


def _int_if_whole(v: float):
    return int(v) if float(v).is_integer() else v


def _kv(tokens: Iterable[str]) -> dict[str, str]:
    out = {}
    for t in tokens:
        key, sep, value = t.partition("=")
        if not sep:
            raise ValueError(f"expected key=value, got {t!r}")
        out[key] = value
    return out


def save(graph: NetworkGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(graph))


def load(path) -> NetworkGraph:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
