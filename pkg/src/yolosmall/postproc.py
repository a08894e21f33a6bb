"""Head decoding, IoU and non-maximum suppression.

Detection text format, one detection per line::

    class_id confidence x_min y_min x_max y_max

Floats are written with ``repr`` so files re-parse to identical values.  The
JSON form is a list of ``{"class_id", "confidence", "box": [x0, y0, x1, y1]}``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_CONF_THRESHOLD = 0.25
DEFAULT_NMS_IOU = 0.45


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(n, 4)`` and ``(m, 4)`` corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode_head(raw: np.ndarray, anchors: Sequence[tuple[float, float]], stride: float,
                conf_threshold: float = DEFAULT_CONF_THRESHOLD,
                class_count: int | None = None) -> list[Detection]:
    """Turn one raw head tensor ``(B*(5+C), H, W)`` into detections.

    Per cell and anchor: centre ``(cell + sigmoid(t_xy)) * stride``, size
    ``anchor * exp(t_wh)``, confidence ``sigmoid(t_o) * max_c sigmoid(t_c)``
    with the arg-max class (lowest id on ties).  Coordinates are in
    network-input pixels.
    """
    boxes = len(anchors)
    ch, gh, gw = raw.shape
    if class_count is None:
        class_count = ch // boxes - 5
    if ch != boxes * (5 + class_count) or class_count < 1:
        raise ValueError(f"head has {ch} channels, expected {boxes}*(5+{class_count})")
    t = raw.astype(np.float64).reshape(boxes, 5 + class_count, gh, gw)
    gy, gx = np.mgrid[0:gh, 0:gw]
    cx = (gx + _sigmoid(t[:, 0])) * stride
    cy = (gy + _sigmoid(t[:, 1])) * stride
    aw = np.array([a[0] for a in anchors], dtype=np.float64)[:, None, None]
    ah = np.array([a[1] for a in anchors], dtype=np.float64)[:, None, None]
    bw = aw * np.exp(np.clip(t[:, 2], -50, 50))
    bh = ah * np.exp(np.clip(t[:, 3], -50, 50))
    cls_prob = _sigmoid(t[:, 5:])
    cls = cls_prob.argmax(axis=1)
    conf = _sigmoid(t[:, 4]) * cls_prob.max(axis=1)
    xa, ya, xb, yb = cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2
    # a vanishing exp() can collapse a box to zero width in float arithmetic
    keep = np.nonzero((conf >= conf_threshold) & (xb > xa) & (yb > ya))
    x0, y0, x1, y1 = (v[keep].tolist() for v in (xa, ya, xb, yb))
    return [Detection(Box(*coords), c, p)
            for *coords, c, p in zip(x0, y0, x1, y1, cls[keep].tolist(), conf[keep].tolist())]


def nms(dets: Sequence[Detection], iou_threshold: float = DEFAULT_NMS_IOU, *,
        class_agnostic: bool = False) -> list[Detection]:
    """Greedy suppression, highest confidence first.

    Ties in confidence are broken by class id, then by input position.  A
    detection survives iff its IoU with every already-kept detection of the
    same class (any class when ``class_agnostic``) is below the threshold.
    Survivors are returned in ranking order.
    """
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].class_id, i))
    coords = np.array([dets[i].box.as_tuple() for i in order])
    classes = np.array([dets[i].class_id for i in order])
    alive = np.ones(len(order), dtype=bool)
    for r in range(len(order)):
        if not alive[r]:
            continue
        rest = np.arange(r + 1, len(order))
        rest = rest[alive[rest]]
        if not class_agnostic:
            rest = rest[classes[rest] == classes[r]]
        if rest.size:
            overl = iou_matrix(coords[r], coords[rest])[0]
            alive[rest[overl >= iou_threshold]] = False
    return [dets[order[r]] for r in np.nonzero(alive)[0]]


def detect_raw(heads: Sequence[np.ndarray], graph, conf_threshold: float = DEFAULT_CONF_THRESHOLD,
               iou_threshold: float = DEFAULT_NMS_IOU, *, class_agnostic: bool = False
               ) -> list[Detection]:
    """Decode every head of ``graph`` and run NMS over the union.

    The stride of a head is the grid spacing, input width over grid width.
    """
    dets: list[Detection] = []
    for tensor, head in zip(heads, graph.heads):
        stride = graph.input_shape[0] / tensor.shape[2]
        dets += decode_head(tensor, head.anchors, stride, conf_threshold, head.classes)
    return nms(dets, iou_threshold, class_agnostic=class_agnostic)


# ---------------------------------------------------------------------------
# serialisation

def dumps_text(dets: Iterable[Detection]) -> str:
    return "".join(
        f"{d.class_id} {d.confidence!r} {d.box.x_min!r} {d.box.y_min!r} "
        f"{d.box.x_max!r} {d.box.y_max!r}\n" for d in dets)


def loads_text(text: str) -> list[Detection]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise ValueError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            conf, x0, y0, x1, y1 = map(float, parts[1:])
            out.append(Detection(Box(x0, y0, x1, y1), cls, conf))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


def dumps_json(dets: Iterable[Detection]) -> str:
    return json.dumps([{"class_id": d.class_id, "confidence": d.confidence,
                        "box": list(d.box.as_tuple())} for d in dets], indent=1)


def loads_json(text: str) -> list[Detection]:
    return [Detection(Box(*item["box"]), int(item["class_id"]), float(item["confidence"]))
            for item in json.loads(text)]
