"""Sliding-window inference over images larger than the network input.

The image is cut into ``Nx x Ny`` windows of size

    dx = ceil((W + (Nx - 1) * ox) / Nx)

(``dy`` likewise), stepping by ``dx - ox`` with the last window pushed back
against the image edge.  Each window is letterboxed to the network input,
detections are mapped back to image coordinates, and duplicates are pruned
by NMS restricted to detections that touch an overlap band.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .postproc import DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU, Box, Detection, nms

# A detector takes a (C, H, W) float tensor and returns detections in the
# pixel coordinates of that tensor.
DetectorFn = Callable[[np.ndarray], list[Detection]]


class TilingError(ValueError):
    pass


@dataclass(frozen=True)
class TilePlan:
    image: tuple[int, int]
    counts: tuple[int, int]
    overlaps: tuple[int, int]
    tile_size: tuple[int, int]
    tiles: tuple[tuple[int, int, int, int], ...]

    @property
    def steps(self) -> tuple[int, int]:
        return (self.tile_size[0] - self.overlaps[0], self.tile_size[1] - self.overlaps[1])

    def overlap_bands(self) -> list[tuple[float, float, float, float]]:
        """Rectangles ``(x0, y0, x1, y1)`` shared by neighbouring windows."""
        w, h = self.image
        dx, dy = self.tile_size
        xs = sorted({t[0] for t in self.tiles})
        ys = sorted({t[1] for t in self.tiles})
        bands = []
        for a, b in zip(xs, xs[1:]):
            if a + dx > b:
                bands.append((b, 0, a + dx, h))
        for a, b in zip(ys, ys[1:]):
            if a + dy > b:
                bands.append((0, b, w, a + dy))
        return bands


def _axis(extent: int, n: int, overlap: int, name: str) -> tuple[int, list[int]]:
    if n < 1:
        raise TilingError(f"N{name} must be >= 1, got {n}")
    if overlap < 0:
        raise TilingError(f"o{name} must be >= 0, got {overlap}")
    size = math.ceil((extent + (n - 1) * overlap) / n)
    if overlap >= size:
        raise TilingError(f"overlap o{name}={overlap} is not smaller than the tile size {size}")
    if size > extent:
        raise TilingError(f"tile size {size} exceeds the image extent {extent}")
    step = size - overlap
    return size, [min(i * step, extent - size) for i in range(n)]


def plan_tiles(W: int, H: int, Nx: int, Ny: int, ox: int, oy: int) -> TilePlan:
    if W < 1 or H < 1:
        raise TilingError(f"empty image {W}x{H}")
    dx, xs = _axis(W, Nx, ox, "x")
    dy, ys = _axis(H, Ny, oy, "y")
    tiles = tuple((x, y, dx, dy) for y in ys for x in xs)
    return TilePlan((W, H), (Nx, Ny), (ox, oy), (dx, dy), tiles)


# ---------------------------------------------------------------------------
# letterbox

@dataclass(frozen=True)
class Letterbox:
    """Affine map from source pixels to the padded network canvas."""
    scale: float
    pad_x: int
    pad_y: int

    def to_canvas(self, box: Box) -> Box:
        s = self.scale
        return Box(box.x_min * s + self.pad_x, box.y_min * s + self.pad_y,
                   box.x_max * s + self.pad_x, box.y_max * s + self.pad_y)

    def to_source(self, box: Box) -> Box:
        s = self.scale
        return Box((box.x_min - self.pad_x) / s, (box.y_min - self.pad_y) / s,
                   (box.x_max - self.pad_x) / s, (box.y_max - self.pad_y) / s)


def _resize_axis(x: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    in_len = x.shape[axis]
    if in_len == out_len:
        return x
    pos = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    pos = np.clip(pos, 0, in_len - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, in_len - 1)
    frac = (pos - lo).astype(x.dtype)
    shape = [1] * x.ndim
    shape[axis] = out_len
    frac = frac.reshape(shape)
    return np.take(x, lo, axis=axis) * (1 - frac) + np.take(x, hi, axis=axis) * frac


def resize_bilinear(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of a ``(C, H, W)`` tensor with half-pixel centres."""
    out = _resize_axis(image, height, 1)
    return _resize_axis(out, width, 2).astype(np.float32)


def letterbox(image: np.ndarray, width: int, height: int) -> tuple[np.ndarray, Letterbox]:
    """Aspect-preserving resize onto a black ``width x height`` canvas, centred."""
    c, h, w = image.shape
    scale = min(width / w, height / h)
    nw = max(1, min(width, round(w * scale)))
    nh = max(1, min(height, round(h * scale)))
    pad_x, pad_y = (width - nw) // 2, (height - nh) // 2
    canvas = np.zeros((c, height, width), dtype=np.float32)
    canvas[:, pad_y:pad_y + nh, pad_x:pad_x + nw] = resize_bilinear(image, nw, nh)
    return canvas, Letterbox(scale, pad_x, pad_y)


# ---------------------------------------------------------------------------
# coordinates

def to_global(box: Box, tile: Sequence[int]) -> Box:
    x, y = tile[0], tile[1]
    return Box(box.x_min + x, box.y_min + y, box.x_max + x, box.y_max + y)


def to_local(box: Box, tile: Sequence[int]) -> Box:
    x, y = tile[0], tile[1]
    return Box(box.x_min - x, box.y_min - y, box.x_max - x, box.y_max - y)


def clamp(det: Detection, width: float, height: float) -> Detection | None:
    """Clip a detection to ``[0, width] x [0, height]``; ``None`` if nothing is left."""
    b = det.box
    x0, y0 = min(max(b.x_min, 0.0), width), min(max(b.y_min, 0.0), height)
    x1, y1 = min(max(b.x_max, 0.0), width), min(max(b.y_max, 0.0), height)
    if x1 <= x0 or y1 <= y0:
        return None
    if (x0, y0, x1, y1) == b.as_tuple():
        return det
    return Detection(Box(x0, y0, x1, y1), det.class_id, det.confidence)


def _clamp_all(dets, width, height):
    return [c for c in (clamp(d, width, height) for d in dets) if c is not None]


# ---------------------------------------------------------------------------
# detection

class Detector:
    """Letterbox, forward, decode and NMS for one image or window.

    Calling it with a ``(C, H, W)`` tensor returns detections in the pixel
    frame of that tensor.
    """

    def __init__(self, graph, weights, conf_threshold: float = DEFAULT_CONF_THRESHOLD,
                 nms_iou: float = DEFAULT_NMS_IOU, *, class_agnostic: bool = False,
                 threads: int | None = None):
        self.graph = graph
        self.weights = weights
        self.conf_threshold = conf_threshold
        self.nms_iou = nms_iou
        self.class_agnostic = class_agnostic
        self.threads = threads

    def __call__(self, image: np.ndarray) -> list[Detection]:
        from .engine import forward
        from .postproc import detect_raw

        net_w, net_h = self.graph.input_shape[:2]
        canvas, lb = letterbox(image, net_w, net_h)
        heads = forward(self.graph, self.weights, canvas, threads=self.threads)
        dets = detect_raw(heads, self.graph, self.conf_threshold, self.nms_iou,
                          class_agnostic=self.class_agnostic)
        # boxes pushed entirely into the padding have nothing left after clamping
        out = []
        for d in dets:
            c = clamp(d, net_w, net_h)
            if c is not None:
                out.append(Detection(lb.to_source(c.box), d.class_id, d.confidence))
        return _clamp_all(out, image.shape[2], image.shape[1])


def make_detector(graph, weights, conf_threshold: float = DEFAULT_CONF_THRESHOLD,
                  nms_iou: float = DEFAULT_NMS_IOU, **kwargs) -> Detector:
    return Detector(graph, weights, conf_threshold, nms_iou, **kwargs)


def detect(image: np.ndarray, detector: DetectorFn) -> list[Detection]:
    """Whole-image detection, clipped to the image."""
    return _clamp_all(detector(image), image.shape[2], image.shape[1])


def _touches(box: Box, band) -> bool:
    x0, y0, x1, y1 = band
    return box.x_min < x1 and box.x_max > x0 and box.y_min < y1 and box.y_max > y0


def detect_tiled(image: np.ndarray, plan: TilePlan, detector: DetectorFn,
                 iou_threshold: float = DEFAULT_NMS_IOU, *, class_agnostic: bool = False,
                 workers: int = 1) -> list[Detection]:
    """Run ``detector`` on every window of ``plan`` and merge the results.

    Only detections whose rectangle intersects an overlap band take part in
    the cross-window NMS; everything else passes through untouched.  Output
    order is window order, then the detector's own order.
    """
    c, h, w = image.shape
    if (w, h) != plan.image:
        raise TilingError(f"plan is for {plan.image[0]}x{plan.image[1]}, image is {w}x{h}")

    def run(tile):
        x, y, dx, dy = tile
        local = detector(image[:, y:y + dy, x:x + dx])
        return [Detection(to_global(d.box, tile), d.class_id, d.confidence)
                for d in _clamp_all(local, dx, dy)]

    if workers > 1 and len(plan.tiles) > 1:
        with ThreadPoolExecutor(workers) as pool:
            per_tile = list(pool.map(run, plan.tiles))
    else:
        per_tile = [run(t) for t in plan.tiles]
    merged = [d for dets in per_tile for d in dets]

    bands = plan.overlap_bands()
    in_band = [i for i, d in enumerate(merged) if any(_touches(d.box, b) for b in bands)]
    pool_dets = [merged[i] for i in in_band]
    kept = {id(d) for d in nms(pool_dets, iou_threshold, class_agnostic=class_agnostic)}
    dropped = {i for i in in_band if id(merged[i]) not in kept}
    result = [d for i, d in enumerate(merged) if i not in dropped]
    return _clamp_all(result, w, h)
