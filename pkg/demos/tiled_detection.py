"""Tile a synthetic aerial frame and run YOLO-S over it with random weights.

The weights are seeded noise, so the boxes mean nothing; the point is the
plumbing: tile layout, overlap bands, per-tile letterboxing and the merge.

    python3 demos/tiled_detection.py
"""
import time

import numpy as np

from yolosmall.netdef import build_builtin
from yolosmall.engine import random_weights
from yolosmall.tiling import detect_tiled, make_detector, plan_tiles

W, H = 1920, 1080
rng = np.random.default_rng(7)
image = rng.random((3, H, W), dtype=np.float32) * 0.2
for _ in range(40):  # bright rectangles standing in for vehicles
    x, y = rng.integers(0, W - 30), rng.integers(0, H - 20)
    image[:, y:y + 12, x:x + 24] = rng.random(3)[:, None, None]

plan = plan_tiles(W, H, 2, 2, 50, 50)
print(f"tile size {plan.tile_size}, steps {plan.steps}")
for t in plan.tiles:
    print("  tile at", t[:2])
print("overlap bands:", plan.overlap_bands())

graph = build_builtin("yolo_s")
detector = make_detector(graph, random_weights(graph, 0), 0.5, 0.45)
t0 = time.perf_counter()
dets = detect_tiled(image, plan, detector, workers=2)
print(f"{len(dets)} detections in {time.perf_counter() - t0:.1f}s")
for d in dets[:5]:
    print(f"  class {d.class_id} conf {d.confidence:.3f} box {tuple(round(v, 1) for v in d.box.as_tuple())}")
