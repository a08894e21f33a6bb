"""Cluster anchors from synthetic labels, then score a noisy fake detector.

    python3 demos/anchors_and_eval.py
"""
import numpy as np

from yolosmall.anchors import assign_anchors, kmeans_iou, mean_iou
from yolosmall.metrics import GroundTruth, evaluate
from yolosmall.postproc import Box, Detection

rng = np.random.default_rng(3)
names = ["car", "truck", "person"]
typical = {0: (14, 8), 1: (26, 12), 2: (4, 4)}

gts, dets = {}, {}
for i in range(60):
    img = f"frame{i:02d}"
    gts[img], dets[img] = [], []
    for _ in range(rng.integers(1, 8)):
        c = int(rng.choice(3, p=[0.7, 0.2, 0.1]))
        w, h = np.array(typical[c]) * rng.uniform(0.7, 1.4, 2)
        x, y = rng.uniform(0, 400, 2)
        gts[img].append(GroundTruth(Box(x, y, x + w, y + h), c, img))
        if rng.random() < 0.8:  # found, with some localisation error
            j = rng.normal(0, 0.1, 4) * [w, h, w, h]
            dets[img].append(Detection(Box(x + j[0], y + j[1], x + w + abs(j[2]), y + h + abs(j[3])),
                                       c, float(rng.uniform(0.4, 1.0))))
    for _ in range(rng.integers(0, 3)):  # clutter
        x, y = rng.uniform(0, 400, 2)
        dets[img].append(Detection(Box(x, y, x + 10, y + 10), int(rng.integers(3)),
                                   float(rng.uniform(0, 0.7))))

dims = [(g.box.width, g.box.height) for v in gts.values() for g in v]
anchors = kmeans_iou(dims, 6, seed=0)
print("anchors:", ", ".join(f"{w:.1f}x{h:.1f}" for w, h in anchors))
print(f"mean best-anchor IoU {mean_iou(dims, anchors):.3f}")
for stride, run in zip((8, 16), assign_anchors(anchors, [8, 16])):
    print(f"stride {stride}:", ", ".join(f"{w:.1f}x{h:.1f}" for w, h in run))
print()
print(evaluate(dets, gts, class_names=dict(enumerate(names))).to_text())
