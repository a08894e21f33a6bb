"""Anchor priors from box dimensions by k-means under the IoU distance.

Boxes are compared co-centred, so the distance only depends on ``(w, h)``:
``d = 1 - IoU``.  Centroids are the per-cluster mean of member dimensions.
The mean is not the IoU-optimal centre, so a Lloyd step can lower the mean
IoU slightly; iteration stops there and keeps the previous centroids, which
makes the recorded mean-IoU history non-decreasing.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class AnchorError(ValueError):
    pass


def wh_iou(dims: np.ndarray, cents: np.ndarray) -> np.ndarray:
    """IoU of co-centred boxes; ``(n, 2)`` by ``(k, 2)`` gives ``(n, k)``."""
    inter = (np.minimum(dims[:, None, 0], cents[None, :, 0])
             * np.minimum(dims[:, None, 1], cents[None, :, 1]))
    union = (dims[:, 0] * dims[:, 1])[:, None] + (cents[:, 0] * cents[:, 1])[None, :] - inter
    return inter / union


@dataclass(frozen=True)
class KMeansResult:
    anchors: np.ndarray          # (k, 2), sorted by area ascending
    labels: np.ndarray           # cluster of each input row, in the caller's order
    mean_iou_history: tuple[float, ...]
    iterations: int


def _plus_plus(dims: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    cents = [dims[rng.integers(len(dims))]]
    for _ in range(1, k):
        d = 1.0 - wh_iou(dims, np.array(cents)).max(axis=1)
        total = d.sum()
        if total <= 0:
            break
        idx = int(np.searchsorted(np.cumsum(d), rng.random() * total, side="right"))
        cents.append(dims[min(idx, len(dims) - 1)])
    return np.array(cents, dtype=np.float64)


def kmeans_iou_detailed(dims, k: int, seed: int = 0, max_iters: int = 300) -> KMeansResult:
    arr = np.asarray(dims, dtype=np.float64).reshape(-1, 2)
    if k < 1:
        raise AnchorError(f"k must be >= 1, got {k}")
    if len(arr) == 0:
        raise AnchorError("no box dimensions given")
    if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
        raise AnchorError("box dimensions must be positive and finite")
    distinct = np.unique(arr, axis=0)
    if k > len(distinct):
        raise AnchorError(f"k={k} exceeds the {len(distinct)} distinct box sizes")

    # canonical order so the result does not depend on how the input was listed
    order = np.lexsort((arr[:, 1], arr[:, 0]))
    pts = arr[order]
    rng = np.random.default_rng(seed)
    cents = _plus_plus(pts, k, rng)
    while len(cents) < k:  # all remaining points coincide with a centroid
        taken = {tuple(c) for c in cents}
        extra = next(p for p in np.unique(pts, axis=0) if tuple(p) not in taken)
        cents = np.vstack([cents, extra])

    labels = None
    history: list[float] = []
    prev = cents.copy()
    it = 0
    for it in range(1, max_iters + 1):
        iou = wh_iou(pts, cents)
        new = iou.argmax(axis=1)
        score = float(iou[np.arange(len(pts)), new].mean())
        if history and score < history[-1]:
            # the mean update is not IoU-optimal and can overshoot; keep the
            # better centroids and stop
            cents = prev
            break
        history.append(score)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        prev = cents.copy()
        for j in range(k):
            members = pts[labels == j]
            if len(members):
                cents[j] = members.mean(axis=0)
            else:
                # reseed from the point worst served by its current centroid
                fit = iou[np.arange(len(pts)), labels]
                far = int(np.argmin(fit))
                cents[j] = pts[far]
                labels = labels.copy()
                labels[far] = j
    labels = wh_iou(pts, cents).argmax(axis=1)

    by_area = np.lexsort((cents[:, 0], cents[:, 0] * cents[:, 1]))
    rank = np.empty(k, dtype=int)
    rank[by_area] = np.arange(k)
    out_labels = np.empty(len(arr), dtype=int)
    out_labels[order] = rank[labels]
    return KMeansResult(cents[by_area], out_labels, tuple(history), it)


def kmeans_iou(dims, k: int, seed: int = 0, max_iters: int = 300) -> np.ndarray:
    """``k`` anchors as a ``(k, 2)`` array sorted by area, smallest first."""
    return kmeans_iou_detailed(dims, k, seed, max_iters).anchors


def mean_iou(dims, anchors) -> float:
    """Average best-anchor IoU, the usual quality figure for a prior set."""
    d = np.asarray(dims, dtype=np.float64).reshape(-1, 2)
    return float(wh_iou(d, np.asarray(anchors, dtype=np.float64).reshape(-1, 2)).max(axis=1).mean())


def assign_anchors(anchors: Sequence[Sequence[float]], head_strides: Sequence[float]
                   ) -> list[list[tuple[float, float]]]:
    """Split area-sorted anchors over heads, largest anchors on the coarsest head.

    Returns one list per head in the order of ``head_strides``; each list is
    a contiguous run in ascending area.
    """
    pairs = [tuple(a) for a in anchors]
    areas = [w * h for w, h in pairs]
    if any(b < a for a, b in zip(areas, areas[1:])):
        raise AnchorError("anchors must be sorted by area ascending")
    n = len(head_strides)
    if n == 0:
        raise AnchorError("no heads given")
    if n == 1:
        return [pairs]
    if len(pairs) % n:
        raise AnchorError(f"{len(pairs)} anchors do not split evenly over {n} heads")
    per = len(pairs) // n
    # finest head (smallest stride) gets the first run
    by_stride = sorted(range(n), key=lambda i: (head_strides[i], i))
    out: list[list[tuple[float, float]]] = [[] for _ in range(n)]
    for run, head in enumerate(by_stride):
        out[head] = pairs[run * per:(run + 1) * per]
    return out
