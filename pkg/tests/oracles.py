"""Slow, obviously-correct reference implementations used by the tests.

Nothing here imports the code under test beyond plain data types.
"""
from __future__ import annotations

import itertools
import math


def naive_conv(x, kernel, bias, stride, dilation, leaky, gamma=None, mean=None, var=None,
               eps=1e-5):
    """Direct loops over output channel, row, column, input channel and taps.

    ``x`` is a nested ``[c][h][w]`` list.  Padding puts ``(extent-1)//2``
    zeros before each axis; the output has ``ceil(size/stride)`` samples.
    """
    cin, h, w = len(x), len(x[0]), len(x[0][0])
    cout, k = len(kernel), len(kernel[0][0])
    ext = dilation * (k - 1) + 1
    before = (ext - 1) // 2
    ho, wo = -(-h // stride), -(-w // stride)
    out = [[[0.0] * wo for _ in range(ho)] for _ in range(cout)]
    for o in range(cout):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0
                for c in range(cin):
                    for ky in range(k):
                        for kx in range(k):
                            iy = oy * stride - before + ky * dilation
                            ix = ox * stride - before + kx * dilation
                            if 0 <= iy < h and 0 <= ix < w:
                                acc += float(x[c][iy][ix]) * float(kernel[o][c][ky][kx])
                if gamma is not None:
                    acc = (acc - float(mean[o])) / math.sqrt(float(var[o]) + eps) * float(gamma[o])
                acc += float(bias[o])
                if leaky and acc < 0:
                    acc *= 0.1
                out[o][oy][ox] = acc
    return out


def passthrough_by_phase(x):
    """Space-to-depth by enumerating the four sampling phases explicitly."""
    c, h, w = len(x), len(x[0]), len(x[0][0])
    out = []
    for ch in range(c):
        for dy in (0, 1):
            for dx in (0, 1):
                out.append([[x[ch][2 * r + dy][2 * q + dx] for q in range(w // 2)]
                            for r in range(h // 2)])
    return out


def _iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def nms_oracle(items, threshold, agnostic=False):
    """Exhaustive NMS.

    ``items`` are ``(box, class_id, confidence)``.  Among all subsets that
    are closed under the greedy rule (every excluded item overlaps a kept
    item ranked above it, and no two kept items of a class overlap), the
    answer is unique; we find it by enumerating every subset.  Returns the
    kept indices.
    """
    n = len(items)
    rank = sorted(range(n), key=lambda i: (-items[i][2], items[i][1], i))
    pos = {i: r for r, i in enumerate(rank)}

    conflict = [[i != j and (agnostic or items[i][1] == items[j][1])
                 and _iou(items[i][0], items[j][0]) >= threshold for j in range(n)]
                for i in range(n)]

    answers = []
    for mask in range(1 << n):
        kept = [i for i in range(n) if mask >> i & 1]
        if any(conflict[a][b] for a, b in itertools.combinations(kept, 2)):
            continue
        ok = all(any(conflict[i][j] and pos[j] < pos[i] for j in kept)
                 for i in range(n) if not mask >> i & 1)
        if ok:
            answers.append(frozenset(kept))
    assert len(answers) == 1, answers
    return answers[0]


def brute_force_ap(dets, gts, threshold):
    """Independent evaluator for a single class over several images.

    ``dets``: list of ``(image, box, confidence)``; ``gts``: list of
    ``(image, box)``.  Greedy matching by confidence (ties by list order),
    each detection taking the unclaimed ground truth of highest IoU (first
    on ties).  AP is the sum over every distinct recall level of the
    recall increment times the best precision at or beyond it.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], i))
    claimed = set()
    flags = {}
    for i in order:
        img, box, _ = dets[i]
        best, best_iou = None, -1.0
        for j, (gimg, gbox) in enumerate(gts):
            if gimg != img or j in claimed:
                continue
            v = _iou(box, gbox)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= threshold:
            claimed.add(best)
            flags[i] = True
        else:
            flags[i] = False
    p = len(gts)
    if p == 0:
        return None, flags
    points = []
    tp = fp = 0
    for i in order:
        if flags[i]:
            tp += 1
        else:
            fp += 1
        points.append((tp / p, tp / (tp + fp)))
    ap = 0.0
    prev_r = 0.0
    for r in sorted({r for r, _ in points}):
        best = max(pr for rr, pr in points if rr >= r)
        ap += (r - prev_r) * best
        prev_r = r
    return ap, flags
