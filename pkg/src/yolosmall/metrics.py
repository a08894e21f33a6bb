"""Detection evaluation.

Matching is greedy per image and class: detections in descending confidence
each claim the unmatched ground truth of highest IoU, provided that IoU
reaches the threshold.  AP is the area under the monotone precision
envelope (all-point), with an 11-point mode available.  Micro-averaged
recall/precision/F1 are computed from TP/FP pooled over classes at a fixed
confidence operating point.  The COCO bucket APs average over IoU 0.50:0.95.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .postproc import Box, Detection, iou_matrix

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_id: int
    image_id: str = ""


class SizeBucket(str, enum.Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


def size_bucket(gt: GroundTruth | Box) -> SizeBucket:
    box = gt.box if isinstance(gt, GroundTruth) else gt
    area = box.area
    if area < 32 ** 2:
        return SizeBucket.SMALL
    if area < 96 ** 2:
        return SizeBucket.MEDIUM
    return SizeBucket.LARGE


# ---------------------------------------------------------------------------
# matching

def _ranked(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))


def match(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5
          ) -> tuple[list[bool], list[bool]]:
    """Single-image matching.

    Returns ``(tp, matched)``: ``tp[i]`` says whether ``dets[i]`` is a true
    positive, ``matched[j]`` whether ``gts[j]`` was claimed.  A detection
    that lands on a ground truth of another class is a false positive, and
    that ground truth stays unmatched.
    """
    tp = [False] * len(dets)
    matched = [False] * len(gts)
    if not dets or not gts:
        return tp, matched
    overlaps = iou_matrix([d.box.as_tuple() for d in dets], [g.box.as_tuple() for g in gts])
    gt_cls = np.array([g.class_id for g in gts])
    for i in _ranked(dets):
        cand = (gt_cls == dets[i].class_id) & ~np.array(matched)
        if not cand.any():
            continue
        row = np.where(cand, overlaps[i], -1.0)
        j = int(np.argmax(row))
        if row[j] >= iou_threshold:
            tp[i] = True
            matched[j] = True
    return tp, matched


# ---------------------------------------------------------------------------
# AP

def pr_curve(confidences: Sequence[float], tp: Sequence[bool], positives: int
             ) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each detection in descending confidence."""
    order = sorted(range(len(confidences)), key=lambda i: (-confidences[i], i))
    flags = np.array([tp[i] for i in order], dtype=np.float64)
    ctp = np.cumsum(flags)
    cfp = np.cumsum(1.0 - flags)
    recall = ctp / positives
    precision = ctp / np.maximum(ctp + cfp, 1.0)
    return recall, precision


def average_precision(confidences: Sequence[float], tp: Sequence[bool], positives: int,
                      *, eleven_point: bool = False) -> float | None:
    """Area under the precision envelope; ``None`` when there are no positives."""
    if positives <= 0:
        return None
    if len(confidences) == 0:
        return 0.0
    recall, precision = pr_curve(confidences, tp, positives)
    if eleven_point:
        total = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            above = precision[recall >= r - 1e-12]
            total += above.max() if above.size else 0.0
        return float(total / 11.0)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def aggregate(aps: Mapping[int, float], supports: Mapping[int, int]) -> tuple[float, float]:
    """``(mAP, wAP)`` over the classes present in ``aps``."""
    keys = [k for k, v in aps.items() if v is not None]
    if not keys:
        raise ValueError("no classes to aggregate")
    total = sum(supports[k] for k in keys)
    if total <= 0 or any(supports[k] <= 0 for k in keys):
        raise ValueError("supports must be positive for aggregated classes")
    m = sum(aps[k] for k in keys) / len(keys)
    w = sum(supports[k] * aps[k] for k in keys) / total
    return m, w


def micro_metrics(tp: int, fp: int, positives: int
                  ) -> tuple[float, float | None, float | None]:
    """``(REC, PREC, F1)``; precision and F1 are ``None`` when nothing was predicted."""
    if positives < 1:
        raise ValueError("micro metrics need at least one positive")
    rec = tp / positives
    if tp + fp == 0:
        return rec, None, None
    prec = tp / (tp + fp)
    f1 = 0.0 if rec + prec == 0 else 2 * rec * prec / (rec + prec)
    return rec, prec, f1


# ---------------------------------------------------------------------------
# COCO buckets

def _coco_match(dets, gts, ignored, thr):
    """Per-image match with ignored ground truths.

    Returns ``(tp, skip)`` per detection; ``skip`` marks detections that
    are left out of the PR curve.  Real ground truths are preferred over
    ignored ones.
    """
    tp = [False] * len(dets)
    skip = [False] * len(dets)
    if not dets:
        return tp, skip
    overlaps = iou_matrix([d.box.as_tuple() for d in dets], [g.box.as_tuple() for g in gts]) \
        if gts else np.zeros((len(dets), 0))
    used = np.zeros(len(gts), dtype=bool)
    ign = np.array(ignored, dtype=bool)
    for i in _ranked(dets):
        best = -1
        for pool in (~ign, ign):
            row = np.where(pool & ~used, overlaps[i], -1.0)
            if row.size and row.max() >= thr:
                best = int(np.argmax(row))
                break
        if best >= 0:
            used[best] = True
            if ign[best]:
                skip[i] = True
            else:
                tp[i] = True
    return tp, skip


def coco_ap(dets_by_image: Mapping[str, Sequence[Detection]],
            gts_by_image: Mapping[str, Sequence[GroundTruth]],
            bucket: SizeBucket | None = None, *, thresholds: Sequence[float] = COCO_THRESHOLDS
            ) -> float | None:
    """AP averaged over ``thresholds`` and over classes with in-bucket ground truth.

    Ground truths outside ``bucket`` are ignored: they are not counted as
    misses and detections matched to them are dropped.  Unmatched detections
    whose own area lies outside the bucket are dropped too.  ``None`` when the
    bucket holds no ground truth.
    """
    images = sorted(set(dets_by_image) | set(gts_by_image))
    classes = sorted({g.class_id for im in images for g in gts_by_image.get(im, ())
                      if bucket is None or size_bucket(g) == bucket})
    if not classes:
        return None
    per_class = []
    for cls in classes:
        per_thr = []
        for thr in thresholds:
            confs, flags, positives = [], [], 0
            for im in images:
                d = [x for x in dets_by_image.get(im, ()) if x.class_id == cls]
                g = [x for x in gts_by_image.get(im, ()) if x.class_id == cls]
                ignored = [bucket is not None and size_bucket(x) != bucket for x in g]
                positives += ignored.count(False)
                tp, skip = _coco_match(d, g, ignored, thr)
                for det, t, s in zip(d, tp, skip):
                    if s or (not t and bucket is not None and size_bucket(det.box) != bucket):
                        continue
                    confs.append(det.confidence)
                    flags.append(t)
            per_thr.append(average_precision(confs, flags, positives))
        per_class.append(float(np.mean(per_thr)))
    return float(np.mean(per_class))


# ---------------------------------------------------------------------------
# report

@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    supports: dict[int, int]
    mAP: float | None
    wAP: float | None
    AP_S: float | None
    AP_M: float | None
    AP_L: float | None
    REC_ma: float
    PREC_ma: float | None
    F1_ma: float | None
    TP_ma: int
    FP_ma: int
    N: int
    iou_threshold: float = 0.5
    conf_threshold: float = 0.25
    interpolation: str = "all-point"
    class_names: dict[int, str] = field(default_factory=dict)
    pr_curves: dict[int, list[tuple[float, float]]] = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        for key in ("per_class_ap", "supports", "class_names", "pr_curves"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        for key in ("per_class_ap", "supports", "class_names", "pr_curves"):
            d[key] = {int(k): v for k, v in d[key].items()}
        d["pr_curves"] = {k: [tuple(p) for p in v] for k, v in d["pr_curves"].items()}
        return cls(**d)

    def to_text(self) -> str:
        """Aligned table: class APs, then aggregates, all in percent."""
        def pct(v):
            return "-" if v is None else f"{100 * v:.1f}"

        rows = []
        for k in sorted(self.supports):
            name = self.class_names.get(k, str(k))
            rows.append((f"AP {name}", pct(self.per_class_ap.get(k)), str(self.supports[k])))
        rows += [("mAP", pct(self.mAP), ""), ("wAP", pct(self.wAP), ""),
                 ("AP_S", pct(self.AP_S), ""), ("AP_M", pct(self.AP_M), ""),
                 ("AP_L", pct(self.AP_L), ""), ("REC_ma", pct(self.REC_ma), ""),
                 ("PREC_ma", pct(self.PREC_ma), ""), ("F1_ma", pct(self.F1_ma), "")]
        w0 = max(len(r[0]) for r in rows + [("metric",)])
        w1 = max(len(r[1]) for r in rows + [("", "[%]")])
        lines = [f"{'metric':<{w0}}  {'[%]':>{w1}}  N"]
        lines += [f"{a:<{w0}}  {b:>{w1}}  {c}".rstrip() for a, b, c in rows]
        return "\n".join(lines) + "\n"


def evaluate(dets_by_image: Mapping[str, Sequence[Detection]],
             gts_by_image: Mapping[str, Sequence[GroundTruth]], *,
             iou_threshold: float = 0.5, conf_threshold: float = 0.25,
             eleven_point: bool = False, class_names: Mapping[int, str] | None = None
             ) -> EvalReport:
    """Full evaluation over a set of images.

    AP uses every detection; the micro metrics only count detections with
    confidence at or above ``conf_threshold``.
    """
    images = sorted(set(dets_by_image) | set(gts_by_image))
    supports: dict[int, int] = {}
    for im in images:
        for g in gts_by_image.get(im, ()):
            supports[g.class_id] = supports.get(g.class_id, 0) + 1
    if not supports:
        raise ValueError("no ground truth to evaluate against")

    confs: dict[int, list[float]] = {}
    flags: dict[int, list[bool]] = {}
    tp_ma = fp_ma = 0
    for im in images:
        d = list(dets_by_image.get(im, ()))
        tp, _ = match(d, list(gts_by_image.get(im, ())), iou_threshold)
        for det, t in zip(d, tp):
            confs.setdefault(det.class_id, []).append(det.confidence)
            flags.setdefault(det.class_id, []).append(t)
            if det.confidence >= conf_threshold:
                tp_ma += t
                fp_ma += not t

    aps, curves = {}, {}
    for k in sorted(supports):
        c, f = confs.get(k, []), flags.get(k, [])
        aps[k] = average_precision(c, f, supports[k], eleven_point=eleven_point)
        if c:
            r, p = pr_curve(c, f, supports[k])
            curves[k] = [(float(a), float(b)) for a, b in zip(r, p)]
    m, w = aggregate(aps, supports)
    n = sum(supports.values())
    rec, prec, f1 = micro_metrics(tp_ma, fp_ma, n)
    return EvalReport(
        per_class_ap=aps, supports=supports, mAP=m, wAP=w,
        AP_S=coco_ap(dets_by_image, gts_by_image, SizeBucket.SMALL),
        AP_M=coco_ap(dets_by_image, gts_by_image, SizeBucket.MEDIUM),
        AP_L=coco_ap(dets_by_image, gts_by_image, SizeBucket.LARGE),
        REC_ma=rec, PREC_ma=prec, F1_ma=f1, TP_ma=tp_ma, FP_ma=fp_ma, N=n,
        iou_threshold=iou_threshold, conf_threshold=conf_threshold,
        interpolation="11-point" if eleven_point else "all-point",
        class_names=dict(class_names or {}), pr_curves=curves)
