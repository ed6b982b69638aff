"""Pixel- and tile-level segmentation metrics.

Conventions: counts run over valid pixels only; 0/0 ratios collapse to 0
except the all-empty case (empty truth, empty prediction) which scores 1 on
precision/recall/F1/IoU; AUPRC is undefined (None) when the truth has no
positive pixels, mirroring N/A entries for threshold-free metrics on binary
baselines. Tiles are "strong" when their truth event exceeds 1000 positive
pixels, strictly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError

STRONG_PLUME_PIXELS = 1000


def confusion(pred: np.ndarray, truth: np.ndarray,
              valid: np.ndarray | None = None) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) over valid pixels of one class plane."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise DataError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    if valid is None:
        valid = np.ones_like(pred, dtype=bool)
    else:
        valid = np.asarray(valid).astype(bool)
    p, t = pred[valid], truth[valid]
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    return tp, fp, fn, tn


def prf_iou(counts: tuple[int, int, int, int]) -> tuple[float, float, float, float]:
    """(precision, recall, f1, iou) with the empty-empty convention of 1."""
    tp, fp, fn = counts[0], counts[1], counts[2]
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0, 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    iou = tp / (tp + fp + fn)
    return precision, recall, f1, iou


def auprc(scores: np.ndarray, truth: np.ndarray, valid: np.ndarray | None = None,
          num_thresholds: int = 10000) -> float | None:
    """Area under the precision-recall curve by trapezoid over recall.

    Thresholds are the descending unique scores, or ``num_thresholds``
    quantiles when there are more unique values than that. The curve starts
    at (recall 0, precision 1). Returns None when the truth has no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    if valid is None:
        valid = np.ones_like(truth, dtype=bool)
    else:
        valid = np.asarray(valid).astype(bool)
    s, t = scores[valid], truth[valid]
    n_pos = int(t.sum())
    if n_pos == 0:
        return None
    thresholds = np.unique(s)[::-1]
    if thresholds.size > num_thresholds:
        qs = np.linspace(0.0, 1.0, num_thresholds)
        thresholds = np.unique(np.quantile(s, qs))[::-1]

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    t_sorted = t[order].astype(np.int64)
    cum_tp = np.cumsum(t_sorted)
    # index of the last element with score >= threshold, via searchsorted on -s
    counts = np.searchsorted(-s_sorted, -thresholds, side="right")
    tp = np.where(counts > 0, cum_tp[np.maximum(counts - 1, 0)], 0)
    tp[counts == 0] = 0
    predicted = counts
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / n_pos

    recalls = np.concatenate([[0.0], recall])
    precisions = np.concatenate([[1.0], precision])
    return float(np.sum((recalls[1:] - recalls[:-1])
                        * (precisions[1:] + precisions[:-1]) / 2.0))


def fpr_by_tile(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray],
                min_pixels: int = 1,
                valids: Sequence[np.ndarray] | None = None) -> float:
    """Fraction of truth-negative tiles flagged positive (>= min_pixels predicted)."""
    if len(preds) != len(truths):
        raise DataError("one prediction per truth tile required")
    negatives = 0
    false_alarms = 0
    for i, (p, t) in enumerate(zip(preds, truths)):
        v = None if valids is None else valids[i]
        if v is None:
            v = np.ones_like(np.asarray(t), dtype=bool)
        if np.asarray(t).astype(bool)[v].any():
            continue
        negatives += 1
        if int(np.asarray(p).astype(bool)[v].sum()) >= min_pixels:
            false_alarms += 1
    if negatives == 0:
        raise DataError("no truth-negative tiles: FPR by tile undefined")
    return false_alarms / negatives


def strata_f1(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray],
              strong_threshold: int = STRONG_PLUME_PIXELS,
              valids: Sequence[np.ndarray] | None = None
              ) -> tuple[float | None, float | None]:
    """F1 within strong (> threshold truth pixels) and weak tile strata.

    Negative tiles belong to the weak stratum; a stratum without tiles
    reports None.
    """
    strong_counts = [0, 0, 0, 0]
    weak_counts = [0, 0, 0, 0]
    has_strong = has_weak = False
    for i, (p, t) in enumerate(zip(preds, truths)):
        v = None if valids is None else valids[i]
        tp, fp, fn, tn = confusion(p, t, v)
        t_arr = np.asarray(t).astype(bool)
        if valids is not None:
            t_arr = t_arr & np.asarray(valids[i]).astype(bool)
        pos = int(t_arr.sum())
        bucket = strong_counts if pos > strong_threshold else weak_counts
        if pos > strong_threshold:
            has_strong = True
        else:
            has_weak = True
        bucket[0] += tp
        bucket[1] += fp
        bucket[2] += fn
        bucket[3] += tn
    f1_strong = prf_iou(tuple(strong_counts))[2] if has_strong else None
    f1_weak = prf_iou(tuple(weak_counts))[2] if has_weak else None
    return f1_strong, f1_weak


def support_weighted(per_class_f1: Sequence[float], supports: Sequence[int]) -> float:
    """Average of per-class scores weighted by class pixel support."""
    f1s = np.asarray(per_class_f1, dtype=np.float64)
    ns = np.asarray(supports, dtype=np.float64)
    if f1s.shape != ns.shape or f1s.size == 0:
        raise DataError("per_class_f1 and supports must be equal-length, non-empty")
    if ns.sum() == 0:
        raise DataError("total support is zero")
    return float((f1s * ns).sum() / ns.sum())


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class ClassReport:
    name: str
    auprc: float | None
    precision: float
    recall: float
    f1: float
    iou: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def support(self) -> int:
        return self.tp + self.fn


@dataclass
class EvalReport:
    """Per-class and aggregate metrics plus the conventions used to get them."""

    classes: list[ClassReport]
    fpr_by_tile: float | None
    f1_strong: float | None = None
    f1_weak: float | None = None
    binarization_threshold: float = 0.5
    fpr_min_pixels: int = 1
    num_tiles: int = 0

    @property
    def f1(self) -> float:
        if len(self.classes) == 1:
            return self.classes[0].f1
        return support_weighted([c.f1 for c in self.classes],
                                [max(c.support, 0) for c in self.classes])

    def to_dict(self) -> dict:
        return {
            "classes": [vars(c) | {"support": c.support} for c in self.classes],
            "aggregate_f1": self.f1,
            "fpr_by_tile": self.fpr_by_tile,
            "f1_strong": self.f1_strong,
            "f1_weak": self.f1_weak,
            "binarization_threshold": self.binarization_threshold,
            "fpr_min_pixels": self.fpr_min_pixels,
            "num_tiles": self.num_tiles,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def format_table(self) -> str:
        """Aligned text table in the usual column order
        (AUPRC, F1, Precision, Recall, IoU, FPR by tile)."""
        def fmt(x):
            return "N/A" if x is None else f"{100.0 * x:.2f}"

        headers = ["class", "AUPRC", "F1", "Precision", "Recall", "IoU", "FPR by tile"]
        if self.f1_strong is not None or self.f1_weak is not None:
            headers[2:2] = ["F1 (strong)", "F1 (weak)"]
        rows = []
        for i, c in enumerate(self.classes):
            row = [c.name, fmt(c.auprc), fmt(c.f1), fmt(c.precision),
                   fmt(c.recall), fmt(c.iou),
                   fmt(self.fpr_by_tile) if i == 0 else ""]
            if self.f1_strong is not None or self.f1_weak is not None:
                row[2:2] = [fmt(self.f1_strong) if i == 0 else "",
                            fmt(self.f1_weak) if i == 0 else ""]
            rows.append(row)
        widths = [max(len(h), *(len(r[j]) for r in rows)) for j, h in enumerate(headers)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
        for r in rows:
            lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
        return "\n".join(lines)


def evaluate_tiles(scores: Sequence[np.ndarray], truths: Sequence[np.ndarray],
                   valids: Sequence[np.ndarray] | None = None,
                   class_names: Sequence[str] | None = None,
                   threshold: float = 0.5, fpr_min_pixels: int = 1,
                   strata: bool = False) -> EvalReport:
    """Aggregate per-tile class score maps (C, H, W) into one report."""
    if len(scores) != len(truths):
        raise DataError("one score map per truth required")
    n_classes = np.asarray(scores[0]).shape[0]
    names = list(class_names) if class_names else [
        f"class{i}" for i in range(n_classes)]
    class_reports = []
    for ci in range(n_classes):
        counts = [0, 0, 0, 0]
        all_scores, all_truth, all_valid = [], [], []
        for i, (s, t) in enumerate(zip(scores, truths)):
            s = np.asarray(s)[ci]
            t = np.asarray(t)[ci] if np.asarray(t).ndim == 3 else np.asarray(t)
            v = np.ones_like(t, dtype=bool) if valids is None else \
                np.asarray(valids[i]).astype(bool)
            tp, fp, fn, tn = confusion(s >= threshold, t, v)
            counts[0] += tp; counts[1] += fp; counts[2] += fn; counts[3] += tn
            all_scores.append(s[v]); all_truth.append(t[v])
        p, r, f1, iou = prf_iou(tuple(counts))
        area = auprc(np.concatenate(all_scores), np.concatenate(all_truth))
        class_reports.append(ClassReport(
            name=names[ci], auprc=area, precision=p, recall=r, f1=f1, iou=iou,
            tp=counts[0], fp=counts[1], fn=counts[2], tn=counts[3]))

    def plane(i, arr):
        a = np.asarray(arr)
        return a.any(axis=0) if a.ndim == 3 else a

    preds_any = [np.asarray(s).max(axis=0) >= threshold for s in scores]
    truths_any = [plane(i, t) for i, t in enumerate(truths)]
    try:
        fpr = fpr_by_tile(preds_any, truths_any, min_pixels=fpr_min_pixels,
                          valids=valids)
    except DataError:
        fpr = None
    f1_s = f1_w = None
    if strata and n_classes == 1:
        f1_s, f1_w = strata_f1(preds_any, truths_any, valids=valids)
    return EvalReport(classes=class_reports, fpr_by_tile=fpr, f1_strong=f1_s,
                      f1_weak=f1_w, binarization_threshold=threshold,
                      fpr_min_pixels=fpr_min_pixels, num_tiles=len(scores))
