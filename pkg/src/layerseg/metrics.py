"""Evaluation: IoU, one-to-one instance matching at IoU thresholds,
AP_t / mean AP, and the Aggregated Jaccard Index."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AP_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class ThresholdCounts:
    threshold: float
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def ap(self):
        total = self.tp + self.fp + self.fn
        return 1.0 if total == 0 else self.tp / total


@dataclass
class MatchReport:
    per_threshold: list        # ThresholdCounts per AP threshold
    mean_ap: float
    aji: float

    def to_dict(self):
        return {
            "per_threshold": [
                {"t": c.threshold, "TP": c.tp, "FP": c.fp, "FN": c.fn, "AP": c.ap}
                for c in self.per_threshold
            ],
            "mean_AP": self.mean_ap,
            "AJI": self.aji,
        }


def iou(a, b):
    """Intersection over union of two binary masks; 0 on an empty union."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"iou: mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 0.0
    return int(np.logical_and(a, b).sum()) / union


def match_instances(pred_masks, gt_masks, threshold):
    """Greedy one-to-one matching of predictions to ground truth.

    Candidate pairs with IoU strictly above the threshold are accepted in
    order of descending IoU (ties: lower gt index, then lower pred index).
    Returns (tp, fp, fn, matching) with matching as {gt index: pred index}.
    """
    candidates = []
    for gi, g in enumerate(gt_masks):
        for pi, p in enumerate(pred_masks):
            v = iou(p, g)
            if v > threshold:
                candidates.append((-v, gi, pi))
    candidates.sort()
    matching = {}
    used_pred = set()
    for _, gi, pi in candidates:
        if gi in matching or pi in used_pred:
            continue
        matching[gi] = pi
        used_pred.add(pi)
    tp = len(matching)
    fp = len(pred_masks) - tp
    fn = len(gt_masks) - tp
    return tp, fp, fn, matching


def average_precision(tp, fp, fn):
    """AP = TP / (TP + FP + FN); 1 when all three counts are zero."""
    total = tp + fp + fn
    return 1.0 if total == 0 else tp / total


def aji(pred_masks, gt_masks):
    """Aggregated Jaccard Index with a fixed matching protocol.

    Ground-truth instances are processed in index order; each selects the
    unused prediction with maximal IoU (ties: lowest prediction index).
    A gt with no overlapping unused prediction contributes its own pixels
    to the union only.  Unused prediction pixels are added to the union at
    the end.
    """
    used = set()
    inter_total = 0
    union_total = 0
    for g in gt_masks:
        g = np.asarray(g, dtype=bool)
        best_iou = 0.0
        best_j = None
        for j, p in enumerate(pred_masks):
            if j in used:
                continue
            v = iou(p, g)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j is None:
            union_total += int(g.sum())
            continue
        p = np.asarray(pred_masks[best_j], dtype=bool)
        inter_total += int(np.logical_and(g, p).sum())
        union_total += int(np.logical_or(g, p).sum())
        used.add(best_j)
    for j, p in enumerate(pred_masks):
        if j not in used:
            union_total += int(np.asarray(p, dtype=bool).sum())
    if union_total == 0:
        return 1.0 if not gt_masks and not pred_masks else 0.0
    return inter_total / union_total


def evaluate_pair(pred_masks, gt_masks):
    """Per-scene counts at every AP threshold plus the scene AJI."""
    counts = []
    for t in AP_THRESHOLDS:
        tp, fp, fn, _ = match_instances(pred_masks, gt_masks, t)
        counts.append(ThresholdCounts(threshold=t, tp=tp, fp=fp, fn=fn))
    return counts, aji(pred_masks, gt_masks)


def evaluate_dataset(predictions, ground_truths) -> MatchReport:
    """Counts are pooled across scenes before computing AP_t; AJI is
    computed per scene and averaged."""
    if len(predictions) != len(ground_truths):
        raise ValueError(
            f"evaluate_dataset: {len(predictions)} predictions vs "
            f"{len(ground_truths)} ground truths")
    pooled = [ThresholdCounts(threshold=t) for t in AP_THRESHOLDS]
    ajis = []
    for pred, gt in zip(predictions, ground_truths):
        counts, scene_aji = evaluate_pair(pred, gt)
        for agg, c in zip(pooled, counts):
            agg.tp += c.tp
            agg.fp += c.fp
            agg.fn += c.fn
        ajis.append(scene_aji)
    mean_ap = float(np.mean([c.ap for c in pooled])) if pooled else 0.0
    mean_aji = float(np.mean(ajis)) if ajis else 1.0
    return MatchReport(per_threshold=pooled, mean_ap=mean_ap, aji=mean_aji)
