"""Segmentation IoU and centre-distance detection AP."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class IoUResult:
    per_class: np.ndarray  # (K,) IoU per class, 1.0 where prediction and GT are both empty
    gt_present: np.ndarray  # (K,) bool

    @property
    def mean(self) -> float:
        if not self.gt_present.any():
            return 1.0
        return float(self.per_class[self.gt_present].mean())


def iou_counts(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5):
    """Per-class (intersection, union, gt cell count) after binarising ``pred`` at ``threshold``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"miou: prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    p = pred > threshold
    k = pred.shape[0]
    inter = (p & gt).reshape(k, -1).sum(axis=1)
    union = (p | gt).reshape(k, -1).sum(axis=1)
    return inter, union, gt.reshape(k, -1).sum(axis=1)


def miou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> IoUResult:
    """IoU per class; the mean covers classes whose ground truth is non-empty."""
    inter, union, n_gt = iou_counts(pred, gt, threshold)
    per = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return IoUResult(per, n_gt > 0)


def dataset_miou(preds: list[np.ndarray], gts: list[np.ndarray], threshold: float = 0.5) -> IoUResult:
    """IoU accumulated over all cells of all scenes (counts summed before dividing)."""
    inter = union = n_gt = 0
    for p, g in zip(preds, gts):
        i, u, n = iou_counts(p, g, threshold)
        inter, union, n_gt = inter + i, union + u, n_gt + n
    inter, union, n_gt = np.asarray(inter), np.asarray(union), np.asarray(n_gt)
    per = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return IoUResult(per, n_gt > 0)


@dataclass
class Detections:
    """One scene's predicted boxes (M, 7), scores (M,) and labels (M,)."""

    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros((0, 7)), np.zeros(0), np.zeros(0, dtype=np.int64))


@dataclass
class APResult:
    thresholds: tuple
    per_class: np.ndarray  # (n_thresholds, K), NaN for classes without GT
    mean: np.ndarray = field(default=None)  # (n_thresholds,)

    def at(self, threshold: float) -> float:
        return float(self.mean[self.thresholds.index(threshold)])


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated area under precision/recall for detections already sorted by score."""
    if n_gt == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, tp.size + 1)
    recall = ctp / n_gt
    # best precision at recall >= r
    best = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < tp.size, best[np.minimum(idx, tp.size - 1)], 0.0)
    return float(vals.mean())


def _class_tp(dets: list[Detections], gts: list[tuple[np.ndarray, np.ndarray]], cls: int, thr: float):
    entries = []  # (score, scene, det index)
    for s, d in enumerate(dets):
        for i in np.flatnonzero(np.asarray(d.labels) == cls):
            entries.append((float(d.scores[i]), s, int(i)))
    entries.sort(key=lambda e: -e[0])  # stable: ties keep scene/detection order
    taken = [np.zeros(int(np.sum(labels == cls)), dtype=bool) for _, labels in gts]
    centres = [boxes[labels == cls, :2] for boxes, labels in gts]
    tp = np.zeros(len(entries))
    for j, (_, s, i) in enumerate(entries):
        if centres[s].shape[0] == 0:
            continue
        dist = np.hypot(*(centres[s] - dets[s].boxes[i, :2]).T)
        dist[taken[s]] = np.inf
        best = int(np.argmin(dist))
        if dist[best] <= thr:
            taken[s][best] = True
            tp[j] = 1.0
    n_gt = sum(t.size for t in taken)
    return tp, n_gt


def detection_ap(dets, gts, n_classes: int, thresholds=DIST_THRESHOLDS) -> APResult:
    """Centre-distance AP per threshold and class, greedy matching by descending score.

    ``dets`` is a list of :class:`Detections` (or a single one) and ``gts`` the
    matching list of (boxes, labels) pairs. Classes without ground truth are
    left out of the mean.
    """
    if isinstance(dets, Detections):
        dets, gts = [dets], [gts]
    gts = [(np.asarray(b, dtype=np.float64).reshape(-1, 7), np.asarray(l, dtype=np.int64)) for b, l in gts]
    thresholds = tuple(float(t) for t in thresholds)
    per = np.full((len(thresholds), n_classes), np.nan)
    n_pred = [int(np.sum(np.concatenate([np.asarray(d.labels) for d in dets] or [np.zeros(0)]) == c))
              for c in range(n_classes)]
    for ti, thr in enumerate(thresholds):
        for c in range(n_classes):
            tp, n_gt = _class_tp(dets, gts, c, thr)
            per[ti, c] = interpolated_ap(tp, n_gt)
    has_gt = ~np.isnan(per[0])
    if has_gt.any():
        mean = per[:, has_gt].mean(axis=1)
    else:
        mean = np.full(len(thresholds), 0.0 if sum(n_pred) else 1.0)
    return APResult(thresholds, per, mean)
