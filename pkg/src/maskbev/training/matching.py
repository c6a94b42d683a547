"""Bipartite assignment of queries to ground-truth objects."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..autodiff import softmax_np
from ..decoder import encode_box_targets


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (query index, gt index), sorted by query index
    n_queries: int
    n_gt: int

    @property
    def queries(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def gts(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)

    def unmatched(self) -> np.ndarray:
        used = set(q for q, _ in self.pairs)
        return np.array([i for i in range(self.n_queries) if i not in used], dtype=np.int64)


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Minimum-total-cost injective assignment of min(n, m) pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        return MatchResult([], n, m)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return MatchResult(pairs, n, m)


def match_cost(result: MatchResult, cost: np.ndarray) -> float:
    return float(sum(cost[q, g] for q, g in result.pairs))


def detection_cost(class_logits: np.ndarray, box_params: np.ndarray, anchors: np.ndarray,
                   gt_boxes: np.ndarray, gt_labels: np.ndarray,
                   cls_weight: float = 2.0, box_weight: float = 0.25) -> np.ndarray:
    """(N, M) cost: cls_weight * (-p(gt class)) + box_weight * ||box params - gt params||_1.

    GT boxes are encoded against each query's own anchor so the L1 distance is
    taken in the same 8-value space as the regression targets. The distance is
    summed over the 8 slots, not averaged, so centre offsets in metres are not
    drowned out by the class term.
    """
    logits = np.asarray(class_logits, dtype=np.float64)
    params = np.asarray(box_params, dtype=np.float64)
    n, m = logits.shape[0], len(gt_labels)
    if m == 0:
        return np.zeros((n, 0))
    probs = softmax_np(logits, axis=-1)
    cls_cost = -probs[:, np.asarray(gt_labels, dtype=np.int64)]
    box_cost = np.empty((n, m))
    for j in range(m):
        targets = encode_box_targets(np.repeat(gt_boxes[j:j + 1], n, axis=0), anchors)
        box_cost[:, j] = np.abs(params - targets).sum(axis=1)
    return cls_weight * cls_cost + box_weight * box_cost
