"""Attention masks from the previous layer's predictions.

The mask is the union of a thresholded semantic map and enlarged object
regions around the top-scoring boxes. Everything here runs on detached numpy
arrays; no gradient flows through mask construction.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import softmax_np
from .scenes import GridSpec, Scene, footprint_mask


class MaskDesign(str, enum.Enum):
    BOX = "box"
    CIRCLE = "circle"
    SCALED_CIRCLE = "scaled_circle"


@dataclass
class ModulationConfig:
    seg_threshold: float = 0.1
    top_k: int = 200
    detect_mask_mode: MaskDesign = MaskDesign.SCALED_CIRCLE
    scale: float = 1.3
    neg_value: float = 1e9
    length_mode: str = "l"  # "l" or "max_lw"
    score_threshold: float = 0.0
    per_query: bool = False

    def __post_init__(self):
        self.detect_mask_mode = MaskDesign(self.detect_mask_mode)
        if not 0.0 < self.seg_threshold < 1.0:
            raise ValueError("seg_threshold must lie in (0, 1)")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.length_mode not in ("l", "max_lw"):
            raise ValueError(f"unknown length_mode {self.length_mode!r}")

    @classmethod
    def unmodulated(cls) -> "ModulationConfig":
        """Plain union mask: 0.5-thresholded map, raw boxes of confident queries."""
        return cls(seg_threshold=0.5, top_k=10**6, detect_mask_mode=MaskDesign.BOX, score_threshold=0.5)

    def to_json(self) -> dict:
        d = asdict(self)
        d["detect_mask_mode"] = self.detect_mask_mode.value
        return d


def foreground_scores(class_logits: np.ndarray) -> np.ndarray:
    """Max over the real classes of the softmax (last column is no-object)."""
    p = softmax_np(np.asarray(class_logits, dtype=np.float64), axis=-1)
    return p[:, :-1].max(axis=1)


def seg_mask(mask_s: np.ndarray, tau: float) -> np.ndarray:
    """(K, H, W) -> (H, W): cells where some class exceeds ``tau`` (strictly)."""
    return np.asarray(mask_s).max(axis=0) > tau


def select_topk(class_logits: np.ndarray, k: int) -> np.ndarray:
    return topk_by_score(foreground_scores(class_logits), k)


def topk_by_score(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores, descending, ties to the lower index."""
    k = min(int(k), len(scores))
    order = np.argsort(-np.asarray(scores), kind="stable")
    return order[:k]


def rasterize_object_mask(box, mode: MaskDesign, scale: float, grid: GridSpec, length_mode: str = "l") -> np.ndarray:
    """Cells covered by the detection mask of one decoded box (x, y, z, l, w, h, theta)."""
    x, y, _, l, w, _, theta = (float(v) for v in box[:7])
    mode = MaskDesign(mode)
    if mode is MaskDesign.BOX:
        return footprint_mask(x, y, l, w, theta, grid)
    length = max(l, w) if length_mode == "max_lw" else l
    diameter = length * (scale if mode is MaskDesign.SCALED_CIRCLE else 1.0)
    radius = diameter / 2.0
    X, Y = grid.cell_centers()
    mask = (X - x) ** 2 + (Y - y) ** 2 <= radius * radius
    row, col = grid.metric_to_cell(x, y)
    if 0 <= row < grid.h and 0 <= col < grid.w:
        mask[row, col] = True
    return mask


@dataclass
class ModulationInput:
    """Detached view of one layer's predictions."""

    semantic_map: np.ndarray  # (K_seg, H, W)
    boxes: np.ndarray  # (N, 7) decoded
    scores: np.ndarray  # (N,)
    query_masks: np.ndarray | None = None  # (N, H, W) per-query binary masks, optional

    @classmethod
    def from_scene(cls, scene: Scene) -> "ModulationInput":
        boxes = scene.boxes()
        return cls(scene.semantic.astype(np.float64), boxes, np.ones(len(boxes)))

    @classmethod
    def empty(cls, k_seg: int, grid: GridSpec) -> "ModulationInput":
        return cls(np.zeros((k_seg, grid.h, grid.w)), np.zeros((0, 7)), np.zeros(0))


def union_region(inp: ModulationInput, cfg: ModulationConfig, grid: GridSpec) -> np.ndarray:
    region = seg_mask(inp.semantic_map, cfg.seg_threshold)
    for i in topk_by_score(inp.scores, cfg.top_k):
        if inp.scores[i] < cfg.score_threshold:
            continue
        region |= rasterize_object_mask(inp.boxes[i], cfg.detect_mask_mode, cfg.scale, grid, cfg.length_mode)
    return region


def build_attention_mask(inp: ModulationInput, cfg: ModulationConfig, grid: GridSpec) -> np.ndarray:
    """Additive (H*W,) mask: 0 on the attended union, -neg_value elsewhere; all zeros if the union is empty."""
    region = union_region(inp, cfg, grid).reshape(-1)
    if not region.any():
        return np.zeros(region.size, dtype=np.float32)
    return np.where(region, 0.0, -cfg.neg_value).astype(np.float32)


def build_query_masks(inp: ModulationInput, cfg: ModulationConfig, grid: GridSpec) -> np.ndarray:
    """Per-query variant: (N, H*W), each query sees its own thresholded mask plus its own object region."""
    n = len(inp.boxes)
    region = np.asarray(inp.query_masks).reshape(n, -1) > cfg.seg_threshold
    keep = set(topk_by_score(inp.scores, cfg.top_k).tolist())
    for i in range(n):
        if i in keep and inp.scores[i] >= cfg.score_threshold:
            region[i] |= rasterize_object_mask(inp.boxes[i], cfg.detect_mask_mode, cfg.scale, grid,
                                               cfg.length_mode).reshape(-1)
    out = np.where(region, 0.0, -cfg.neg_value).astype(np.float32)
    out[~region.any(axis=1)] = 0.0
    return out

