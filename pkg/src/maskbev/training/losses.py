"""Focal, L1 and combined multi-task losses."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..autodiff import Tensor, abs_, clip, log, mean, softmax
from ..decoder import TaskPrediction, encode_box_targets
from ..scenes import Scene
from .matching import MatchResult, detection_cost, hungarian_match

P_MIN = 1e-6


@dataclass
class LossConfig:
    cls_weight: float = 2.0
    box_weight: float = 0.25
    alpha: float = 3.0
    beta: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    deep_supervision: bool = True

    def __post_init__(self):
        for name in ("cls_weight", "box_weight", "alpha", "beta", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.focal_alpha <= 1.0:
            raise ValueError("focal_alpha must lie in [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)


def focal_loss(p: Tensor, y: np.ndarray, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean binary focal loss of probabilities ``p`` against {0, 1} targets ``y``.

    ``p`` is clamped to [1e-6, 1 - 1e-6] with a straight-through gradient, so
    inputs slightly outside (0, 1) still train towards the target.
    """
    y = np.asarray(y, dtype=p.dtype)
    if y.shape != p.shape:
        raise ValueError(f"focal_loss: target shape {y.shape} != prediction shape {p.shape}")
    p = clip(p, P_MIN, 1.0 - P_MIN, straight_through=True)
    q = 1.0 - p
    pos = (q ** gamma) * log(p) * (-alpha) if gamma else log(p) * (-alpha)
    neg = (p ** gamma) * log(q) * (alpha - 1.0) if gamma else log(q) * (alpha - 1.0)
    return mean(pos * y + neg * (1.0 - y))


def l1_box_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean |pred - target| over matched pairs and the 8 regression slots."""
    return mean(abs_(pred - np.asarray(target, dtype=pred.dtype)))


@dataclass
class LossBreakdown:
    total: Tensor
    l_cls: float
    l_box: float
    l_seg: float
    matches: list[MatchResult]

    def as_row(self) -> dict:
        return {"l_total": float(self.total.data), "l_cls": self.l_cls, "l_box": self.l_box, "l_seg": self.l_seg}


def match_layer(pred: TaskPrediction, scene: Scene, cfg: LossConfig) -> MatchResult:
    cost = detection_cost(pred.class_logits.data, pred.box_params.data, pred.anchors, scene.boxes(),
                          scene.labels(), cfg.cls_weight, cfg.box_weight)
    return hungarian_match(cost)


def layer_losses(pred: TaskPrediction, scene: Scene, cfg: LossConfig, match: MatchResult | None = None):
    """(L_cls, L_box, L_seg, match) for one decoder layer."""
    if match is None:
        match = match_layer(pred, scene, cfg)
    n, k1 = pred.class_logits.shape
    target = np.zeros((n, k1))
    target[:, -1] = 1.0
    labels = scene.labels()
    q, g = match.queries, match.gts
    if len(q):
        target[q, -1] = 0.0
        target[q, labels[g]] = 1.0
    probs = softmax(pred.class_logits, axis=-1)
    l_cls = focal_loss(probs, target, cfg.focal_gamma, cfg.focal_alpha)
    if len(q):
        box_target = encode_box_targets(scene.boxes()[g], pred.anchors[q])
        l_box = l1_box_loss(pred.box_params[q], box_target)
    else:
        l_box = None
    l_seg = focal_loss(pred.semantic_map, scene.semantic, cfg.focal_gamma, cfg.focal_alpha)
    return l_cls, l_box, l_seg, match


def total_loss(preds: list[TaskPrediction], scene: Scene, cfg: LossConfig) -> LossBreakdown:
    """alpha * (w_cls * L_cls + w_box * L_box) + beta * L_seg, summed over layers under deep supervision."""
    used = preds if cfg.deep_supervision else preds[-1:]
    total = None
    parts = np.zeros(3)
    matches = []
    for pred in used:
        l_cls, l_box, l_seg, match = layer_losses(pred, scene, cfg)
        l_3d = l_cls * cfg.cls_weight
        if l_box is not None:
            l_3d = l_3d + l_box * cfg.box_weight
        layer_total = l_3d * cfg.alpha + l_seg * cfg.beta
        total = layer_total if total is None else total + layer_total
        parts += [float(l_cls.data), float(l_box.data) if l_box is not None else 0.0, float(l_seg.data)]
        matches.append(match)
    return LossBreakdown(total, *parts.tolist(), matches)
