"""Run a model over scenes and score it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import no_grad
from .decoder import TaskPrediction
from .metrics import DIST_THRESHOLDS, APResult, Detections, IoUResult, dataset_miou, detection_ap
from .scenes import DET_CLASSES, SEG_CLASSES, Scene, render_observation


def observation_seed(scene_seed: int) -> int:
    """Each scene gets one fixed noise draw so every epoch sees the same input."""
    return (int(scene_seed) * 2654435761 + 97) % (2**63)


def observe(scene: Scene, noise_sigma: float) -> np.ndarray:
    return render_observation(scene, noise_sigma, observation_seed(scene.seed)).raster


def detections(pred: TaskPrediction) -> Detections:
    """All N queries: decoded box, best foreground class and its probability."""
    return Detections(pred.boxes(), pred.scores(), pred.labels())


@dataclass
class EvalReport:
    iou: IoUResult
    ap: APResult

    @property
    def miou(self) -> float:
        return self.iou.mean

    def summary(self) -> dict:
        out = {"miou": self.miou}
        for t in self.ap.thresholds:
            out[f"ap@{t:g}"] = self.ap.at(t)
        for name, v in zip(SEG_CLASSES, self.iou.per_class):
            out[f"iou/{name}"] = float(v)
        return out


def score(semantic_maps: list[np.ndarray], dets: list[Detections], scenes: list[Scene],
          thresholds=DIST_THRESHOLDS) -> EvalReport:
    iou = dataset_miou(semantic_maps, [s.semantic for s in scenes])
    ap = detection_ap(dets, [(s.boxes(), s.labels()) for s in scenes], len(DET_CLASSES), thresholds)
    return EvalReport(iou, ap)


def evaluate(model, scenes: list[Scene], noise_sigma: float | None = None) -> EvalReport:
    sigma = model.cfg.encoder.noise_sigma if noise_sigma is None else noise_sigma
    maps, dets = [], []
    with no_grad():
        for scene in scenes:
            final = model(observe(scene, sigma))[-1]
            maps.append(final.semantic_map.data)
            dets.append(detections(final))
    return score(maps, dets, scenes)


def baseline_report(scenes: list[Scene]) -> EvalReport:
    """All-background maps and no detections."""
    k = len(SEG_CLASSES)
    maps = [np.zeros((k,) + s.semantic.shape[1:]) for s in scenes]
    return score(maps, [Detections.empty() for _ in scenes], scenes)
