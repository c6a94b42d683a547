"""Deterministic BEV images as binary PPM (P6)."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenes import GridSpec, Scene

BACKGROUND = (24, 24, 28)
SEG_PALETTE = [
    (70, 70, 80),  # drivable
    (200, 200, 200),  # ped_crossing
    (60, 110, 60),  # walkway
    (220, 60, 60),  # stop_line
    (90, 70, 130),  # carpark
    (230, 200, 60),  # divider
]
DET_PALETTE = [(60, 160, 255), (255, 120, 40), (255, 60, 200)]


@dataclass
class BevView:
    """What gets drawn: binary map layers and labelled boxes."""

    semantic: np.ndarray  # (K, H, W) bool
    boxes: np.ndarray  # (M, 7)
    labels: np.ndarray  # (M,)
    grid: GridSpec

    @classmethod
    def from_scene(cls, scene: Scene) -> "BevView":
        return cls(scene.semantic.astype(bool), scene.boxes(), scene.labels(), scene.grid)

    @classmethod
    def from_prediction(cls, semantic_map: np.ndarray, boxes: np.ndarray, scores: np.ndarray, labels: np.ndarray,
                        grid: GridSpec, score_threshold: float = 0.3, map_threshold: float = 0.5) -> "BevView":
        keep = np.asarray(scores) >= score_threshold
        return cls(np.asarray(semantic_map) > map_threshold, np.asarray(boxes)[keep], np.asarray(labels)[keep], grid)


def _line(img: np.ndarray, x0: float, y0: float, x1: float, y1: float, color) -> None:
    """Rasterise a segment in pixel coordinates by uniform sampling (clipped to the image)."""
    h, w, _ = img.shape
    n = int(math.ceil(max(abs(x1 - x0), abs(y1 - y0)))) + 1
    t = np.linspace(0.0, 1.0, n + 1)
    xs = np.floor(x0 + (x1 - x0) * t).astype(np.int64)
    ys = np.floor(y0 + (y1 - y0) * t).astype(np.int64)
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    img[ys[ok], xs[ok]] = color


def _to_pixel(x: float, y: float, grid: GridSpec, scale: int) -> tuple[float, float]:
    # image rows run from +y (top) to -y (bottom)
    x0, y0 = grid.origin
    m = grid.meters_per_cell
    px = (x - x0) / m * scale
    py = (grid.h - (y - y0) / m) * scale
    return px, py


def render_image(view: BevView, scale: int = 4) -> np.ndarray:
    """(H*s, W*s, 3) uint8 image."""
    if scale < 1:
        raise ValueError("scale must be a positive integer")
    grid = view.grid
    cells = np.empty((grid.h, grid.w, 3), dtype=np.uint8)
    cells[:] = BACKGROUND
    for k in range(view.semantic.shape[0]):
        cells[view.semantic[k]] = SEG_PALETTE[k % len(SEG_PALETTE)]
    img = np.repeat(np.repeat(cells[::-1], scale, axis=0), scale, axis=1)
    for box, label in zip(view.boxes, view.labels):
        x, y, _, l, w, _, theta = (float(v) for v in box[:7])
        color = DET_PALETTE[int(label) % len(DET_PALETTE)]
        c, s = math.cos(theta), math.sin(theta)
        corners = [(x + c * dl - s * dw, y + s * dl + c * dw)
                   for dl, dw in ((l / 2, w / 2), (-l / 2, w / 2), (-l / 2, -w / 2), (l / 2, -w / 2))]
        px = [_to_pixel(cx, cy, grid, scale) for cx, cy in corners]
        for i in range(4):
            _line(img, *px[i], *px[(i + 1) % 4], color)
        cx, cy = _to_pixel(x, y, grid, scale)
        fx, fy = _to_pixel(x + c * l / 2, y + s * l / 2, grid, scale)
        _line(img, cx, cy, fx, fy, color)
    return img


def ppm_bytes(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def write_ppm(img: np.ndarray, path) -> None:
    Path(path).write_bytes(ppm_bytes(img))


def render(view, path, scale: int = 4) -> None:
    """Write a scene or prediction view to ``path`` as P6 PPM."""
    if isinstance(view, Scene):
        view = BevView.from_scene(view)
    write_ppm(render_image(view, scale), path)


def read_ppm(path) -> np.ndarray:
    """Read back a P6 file with the single-whitespace header this module writes."""
    data = Path(path).read_bytes()
    m = re.match(rb"P6\s(\d+)\s(\d+)\s(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data[m.end():m.end() + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
