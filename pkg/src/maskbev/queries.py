"""Anchor-based query construction: sinusoidal encoding of the 7 anchor scalars + MLP."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor
from .nn import MLP, Module, param
from .scenes import DEFAULT_SIZES, GridSpec

ANCHOR_DIM = 7
TEMPERATURE = 10000.0


def pe_width(channels: int) -> int:
    """Per-scalar encoding width; 7 of them stay close to 2C."""
    return 2 * (channels // ANCHOR_DIM)


def sinusoidal_pe(x, d_pe: int, temperature: float = TEMPERATURE) -> np.ndarray:
    """Interleaved [sin(x/T^(2i/d)), cos(x/T^(2i/d))] for i < d/2; vectorised over ``x``."""
    if d_pe < 2 or d_pe % 2:
        raise ValueError(f"d_pe must be an even integer >= 2, got {d_pe}")
    x = np.asarray(x, dtype=np.float64)
    freqs = temperature ** (-2.0 * np.arange(d_pe // 2) / d_pe)
    arg = x[..., None] * freqs
    out = np.empty(x.shape + (d_pe,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def anchor_pe(anchors: np.ndarray, d_pe: int) -> np.ndarray:
    """(N, 7) anchors -> (N, 7 * d_pe) concatenated per-scalar encodings."""
    anchors = np.asarray(anchors, dtype=np.float64)
    return sinusoidal_pe(anchors, d_pe).reshape(anchors.shape[0], -1)


class PeMlp(MLP):
    def __init__(self, channels: int, rng: np.random.Generator, n_scalars: int = ANCHOR_DIM):
        self.d_pe = pe_width(channels)
        self.n_scalars = n_scalars
        super().__init__([n_scalars * self.d_pe, channels, channels], rng)

    @property
    def in_width(self) -> int:
        return self.layers[0].weight.shape[0]


def encode_anchor(anchor, mlp: PeMlp) -> Tensor:
    """P_q for one anchor (7,) -> (C,), or a batch (N, 7) -> (N, C)."""
    a = np.asarray(anchor, dtype=np.float64)
    single = a.ndim == 1
    a = a.reshape(-1, a.shape[-1])
    feats = anchor_pe(a, mlp.d_pe)
    if feats.shape[1] != mlp.in_width:
        raise ShapeError(f"encode_anchor: encoding width {feats.shape[1]} != MLP input {mlp.in_width}")
    out = mlp(Tensor(feats.astype(mlp.layers[0].weight.dtype)))
    return out.reshape(-1) if single else out


def median_size() -> tuple[float, float, float]:
    """Class-agnostic (l, w, h) prior: median over classes of the range midpoints."""
    mids = np.array([[sum(r) / 2 for r in DEFAULT_SIZES[c]] for c in DEFAULT_SIZES])
    return tuple(float(v) for v in np.median(mids, axis=0))


@dataclass
class QueryState:
    anchors: np.ndarray  # (N, 7)
    content: Tensor  # (N, C), learnable
    pos_embed: Tensor | None = None  # (N, C)

    @property
    def n(self) -> int:
        return self.anchors.shape[0]

    def refresh(self, mlp: PeMlp) -> "QueryState":
        self.pos_embed = encode_anchor(self.anchors, mlp)
        return self


def lattice_anchors(n: int, grid: GridSpec, rng: np.random.Generator) -> np.ndarray:
    """Jittered lattice of (x, y) centres covering the grid, padded to 7-DoF anchors."""
    rows = math.ceil(math.sqrt(n))
    cols = math.ceil(n / rows)
    xa, xb, ya, yb = grid.extent
    sx, sy = (xb - xa) / cols, (yb - ya) / rows
    r, c = np.divmod(np.arange(n), cols)
    x = xa + (c + 0.5) * sx + rng.uniform(-0.25, 0.25, n) * sx
    y = ya + (r + 0.5) * sy + rng.uniform(-0.25, 0.25, n) * sy
    l, w, h = median_size()
    out = np.zeros((n, ANCHOR_DIM))
    out[:, 0], out[:, 1] = x, y
    out[:, 3], out[:, 4], out[:, 5] = l, w, h
    return out


def init_queries(n: int, grid: GridSpec, seed: int, channels: int = 64) -> QueryState:
    if n < 1:
        raise ValueError("need at least one query")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    anchors = lattice_anchors(n, grid, rng)
    content = param(rng.normal(0.0, 0.02, size=(n, channels)))
    return QueryState(anchors, content)
