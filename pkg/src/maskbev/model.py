"""The full network: encoder stub, scene aggregation and the multi-task decoder."""
from __future__ import annotations

import math

import numpy as np

from .aggregation import SceneAggregation
from .autodiff import Tensor
from .config import RunConfig
from .decoder import DecoderLayer, TaskPrediction, decoder_forward, locality_sigmas
from .encoder import EncoderStub
from .nn import MLP, Module
from .queries import PeMlp, QueryState, init_queries, median_size, sinusoidal_pe
from .scenes import DET_CLASSES, SEG_CLASSES, GridSpec, observation_channels


def cell_position_features(grid: GridSpec, width: int) -> np.ndarray:
    """(H*W, 2 * width) sinusoidal encoding of every cell centre's (x, y)."""
    X, Y = grid.cell_centers()
    return np.concatenate([sinusoidal_pe(X.reshape(-1), width), sinusoidal_pe(Y.reshape(-1), width)], axis=1)


def box_prior() -> np.ndarray:
    """Initial box-head bias: zero offsets, median sizes, centred z, heading 0."""
    l, w, h = median_size()
    return np.array([0.0, 0.0, h / 2, math.log(l), math.log(w), math.log(h), 0.0, 1.0])


class MaskBEV(Module):
    def __init__(self, cfg: RunConfig, seed: int | None = None, zero_heads: bool = False,
                 n_det: int = len(DET_CLASSES), n_seg: int = len(SEG_CLASSES)):
        seed = cfg.train.seed if seed is None else int(seed)
        self.cfg = cfg
        self.grid = cfg.grid
        c = cfg.encoder.channels
        n = cfg.queries.n
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.encoder = EncoderStub(observation_channels(n_seg, n_det), c, cfg.encoder.depth, rng)
        self._cell_pe = cell_position_features(cfg.grid, c // 2)
        self.key_pos = MLP([self._cell_pe.shape[1], c, c], rng)
        self.aggregation = SceneAggregation(c, cfg.aggregation, rng)
        q0 = init_queries(n, cfg.grid, seed, c)
        self.pe_mlp = PeMlp(c, rng)
        self.query_content = q0.content
        self.anchors = q0.anchors
        cls_bias = math.log(9.0 * n_det)  # about 10% foreground probability at start
        sem_bias = math.log(2.0 * n)  # per-class weights over all queries start near 0.5 in total
        dec = cfg.decoder
        sigmas = locality_sigmas(dec.heads, dec.sigma_min, dec.sigma_max) if dec.locality else None
        self.layers = [
            DecoderLayer(c, n_det, n_seg, rng, zero_heads, box_prior(), cls_bias, sem_bias, sigmas)
            for _ in range(dec.layers)
        ]

    def queries(self) -> QueryState:
        return QueryState(self.anchors.copy(), self.query_content)

    def bev_key_pos(self) -> Tensor:
        return self.key_pos(Tensor(self._cell_pe.astype(self.query_content.dtype)))

    def features(self, raster) -> tuple[Tensor, Tensor]:
        f = self.encoder(raster)
        return f, self.aggregation(f)

    def __call__(self, raster, detached_inputs=None) -> list[TaskPrediction]:
        f, f_a = self.features(raster)
        return decoder_forward(f, f_a, self.queries(), self.cfg.decoder.layers, self.layers, self.pe_mlp,
                               self.cfg.decoder.heads, self.cfg.modulation, self.grid, self.bev_key_pos(),
                               self.cfg.decoder.kv_source, detached_inputs)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = super().state_dict()
        state["buffer.anchors"] = self.anchors.astype(np.float32)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        state = dict(state)
        anchors = state.pop("buffer.anchors", None)
        super().load_state_dict(state)
        if anchors is not None:
            if anchors.shape != self.anchors.shape:
                raise ValueError(f"anchors: checkpoint shape {anchors.shape} != model shape {self.anchors.shape}")
            self.anchors = np.asarray(anchors, dtype=np.float64)
