"""Unified multi-task decoder.

Queries are kept in token layout, (N, C). A layer runs masked cross-attention
onto the BEV features, self-attention among queries and an FFN (pre-norm,
residual), then four heads read the queries: class logits, 8 box parameters,
semantic logits and a mask embedding. The mask embedding dotted with the
aggregated features gives each query's binary BEV mask; the softmax-weighted
sum of those masks is the semantic map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, exp, gelu, sigmoid, softmax
from .modulation import (
    ModulationConfig,
    ModulationInput,
    build_attention_mask,
    build_query_masks,
    foreground_scores,
)
from .nn import MLP, LayerNorm, Linear, Module, param
from .queries import PeMlp, QueryState, encode_anchor
from .scenes import GridSpec

BOX_PARAMS = 8
LOG_SIZE_RANGE = (-4.0, 4.0)


class AttentionParams(Module):
    """Bias-free W_q, W_k, W_v and output projection."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.w_q = Linear(channels, channels, rng, bias=False)
        self.w_k = Linear(channels, channels, rng, bias=False)
        self.w_v = Linear(channels, channels, rng, bias=False)
        self.w_o = Linear(channels, channels, rng, bias=False)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    n, c = t.shape
    return t.reshape(n, heads, c // heads).transpose(1, 0, 2)


def _merge_heads(t: Tensor) -> Tensor:
    h, n, d = t.shape
    return t.transpose(1, 0, 2).reshape(n, h * d)


def attention_weights(q: Tensor, k: Tensor, heads: int, mask: np.ndarray | None = None,
                      bias: Tensor | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_head) + bias + mask) per head: (heads, Nq, Nk)."""
    if q.shape[1] % heads:
        raise ShapeError(f"channels {q.shape[1]} not divisible by {heads} heads")
    dh = q.shape[1] // heads
    logits = (_split_heads(q, heads) @ _split_heads(k, heads).transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
    if bias is not None:
        logits = logits + bias
    if mask is not None:
        logits = logits + np.asarray(mask, dtype=logits.dtype)
    return softmax(logits, axis=-1)


def bev_tokens(f: Tensor) -> Tensor:
    c, h, w = f.shape
    return f.reshape(c, h * w).transpose(1, 0)


def masked_cross_attention(q: Tensor, f: Tensor, mask: np.ndarray | None, params: AttentionParams, heads: int,
                           pos: Tensor | None = None, key_pos: Tensor | None = None,
                           norm: LayerNorm | None = None, return_weights: bool = False,
                           bias: Tensor | None = None):
    """Q + softmax(M + (Q W_q)(F W_k)^T / sqrt(d)) (F W_v) W_o for queries (N, C) and features (C, H, W).

    ``mask`` is an additive (H*W,) union mask or an (N, H*W) per-query mask.
    ``pos`` is added to the queries and ``key_pos`` to the features before both
    the key and value projections, so attended values carry cell positions;
    ``norm`` is applied to the queries before attending (pre-norm) and ``bias``
    (heads, N, H*W) is added to the logits.
    """
    c, h, w = f.shape
    if q.shape[1] != c:
        raise ShapeError(f"masked_cross_attention: query width {q.shape[1]} != feature channels {c}")
    if mask is not None and np.shape(mask)[-1] != h * w:
        raise ShapeError(f"masked_cross_attention: mask length {np.shape(mask)[-1]} != H*W = {h * w}")
    tokens = bev_tokens(f)
    x = norm(q) if norm is not None else q
    if pos is not None:
        x = x + pos
    keys_in = tokens + key_pos if key_pos is not None else tokens
    attn = attention_weights(params.w_q(x), params.w_k(keys_in), heads, mask, bias)
    out = q + params.w_o(_merge_heads(attn @ _split_heads(params.w_v(keys_in), heads)))
    return (out, attn) if return_weights else out


def query_self_attention(q: Tensor, params: AttentionParams, heads: int, pos: Tensor | None = None,
                         norm: LayerNorm | None = None) -> Tensor:
    x = norm(q) if norm is not None else q
    qk = x + pos if pos is not None else x
    attn = attention_weights(params.w_q(qk), params.w_k(qk), heads)
    return q + params.w_o(_merge_heads(attn @ _split_heads(params.w_v(qk), heads)))


def locality_sigmas(heads: int, lo: float, hi: float) -> np.ndarray:
    """Per-head initial widths in metres, geometric from ``lo`` to ``hi``."""
    return np.geomspace(lo, hi, heads) if heads > 1 else np.array([lo])


def distance_bias(log_sigma: Tensor, anchors: np.ndarray, cells: np.ndarray) -> Tensor:
    """-|anchor - cell|^2 / (2 sigma_h^2) for every head, query and (x, y) cell centre: (heads, N, H*W)."""
    a = np.asarray(anchors, dtype=np.float64)
    d2 = ((a[:, None, :2] - np.asarray(cells, dtype=np.float64)[None]) ** 2).sum(-1)
    heads = log_sigma.shape[0]
    inv = exp(log_sigma * -2.0).reshape(heads, 1, 1).expand((heads,) + d2.shape)
    return inv * Tensor((-0.5 * d2).astype(log_sigma.dtype))


class FFN(Module):
    def __init__(self, channels: int, rng: np.random.Generator, hidden: int | None = None):
        self.norm = LayerNorm(channels)
        self.fc1 = Linear(channels, hidden or 2 * channels, rng)
        self.fc2 = Linear(hidden or 2 * channels, channels, rng)

    def __call__(self, q: Tensor) -> Tensor:
        return q + self.fc2(gelu(self.fc1(self.norm(q))))


class PredictionHeads(Module):
    def __init__(self, channels: int, n_det: int, n_seg: int, rng: np.random.Generator, zero_init: bool = False,
                 box_prior: np.ndarray | None = None, cls_noobj_bias: float = 0.0, sem_noobj_bias: float = 0.0):
        self.norm = LayerNorm(channels)
        self.cls = Linear(channels, n_det + 1, rng, zero=zero_init, std=0.01)
        self.box = MLP([channels, channels, BOX_PARAMS], rng, zero_last=zero_init)
        self.sem = Linear(channels, n_seg + 1, rng, zero=zero_init, std=0.01)
        self.mask_embed = MLP([channels, channels, channels], rng, zero_last=zero_init)
        if not zero_init:
            self.box.layers[-1].weight.data *= 0.1
            if box_prior is not None:
                self.box.layers[-1].bias.data[:] = box_prior
            self.cls.bias.data[-1] = cls_noobj_bias
            self.sem.bias.data[-1] = sem_noobj_bias

    def __call__(self, q: Tensor):
        x = self.norm(q)
        return self.cls(x), self.box(x), self.sem(x), self.mask_embed(x)


def ffn_heads(q: Tensor, heads: PredictionHeads):
    """class_logits (N, K_det+1), box_params (N, 8), semantic logits (N, K_seg+1), mask embedding (N, C)."""
    return heads(q)


def mask_head(e_mask: Tensor, f_a: Tensor) -> Tensor:
    """sigmoid(E_mask[i] . F_a[:, cell]) -> (N, H, W)."""
    c, h, w = f_a.shape
    if e_mask.shape[1] != c:
        raise ShapeError(f"mask_head: embedding width {e_mask.shape[1]} != feature channels {c}")
    return sigmoid(e_mask @ f_a.reshape(c, h * w)).reshape(e_mask.shape[0], h, w)


def compose_semantic(sem_logits: Tensor, masks: Tensor) -> Tensor:
    """Mask_s[k] = sum_i softmax(S_i)[k] * Mask_b[i] over the real classes."""
    n, h, w = masks.shape
    probs = softmax(sem_logits, axis=-1)
    k = sem_logits.shape[1] - 1
    weights = probs[:, :k].transpose(1, 0)
    return (weights @ masks.reshape(n, h * w)).reshape(k, h, w)


def decode_boxes(box_params: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """(N, 8) regression outputs + (N, 7) anchors -> (N, 7) metric boxes."""
    p = np.asarray(box_params, dtype=np.float64)
    out = np.empty((p.shape[0], 7))
    out[:, 0] = anchors[:, 0] + p[:, 0]
    out[:, 1] = anchors[:, 1] + p[:, 1]
    out[:, 2] = p[:, 2]
    out[:, 3:6] = np.exp(np.clip(p[:, 3:6], *LOG_SIZE_RANGE))
    out[:, 6] = np.arctan2(p[:, 6], p[:, 7])
    out[:, 6][out[:, 6] == -np.pi] = np.pi
    return out


def encode_box_targets(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of :func:`decode_boxes` for ground truth: (M, 7) boxes vs matching (M, 7) anchors -> (M, 8)."""
    b = np.asarray(boxes, dtype=np.float64)
    out = np.empty((b.shape[0], BOX_PARAMS))
    out[:, 0] = b[:, 0] - anchors[:, 0]
    out[:, 1] = b[:, 1] - anchors[:, 1]
    out[:, 2] = b[:, 2]
    out[:, 3:6] = np.log(b[:, 3:6])
    out[:, 6] = np.sin(b[:, 6])
    out[:, 7] = np.cos(b[:, 6])
    return out


def refine_anchors(anchors: np.ndarray, box_params: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Shift centres by the predicted offsets (clamped to the grid) and take the other 5 values from the boxes."""
    boxes = decode_boxes(box_params, anchors)
    xa, xb, ya, yb = grid.extent
    margin = 1e-3 * grid.meters_per_cell
    boxes[:, 0] = np.clip(boxes[:, 0], xa + margin, xb - margin)
    boxes[:, 1] = np.clip(boxes[:, 1], ya + margin, yb - margin)
    return boxes


@dataclass
class TaskPrediction:
    class_logits: Tensor  # (N, K_det+1)
    box_params: Tensor  # (N, 8)
    semantic_logits: Tensor  # (N, K_seg+1)
    mask_embed: Tensor  # (N, C)
    binary_masks: Tensor  # (N, H, W)
    semantic_map: Tensor  # (K_seg, H, W)
    anchors: np.ndarray  # (N, 7) anchors the box parameters are relative to
    attn_mask: np.ndarray | None = None  # mask this layer attended with

    def boxes(self) -> np.ndarray:
        return decode_boxes(self.box_params.data, self.anchors)

    def scores(self) -> np.ndarray:
        return foreground_scores(self.class_logits.data)

    def labels(self) -> np.ndarray:
        return np.argmax(self.class_logits.data[:, :-1], axis=1)

    def detached(self) -> ModulationInput:
        return ModulationInput(
            np.asarray(self.semantic_map.data, dtype=np.float64),
            self.boxes(),
            self.scores(),
            np.asarray(self.binary_masks.data),
        )


class DecoderLayer(Module):
    def __init__(self, channels: int, n_det: int, n_seg: int, rng: np.random.Generator, zero_heads: bool = False,
                 box_prior: np.ndarray | None = None, cls_noobj_bias: float = 0.0, sem_noobj_bias: float = 0.0,
                 sigmas: np.ndarray | None = None):
        self.norm_cross = LayerNorm(channels)
        self.log_sigma = param(np.log(sigmas)) if sigmas is not None else None
        self.cross = AttentionParams(channels, rng)
        self.norm_self = LayerNorm(channels)
        self.self_attn = AttentionParams(channels, rng)
        self.ffn = FFN(channels, rng)
        self.heads = PredictionHeads(channels, n_det, n_seg, rng, zero_heads, box_prior, cls_noobj_bias,
                                     sem_noobj_bias)


def decoder_forward(f: Tensor, f_a: Tensor, q0: QueryState, n_layers: int, layers: list[DecoderLayer],
                    pe_mlp: PeMlp, heads: int, mod_cfg: ModulationConfig, grid: GridSpec,
                    key_pos: Tensor | None = None, kv_source: str = "F",
                    detached_inputs: list[tuple[np.ndarray, np.ndarray]] | None = None) -> list[TaskPrediction]:
    """Run ``n_layers`` decoder layers; layer l attends with the mask built from layer l-1.

    ``detached_inputs`` optionally supplies each layer's (anchors, attention
    mask) instead of deriving them from the previous layer. Both are constants
    for differentiation anyway; gradient checks pin them so that finite
    differences probe the same function.
    """
    if n_layers < 1:
        raise ValueError("decoder needs at least one layer")
    if n_layers > len(layers):
        raise ValueError(f"only {len(layers)} decoder layers available")
    kv = f_a if kv_source == "F_a" else f
    c, h, w = f.shape
    content = q0.content
    anchors = q0.anchors
    mask = np.zeros(h * w, dtype=np.float32)
    cells = np.stack([c.reshape(-1) for c in grid.cell_centers()], axis=1)
    preds: list[TaskPrediction] = []
    for idx in range(n_layers):
        layer = layers[idx]
        if detached_inputs is not None:
            anchors, mask = detached_inputs[idx]
        pos = encode_anchor(anchors, pe_mlp)
        if idx == 0:
            content = content + pos  # Q = C_q + P_q: the query stream carries its anchor position
        bias = distance_bias(layer.log_sigma, anchors, cells) if layer.log_sigma is not None else None
        x = masked_cross_attention(content, kv, mask, layer.cross, heads, pos=pos, key_pos=key_pos,
                                   norm=layer.norm_cross, bias=bias)
        x = query_self_attention(x, layer.self_attn, heads, pos=pos, norm=layer.norm_self)
        x = layer.ffn(x)
        cls, box, sem, emb = ffn_heads(x, layer.heads)
        masks_b = mask_head(emb, f_a)
        mask_s = compose_semantic(sem, masks_b)
        pred = TaskPrediction(cls, box, sem, emb, masks_b, mask_s, anchors, mask)
        preds.append(pred)
        content = x
        if idx < n_layers - 1 and detached_inputs is None:
            detached = pred.detached()
            if mod_cfg.per_query:
                mask = build_query_masks(detached, mod_cfg, grid)
            else:
                mask = build_attention_mask(detached, mod_cfg, grid)
            anchors = refine_anchors(anchors, box.data, grid)
    return preds
