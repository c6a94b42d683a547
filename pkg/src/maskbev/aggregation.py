"""Scene-level feature aggregation.

Each block runs multi-window window attention (a different window size per
group of heads) next to an ASPP branch, fuses the two with split attention and
adds the result back onto its input.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    concat,
    expand,
    gelu,
    global_avg_pool,
    pad,
    roll,
    softmax,
    split,
)
from .nn import ChannelNorm, Conv2d, Linear, Module

NEG = 1e9


@dataclass
class AggregationConfig:
    M: int = 4
    heads: int = 8
    window_sizes: list = field(default_factory=lambda: [3, 6, 9, 18])
    shift: bool = True
    aspp_dilations: list = field(default_factory=lambda: [1, 2, 4, 8])
    bottleneck_ratio: int = 4
    loops: int = 2
    use_mwwa: bool = True
    use_aspp: bool = True

    def validate(self, channels: int) -> None:
        if self.M < 1 or self.heads % self.M:
            raise ValueError(f"heads ({self.heads}) must be divisible by M ({self.M})")
        if len(self.window_sizes) != self.M:
            raise ValueError(f"need {self.M} window sizes, got {self.window_sizes}")
        if any(int(p) < 1 for p in self.window_sizes):
            raise ValueError("window sizes must be positive")
        if channels % self.heads:
            raise ValueError(f"channels ({channels}) must be divisible by heads ({self.heads})")
        if channels % self.bottleneck_ratio:
            raise ValueError(f"channels ({channels}) must be divisible by the bottleneck ratio")
        if self.loops < 0:
            raise ValueError("loops must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# window partitioning
# ---------------------------------------------------------------------------

@dataclass
class PartitionInfo:
    h: int
    w: int
    hp: int
    wp: int
    p: int
    shift: int
    valid: np.ndarray  # (n_windows, p*p) bool, False on padded cells

    @property
    def n_windows(self) -> int:
        return (self.hp // self.p) * (self.wp // self.p)


def _partition_cells(x: Tensor, p: int) -> Tensor:
    # (Hp, Wp, D) -> (nW, p*p, D)
    hp, wp, d = x.shape
    x = x.reshape(hp // p, p, wp // p, p, d).transpose(0, 2, 1, 3, 4)
    return x.reshape((hp // p) * (wp // p), p * p, d)


def window_partition(f: Tensor, p: int, shifted: bool, valid: np.ndarray | None = None) -> tuple[Tensor, PartitionInfo]:
    """Split a (D, H, W) map into (n_windows, p*p, D) windows.

    H and W are zero-padded up to multiples of ``p``; padded cells are marked
    invalid. With ``shifted`` the padded map is cyclically shifted by p // 2
    first. ``valid`` optionally marks further cells of the input as invalid.
    """
    if p < 1:
        raise ValueError("window size must be >= 1")
    if not isinstance(f, Tensor):
        f = Tensor(f)
    d, h, w = f.shape
    hp, wp = math.ceil(h / p) * p, math.ceil(w / p) * p
    x = f.transpose(1, 2, 0)
    if hp != h or wp != w:
        x = pad(x, [(0, hp - h), (0, wp - w), (0, 0)])
    ok = np.zeros((hp, wp), dtype=bool)
    ok[:h, :w] = True if valid is None else valid
    s = p // 2 if shifted else 0
    if s:
        x = roll(x, (-s, -s), (0, 1))
        ok = np.roll(ok, (-s, -s), (0, 1))
    windows = _partition_cells(x, p)
    ok = ok.reshape(hp // p, p, wp // p, p).transpose(0, 2, 1, 3).reshape(-1, p * p)
    return windows, PartitionInfo(h, w, hp, wp, p, s, ok)


def window_reverse(windows: Tensor, info: PartitionInfo) -> Tensor:
    """Inverse of :func:`window_partition`: (n_windows, p*p, D) -> (D, H, W)."""
    p = info.p
    d = windows.shape[-1]
    x = windows.reshape(info.hp // p, info.wp // p, p, p, d).transpose(0, 2, 1, 3, 4)
    x = x.reshape(info.hp, info.wp, d)
    if info.shift:
        x = roll(x, (info.shift, info.shift), (0, 1))
    if info.hp != info.h or info.wp != info.w:
        x = x[:info.h, :info.w]
    return x.transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

class WindowAttention(Module):
    """Scaled dot-product attention restricted to p x p windows."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng, bias=False)
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng, bias=False)

    def __call__(self, f: Tensor, p: int, shifted: bool = False, valid: np.ndarray | None = None) -> Tensor:
        windows, info = window_partition(f, p, shifted, valid)
        n_w, n_cells, dim = windows.shape
        h, dh = self.heads, dim // self.heads

        def heads_first(t):
            return t.reshape(n_w, n_cells, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads_first(self.q(windows)), heads_first(self.k(windows)), heads_first(self.v(windows))
        logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        key_mask = np.where(info.valid, 0.0, -NEG).astype(logits.dtype)
        logits = logits + np.broadcast_to(key_mask[:, None, None, :], logits.shape)
        out = softmax(logits, axis=-1) @ v
        out = out.transpose(0, 2, 1, 3).reshape(n_w, n_cells, dim)
        return window_reverse(out, info)


def window_attention(f: Tensor, p: int, attn: WindowAttention, shifted: bool = False) -> Tensor:
    return attn(f, p, shifted)


def global_attention(f: Tensor, attn: WindowAttention) -> Tensor:
    """Reference: the same heads attending over every cell of the map."""
    d, hh, ww = f.shape
    tokens = f.reshape(d, hh * ww).transpose(1, 0)
    h, dh = attn.heads, d // attn.heads

    def heads_first(t):
        return t.reshape(hh * ww, h, dh).transpose(1, 0, 2)

    q, k, v = heads_first(attn.q(tokens)), heads_first(attn.k(tokens)), heads_first(attn.v(tokens))
    out = softmax((q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh)), axis=-1) @ v
    return out.transpose(1, 0, 2).reshape(hh * ww, d).transpose(1, 0).reshape(d, hh, ww)


def channel_linear(f: Tensor, layer: Linear) -> Tensor:
    """Apply a Linear over the channel axis of a (C, H, W) map."""
    c, h, w = f.shape
    out = layer(f.reshape(c, h * w).transpose(1, 0))
    return out.transpose(1, 0).reshape(out.shape[1], h, w)


class MWWA(Module):
    """Multi-window window attention: sub-feature i uses window size P_i."""

    def __init__(self, channels: int, cfg: AggregationConfig, rng: np.random.Generator, zero_out: bool = False):
        cfg.validate(channels)
        self.window_sizes = [int(p) for p in cfg.window_sizes]
        self.sub_dim = channels // cfg.M
        heads_per = cfg.heads // cfg.M
        if self.sub_dim % heads_per:
            raise ValueError(f"sub-feature width {self.sub_dim} not divisible by {heads_per} heads")
        self.norm = ChannelNorm(channels)
        self.attn = [WindowAttention(self.sub_dim, heads_per, rng) for _ in range(cfg.M)]
        self.proj = Linear(channels, channels, rng, zero=zero_out)

    def heads(self, f: Tensor, shifted: bool = False) -> list[Tensor]:
        """Per-sub-feature outputs h_i before concatenation."""
        subs = split(self.norm(f), len(self.attn), axis=0)
        return [a(sub, p, shifted) for a, sub, p in zip(self.attn, subs, self.window_sizes)]

    def __call__(self, f: Tensor, shifted: bool = False) -> Tensor:
        return channel_linear(concat(self.heads(f, shifted), axis=0), self.proj)


# ---------------------------------------------------------------------------
# ASPP and fusion
# ---------------------------------------------------------------------------

class ASPP(Module):
    """1x1 bottleneck to C/r, dilated 3x3 branches plus a pooled branch, 1x1 back to C."""

    def __init__(self, channels: int, cfg: AggregationConfig, rng: np.random.Generator, zero_out: bool = False):
        inner = channels // cfg.bottleneck_ratio
        self.reduce = Conv2d(channels, inner, 1, rng)
        self.branches = [Conv2d(inner, inner, 3, rng, dilation=int(d)) for d in cfg.aspp_dilations]
        self.pool = Linear(inner, inner, rng)
        self.project = Conv2d(inner * (len(self.branches) + 1), channels, 1, rng, zero=zero_out)

    def pool_branch(self, b: Tensor) -> Tensor:
        c, h, w = b.shape
        return expand(self.pool(global_avg_pool(b).reshape(1, c)).reshape(c, 1, 1), (c, h, w))

    def __call__(self, f: Tensor) -> Tensor:
        b = gelu(self.reduce(f))
        outs = [gelu(conv(b)) for conv in self.branches]
        outs.append(self.pool_branch(b))
        return self.project(concat(outs, axis=0))


class SplitAttentionFuse(Module):
    """Channel-wise softmax over two branches: out = w_a * a + w_b * b, w_a + w_b = 1."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        self.channels = channels
        self.fc1 = Linear(channels, max(channels // reduction, 4), rng)
        self.fc2 = Linear(max(channels // reduction, 4), 2 * channels, rng)

    def weights(self, a: Tensor, b: Tensor) -> Tensor:
        s = global_avg_pool(a + b).reshape(1, self.channels)
        logits = self.fc2(gelu(self.fc1(s))).reshape(2, self.channels)
        return softmax(logits, axis=0)

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"split_attention_fuse: shape mismatch {a.shape} vs {b.shape}")
        w = self.weights(a, b)
        c = self.channels
        wa = expand(w[0].reshape(c, 1, 1), a.shape)
        wb = expand(w[1].reshape(c, 1, 1), b.shape)
        return wa * a + wb * b


class AggregationBlock(Module):
    def __init__(self, channels: int, cfg: AggregationConfig, rng: np.random.Generator, zero_out: bool = False):
        self.mwwa = MWWA(channels, cfg, rng, zero_out) if cfg.use_mwwa else None
        self.aspp = ASPP(channels, cfg, rng, zero_out) if cfg.use_aspp else None
        self.fuse = SplitAttentionFuse(channels, rng) if cfg.use_mwwa and cfg.use_aspp else None

    def __call__(self, f: Tensor, shifted: bool) -> Tensor:
        a = self.mwwa(f, shifted) if self.mwwa is not None else None
        b = self.aspp(f) if self.aspp is not None else None
        if a is not None and b is not None:
            return f + self.fuse(a, b)
        if a is None and b is None:
            return f
        return f + (a if a is not None else b)


class SceneAggregation(Module):
    """F_a = loops x (F <- F + fuse(MWWA(F), ASPP(F))), alternating plain and shifted windows."""

    def __init__(self, channels: int, cfg: AggregationConfig, rng: np.random.Generator, zero_out: bool = False):
        cfg.validate(channels)
        self.shift = cfg.shift
        self.blocks = [AggregationBlock(channels, cfg, rng, zero_out) for _ in range(cfg.loops)]

    def __call__(self, f: Tensor) -> Tensor:
        for i, block in enumerate(self.blocks):
            f = block(f, shifted=self.shift and i % 2 == 1)
        return f


def scene_aggregate(f: Tensor, agg: SceneAggregation) -> Tensor:
    return agg(f)
