"""The full set of 64-bit central-difference gradient checks behind ``maskbev gradcheck``."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .aggregation import ASPP, MWWA, AggregationConfig, SplitAttentionFuse, WindowAttention
from .autodiff import Tensor, check_tensors
from .config import DecoderConfig, EncoderConfig, QueryConfig, RunConfig, TrainConfig
from .decoder import (AttentionParams, compose_semantic, distance_bias, mask_head, masked_cross_attention,
                      query_self_attention)
from .encoder import EncoderStub
from .nn import LayerNorm
from .queries import PeMlp, encode_anchor
from .scenes import SEG_CLASSES, GridSpec, Scene, SceneObject, clean_raster
from .training.losses import LossConfig, focal_loss, l1_box_loss, total_loss

OP_TOL = 1e-5
E2E_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tol)


def _t(rng, *shape, lo=None, hi=None) -> Tensor:
    if lo is not None:
        return Tensor(rng.uniform(lo, hi, size=shape))
    return Tensor(rng.normal(size=shape))


def _weighted(out: Tensor, rng_seed: int = 99) -> Tensor:
    """sum(out * w) with fixed random w, so every output entry matters."""
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return (out * w).sum()


def op_checks() -> dict[str, Callable[[], tuple]]:
    """name -> builder returning (closure, [(name, tensor)]) on float64 inputs."""
    checks = {}

    def reg(name):
        def deco(fn):
            checks[name] = fn
            return fn
        return deco

    @reg("add_broadcast")
    def _():
        r = np.random.default_rng(1)
        a, b = _t(r, 3, 4), _t(r, 4)
        return (lambda: _weighted(a + b)), [("a", a), ("b", b)]

    @reg("sub_mul_div")
    def _():
        r = np.random.default_rng(2)
        a, b, c = _t(r, 2, 3), _t(r, 3), _t(r, 2, 3, lo=0.5, hi=2.0)
        return (lambda: _weighted((a - b) * b / c)), [("a", a), ("b", b), ("c", c)]

    @reg("power")
    def _():
        r = np.random.default_rng(3)
        a = _t(r, 5, lo=0.2, hi=2.0)
        return (lambda: _weighted(a ** 2.5)), [("a", a)]

    @reg("matmul_shared")
    def _():
        r = np.random.default_rng(4)
        a, w = _t(r, 2, 3, 4), _t(r, 4, 5)
        return (lambda: _weighted(a @ w)), [("a", a), ("w", w)]

    @reg("matmul_batched")
    def _():
        r = np.random.default_rng(5)
        a, b = _t(r, 2, 3, 4), _t(r, 2, 4, 3)
        return (lambda: _weighted(a @ b)), [("a", a), ("b", b)]

    @reg("reshape_transpose_expand")
    def _():
        r = np.random.default_rng(6)
        a = _t(r, 2, 1, 3)
        return (lambda: _weighted(ad.expand(a, (2, 4, 3)).transpose(2, 0, 1).reshape(6, 4))), [("a", a)]

    @reg("concat_split")
    def _():
        r = np.random.default_rng(7)
        a, b = _t(r, 2, 3), _t(r, 4, 3)
        def f():
            parts = ad.split(ad.concat([a, b], axis=0), [1, 5], axis=0)
            return _weighted(parts[0]) + _weighted(parts[1] * parts[1], 5)
        return f, [("a", a), ("b", b)]

    @reg("getitem")
    def _():
        r = np.random.default_rng(8)
        a = _t(r, 5, 4)
        idx = np.array([0, 3, 3, 1])
        return (lambda: _weighted(a[idx]) + _weighted(a[1:4, ::2], 4)), [("a", a)]

    @reg("pad_roll")
    def _():
        r = np.random.default_rng(9)
        a = _t(r, 3, 4)
        return (lambda: _weighted(ad.roll(ad.pad(a, [(1, 2), (0, 1)]), (2, -1), (0, 1)))), [("a", a)]

    @reg("sum_mean_axis")
    def _():
        r = np.random.default_rng(10)
        a = _t(r, 3, 4, 2)
        return (lambda: _weighted(a.sum(axis=1)) + _weighted(a.mean(axis=(0, 2)), 3)), [("a", a)]

    @reg("exp_log")
    def _():
        r = np.random.default_rng(11)
        a = _t(r, 6, lo=0.3, hi=2.0)
        return (lambda: _weighted(ad.log(a) + ad.exp(a * 0.5))), [("a", a)]

    @reg("abs_relu")
    def _():
        r = np.random.default_rng(12)
        a = Tensor(np.array([-1.3, -0.4, 0.6, 1.7, -2.2, 0.9]))
        return (lambda: _weighted(ad.abs_(a) + ad.relu(a))), [("a", a)]

    @reg("gelu")
    def _():
        r = np.random.default_rng(13)
        a = _t(r, 3, 5)
        return (lambda: _weighted(ad.gelu(a * 2.0))), [("a", a)]

    @reg("sigmoid_tanh")
    def _():
        r = np.random.default_rng(14)
        a = _t(r, 7)
        return (lambda: _weighted(ad.sigmoid(a * 3.0) + ad.tanh(a))), [("a", a)]

    @reg("softmax")
    def _():
        r = np.random.default_rng(15)
        a = _t(r, 3, 5)
        return (lambda: _weighted(ad.softmax(a, axis=0)) + _weighted(ad.softmax(a, axis=-1), 7)), [("a", a)]

    @reg("layernorm")
    def _():
        r = np.random.default_rng(16)
        a = _t(r, 4, 6)
        return (lambda: _weighted(ad.layernorm(a, axis=-1)) + _weighted(ad.layernorm(a, axis=0), 3)), [("a", a)]

    @reg("clip")
    def _():
        a = Tensor(np.array([0.1, 0.5, 0.9, 1.3, -0.2]))
        return (lambda: _weighted(ad.clip(a, 0.0, 1.0))), [("a", a)]

    for dil, padn in ((1, 1), (2, 2), (1, 0)):
        def build(dil=dil, padn=padn):
            r = np.random.default_rng(17 + dil + padn)
            x, w, b = _t(r, 3, 6, 7), _t(r, 4, 3, 3, 3), _t(r, 4)
            return (lambda: _weighted(ad.conv2d(x, w, b, padding=padn, dilation=dil))), [("x", x), ("w", w), ("b", b)]
        checks[f"conv2d_d{dil}_p{padn}"] = build

    @reg("global_avg_pool")
    def _():
        r = np.random.default_rng(20)
        a = _t(r, 3, 4, 5)
        return (lambda: _weighted(ad.global_avg_pool(a))), [("a", a)]

    return checks


def _module_inputs(module, prefix: str) -> list[tuple[str, Tensor]]:
    module.astype(np.float64)
    return [(f"{prefix}.{n}", p) for n, p in module.named_parameters()]


def module_checks() -> dict[str, Callable[[], tuple]]:
    checks = {}

    def masked_xattn():
        r = np.random.default_rng(30)
        params = AttentionParams(8, r)
        norm = LayerNorm(8)
        q, f, pos, kpos = _t(r, 4, 8), _t(r, 8, 3, 3), _t(r, 4, 8), _t(r, 9, 8)
        mask = np.where(r.random(9) < 0.4, -1e9, 0.0)
        mask[0] = 0.0
        log_sigma = _t(r, 2, lo=-0.5, hi=0.5)
        anchors = r.uniform(-1.5, 1.5, (4, 7))
        cells = np.stack(np.meshgrid(np.arange(3.0) - 1, np.arange(3.0) - 1, indexing="ij"), -1).reshape(9, 2)

        def fn():
            bias = distance_bias(log_sigma, anchors, cells)
            return _weighted(masked_cross_attention(q, f, mask, params, 2, pos=pos, key_pos=kpos, norm=norm,
                                                    bias=bias))
        return fn, [("q", q), ("f", f), ("pos", pos), ("key_pos", kpos), ("log_sigma", log_sigma)] \
            + _module_inputs(params, "params") + _module_inputs(norm, "norm")
    checks["masked_cross_attention"] = masked_xattn

    def self_attn():
        r = np.random.default_rng(31)
        params = AttentionParams(8, r)
        q = _t(r, 4, 8)
        return (lambda: _weighted(query_self_attention(q, params, 2))), [("q", q)] + _module_inputs(params, "params")
    checks["query_self_attention"] = self_attn

    def mask_and_compose():
        r = np.random.default_rng(32)
        e, fa, s = _t(r, 4, 6), _t(r, 6, 3, 4), _t(r, 4, 4)
        return (lambda: _weighted(compose_semantic(s, mask_head(e, fa)))), [("e", e), ("f_a", fa), ("s", s)]
    checks["mask_head_compose"] = mask_and_compose

    def window_attn():
        r = np.random.default_rng(33)
        attn = WindowAttention(4, 2, r)
        f = _t(r, 4, 5, 7)
        return (lambda: _weighted(attn(f, 3, shifted=True))), [("f", f)] + _module_inputs(attn, "attn")
    checks["window_attention_shifted"] = window_attn

    def mwwa():
        r = np.random.default_rng(34)
        cfg = AggregationConfig(M=2, heads=4, window_sizes=[2, 3])
        m = MWWA(8, cfg, r)
        f = _t(r, 8, 5, 6)
        return (lambda: _weighted(m(f, shifted=True))), [("f", f)] + _module_inputs(m, "mwwa")
    checks["mwwa"] = mwwa

    def aspp():
        r = np.random.default_rng(35)
        cfg = AggregationConfig(M=2, heads=4, window_sizes=[2, 3], aspp_dilations=[1, 2], bottleneck_ratio=2)
        m = ASPP(8, cfg, r)
        f = _t(r, 8, 5, 5)
        return (lambda: _weighted(m(f))), [("f", f)] + _module_inputs(m, "aspp")
    checks["aspp"] = aspp

    def fuse():
        r = np.random.default_rng(36)
        m = SplitAttentionFuse(8, r)
        a, b = _t(r, 8, 3, 3), _t(r, 8, 3, 3)
        return (lambda: _weighted(m(a, b))), [("a", a), ("b", b)] + _module_inputs(m, "fuse")
    checks["split_attention_fuse"] = fuse

    def encoder():
        r = np.random.default_rng(37)
        enc = EncoderStub(3, 8, 2, r)
        x = _t(r, 3, 8, 8)
        return (lambda: _weighted(enc(x))), [("x", x)] + _module_inputs(enc, "encoder")
    checks["encoder_stub"] = encoder

    def pe():
        r = np.random.default_rng(38)
        mlp = PeMlp(16, r)
        anchors = np.array([[1.0, -2.0, 0.5, 4.0, 1.8, 1.5, 0.3], [-3.0, 0.5, 0.9, 0.7, 0.6, 1.7, -2.0]])
        return (lambda: _weighted(encode_anchor(anchors, mlp))), _module_inputs(mlp, "pe_mlp")
    checks["anchor_encoding"] = pe

    def focal():
        r = np.random.default_rng(39)
        p = _t(r, 3, 4, lo=0.05, hi=0.95)
        y = (r.random((3, 4)) < 0.5).astype(float)
        return (lambda: focal_loss(p, y)), [("p", p)]
    checks["focal_loss"] = focal

    def l1():
        r = np.random.default_rng(40)
        p = _t(r, 3, 8)
        target = p.data + np.where(r.random((3, 8)) < 0.5, -0.3, 0.3)
        return (lambda: l1_box_loss(p, target)), [("p", p)]
    checks["l1_box_loss"] = l1

    return checks


def toy_config() -> RunConfig:
    """8x8 grid, C=16, N=4, L=2, one aggregation loop."""
    return RunConfig(
        grid=GridSpec(8, 8, 1.0),
        encoder=EncoderConfig(channels=16, depth=2, noise_sigma=0.0),
        queries=QueryConfig(n=4),
        decoder=DecoderConfig(layers=2, heads=8),
        aggregation=AggregationConfig(loops=1),
        loss=LossConfig(),
        train=TrainConfig(seed=3),
    )


def toy_scene(grid: GridSpec) -> Scene:
    rng = np.random.default_rng(41)
    semantic = (rng.random((len(SEG_CLASSES), grid.h, grid.w)) < 0.3).astype(np.uint8)
    objects = [SceneObject(0, 1.3, -0.6, 0.8, 4.2, 1.9, 1.6, 0.4), SceneObject(1, -2.2, 2.4, 0.9, 0.7, 0.6, 1.8, -1.1)]
    return Scene(objects, semantic, 41, grid)


def end_to_end_check(samples: int = 3, eps: float = 1e-6):
    """total_loss through encoder, aggregation and decoder, probing a few entries of every parameter tensor."""
    from .model import MaskBEV

    cfg = toy_config()
    model = MaskBEV(cfg).astype(np.float64)
    scene = toy_scene(cfg.grid)
    x = clean_raster(scene).astype(np.float64)
    inputs = list(model.named_parameters())
    pinned = [(p.anchors, p.attn_mask) for p in model(x)]

    def f():
        return total_loss(model(x, pinned), scene, cfg.loss).total

    return check_tensors(f, inputs, eps=eps, tol=E2E_TOL, samples=samples, rng=np.random.default_rng(0), floor=1e-6)


def run_suite(log=print) -> list[CheckResult]:
    results = []
    for group in (op_checks(), module_checks()):
        for name, build in group.items():
            t0 = time.time()
            fn, inputs = build()
            rep = check_tensors(fn, inputs, tol=OP_TOL)
            results.append(CheckResult(name, rep.max_rel_err, OP_TOL, time.time() - t0))
    t0 = time.time()
    rep = end_to_end_check()
    results.append(CheckResult("end_to_end_total_loss", rep.max_rel_err, E2E_TOL, time.time() - t0))
    for r in results:
        log(f"{'PASS' if r.passed else 'FAIL'}  {r.name:28s} rel_err={r.max_rel_err:.2e}  tol={r.tol:.0e}  "
            f"{r.seconds:.2f}s")
    return results
