import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskbev.autodiff import Tensor, backward, checkpoint
from maskbev.config import AggregationConfig, DecoderConfig, EncoderConfig, QueryConfig, RunConfig, TrainConfig
from maskbev.decoder import encode_box_targets
from maskbev.gradsuite import toy_config, toy_scene
from maskbev.model import MaskBEV
from maskbev.scenes import GridSpec
from maskbev.training.losses import LossConfig, focal_loss, l1_box_loss, total_loss
from maskbev.training.matching import detection_cost, hungarian_match, match_cost
from maskbev.training.optim import AdamW, clip_grad_norm, grad_norm, warmup_cosine
from maskbev.training.trainer import TrainingDiverged, train


def brute_min(cost):
    n, m = cost.shape
    if n == 0 or m == 0:
        return 0.0
    if n >= m:
        return min(sum(cost[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))


def small_config(**train_kw) -> RunConfig:
    return RunConfig(
        grid=GridSpec(16, 16, 1.0),
        encoder=EncoderConfig(channels=16, depth=2),
        queries=QueryConfig(n=8),
        decoder=DecoderConfig(layers=2, heads=8),
        aggregation=AggregationConfig(loops=1),
        train=TrainConfig(**{"epochs": 2, "batch": 4, "seed": 1, **train_kw}),
    )


# --- matching ---

def test_hungarian_examples():
    r = hungarian_match(np.array([[1.0, 2.0], [3.0, 0.0]]))
    assert r.pairs == [(0, 0), (1, 1)]
    assert match_cost(r, np.array([[1.0, 2.0], [3.0, 0.0]])) == 1.0
    c = np.ones((4, 4)) - np.eye(4)
    assert hungarian_match(c).pairs == [(i, i) for i in range(4)]
    assert hungarian_match(np.array([[7.0]])).pairs == [(0, 0)]
    empty = hungarian_match(np.zeros((5, 0)))
    assert empty.pairs == [] and empty.unmatched().tolist() == [0, 1, 2, 3, 4]


def test_hungarian_matches_enumeration_1000():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n, m = rng.integers(1, 7, size=2)
        cost = rng.normal(size=(n, m)).round(3)
        r = hungarian_match(cost)
        assert len(r.pairs) == min(n, m)
        assert len(set(r.queries)) == len(r.pairs) and len(set(r.gts)) == len(r.pairs)
        assert math.isclose(match_cost(r, cost), brute_min(cost), abs_tol=1e-9)


def test_hungarian_rejects_bad_input():
    with pytest.raises(ValueError):
        hungarian_match(np.array([[np.nan, 1.0]]))
    with pytest.raises(ValueError):
        hungarian_match(np.zeros(3))


def _random_detection_instance(rng, n=5, m=3):
    logits = rng.normal(size=(n, 4))
    params = rng.normal(size=(n, 8)) * 0.3
    anchors = np.column_stack([rng.uniform(-5, 5, (n, 2)), np.zeros(n), np.full((n, 3), 1.5), rng.uniform(-3, 3, n)])
    gt = np.column_stack([rng.uniform(-5, 5, (m, 2)), rng.uniform(0, 1, m), rng.uniform(0.5, 4, (m, 3)),
                          rng.uniform(-3, 3, m)])
    labels = rng.integers(0, 3, m)
    return logits, params, anchors, gt, labels


def test_detection_cost_enumeration_5x3():
    logits, params, anchors, gt, labels = _random_detection_instance(np.random.default_rng(11))
    cost = detection_cost(logits, params, anchors, gt, labels)
    assert cost.shape == (5, 3)
    assert math.isclose(match_cost(hungarian_match(cost), cost), brute_min(cost), abs_tol=1e-12)


def test_detection_cost_scaling_and_perfect_prediction():
    logits, params, anchors, gt, labels = _random_detection_instance(np.random.default_rng(12))
    cost = detection_cost(logits, params, anchors, gt, labels)
    doubled = detection_cost(logits, params, anchors, gt, labels, 4.0, 0.5)
    np.testing.assert_allclose(doubled, 2 * cost)
    assert hungarian_match(doubled).pairs == hungarian_match(cost).pairs
    # query 2 predicts GT 1 exactly with a confident class
    params[2] = encode_box_targets(gt[1:2], anchors[2:3])[0]
    logits[2] = -20.0
    logits[2, labels[1]] = 20.0
    cost = detection_cost(logits, params, anchors, gt, labels)
    assert cost[2, 1] == cost[:, 1].min()


# --- losses ---

def test_focal_examples():
    p = Tensor(np.array([0.5]), dtype=np.float64)
    assert abs(float(focal_loss(p, [1.0]).data) - 0.25 * 0.25 * math.log(2)) < 1e-5
    assert abs(float(focal_loss(p, [1.0]).data) - 0.04333) < 1e-5
    assert float(focal_loss(Tensor([1 - 1e-6], dtype=np.float64), [1.0]).data) < 1e-12
    rng = np.random.default_rng(1)
    pv = rng.uniform(0.01, 0.99, 20)
    y = (rng.random(20) < 0.5).astype(float)
    bce = -np.mean(y * np.log(pv) + (1 - y) * np.log(1 - pv))
    half = float(focal_loss(Tensor(pv, dtype=np.float64), y, gamma=0.0, alpha=0.5).data)
    assert math.isclose(half, bce / 2, rel_tol=1e-12)


def test_focal_shape_mismatch():
    with pytest.raises(ValueError):
        focal_loss(Tensor(np.ones(3) * 0.5), np.ones(4))


def test_focal_straight_through_clamp():
    p = Tensor(np.array([0.0, 1.0]), requires_grad=True, dtype=np.float64)
    loss = focal_loss(p, np.array([1.0, 0.0]))
    assert np.isfinite(loss.data)
    backward(loss)
    assert p.grad[0] < 0 and p.grad[1] > 0


def test_l1_examples():
    target = np.zeros((1, 8))
    pred = Tensor(np.zeros((1, 8)), dtype=np.float64)
    assert float(l1_box_loss(pred, target).data) == 0.0
    pred = Tensor(np.array([[0, 0, 0.8, 0, 0, 0, 0, 0]]), requires_grad=True, dtype=np.float64)
    loss = l1_box_loss(pred, target)
    assert math.isclose(float(loss.data), 0.1)
    backward(loss)
    np.testing.assert_array_equal(pred.grad, [[0, 0, 1 / 8, 0, 0, 0, 0, 0]])
    pred2 = Tensor(-np.ones((1, 8)), requires_grad=True, dtype=np.float64)
    backward(l1_box_loss(pred2, target))
    np.testing.assert_array_equal(pred2.grad, np.full((1, 8), -1 / 8))


@pytest.mark.parametrize("kw", [{"alpha": -1.0}, {"focal_alpha": 1.5}, {"focal_gamma": -0.1}])
def test_loss_config_validation(kw):
    with pytest.raises(ValueError):
        LossConfig(**kw)


@pytest.fixture(scope="module")
def toy_preds():
    cfg = toy_config()
    model = MaskBEV(cfg)
    scene = toy_scene(cfg.grid)
    from maskbev.scenes import clean_raster
    return cfg, model, scene, clean_raster(scene)


def test_beta_zero_is_pure_detection(toy_preds):
    cfg, model, scene, raster = toy_preds
    preds = model(raster)
    full = total_loss(preds, scene, LossConfig())
    det = total_loss(preds, scene, LossConfig(beta=0.0))
    expected = 3.0 * (2.0 * full.l_cls + 0.25 * full.l_box)
    assert math.isclose(float(det.total.data), expected, rel_tol=1e-5)
    assert math.isclose(float(full.total.data), expected + full.l_seg, rel_tol=1e-5)


def test_total_is_non_negative_and_sums_layers(toy_preds):
    cfg, model, scene, raster = toy_preds
    preds = model(raster)
    deep = total_loss(preds, scene, LossConfig())
    last = total_loss(preds[-1:], scene, LossConfig())
    shallow = total_loss(preds, scene, LossConfig(deep_supervision=False))
    assert float(deep.total.data) >= 0 and len(deep.matches) == len(preds)
    assert float(shallow.total.data) == float(last.total.data)
    assert float(deep.total.data) >= float(shallow.total.data)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_total_loss_non_negative_random_heads(seed):
    cfg, model, scene, raster = _TOY
    rng = np.random.default_rng(seed)
    preds = model(raster + rng.normal(size=raster.shape).astype(np.float32))
    assert float(total_loss(preds, scene, LossConfig()).total.data) >= 0


def _toy():
    cfg = toy_config()
    from maskbev.scenes import clean_raster
    scene = toy_scene(cfg.grid)
    return cfg, MaskBEV(cfg), scene, clean_raster(scene)


_TOY = _toy()


def test_no_deep_supervision_leaves_earlier_heads_without_gradient(toy_preds):
    cfg, model, scene, raster = toy_preds
    model.zero_grad()
    backward(total_loss(model(raster), scene, LossConfig(deep_supervision=False)).total)
    for p in model.layers[0].heads.parameters():
        assert p.grad is None or not np.any(p.grad)
    assert any(p.grad is not None and np.any(p.grad) for p in model.layers[-1].heads.parameters())
    model.zero_grad()
    backward(total_loss(model(raster), scene, LossConfig()).total)
    assert any(p.grad is not None and np.any(p.grad) for p in model.layers[0].heads.parameters())


# --- optimizer ---

def test_lr_zero_is_bitwise_noop(toy_preds):
    cfg, model, scene, raster = toy_preds
    model.zero_grad()
    backward(total_loss(model(raster), scene, LossConfig()).total)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    AdamW(model.parameters(), lr=0.0).step()
    after = model.state_dict()
    for k in before:
        assert before[k].tobytes() == after[k].tobytes()


def test_adamw_first_step_and_decay():
    w = Tensor(np.array([[1.0, -2.0]]), dtype=np.float64)
    b = Tensor(np.array([1.0]), dtype=np.float64)
    w.grad = np.array([[0.5, -0.5]])
    b.grad = np.array([3.0])
    AdamW([w, b], lr=0.1, weight_decay=0.1).step()
    # first bias-corrected step is lr * sign(g); decay only on the matrix
    np.testing.assert_allclose(w.data, [[1.0 - 0.1 * (1 + 0.1), -2.0 - 0.1 * (-1 + 0.1 * -2.0)]], atol=1e-6)
    np.testing.assert_allclose(b.data, [0.9], atol=1e-6)


def test_warmup_cosine_schedule():
    total, peak = 100, 2e-3
    lrs = [warmup_cosine(s, total, peak) for s in range(total)]
    assert lrs[4] == pytest.approx(peak)
    assert all(a < b for a, b in zip(lrs[:5], lrs[1:5]))
    assert all(a >= b for a, b in zip(lrs[5:], lrs[6:]))
    assert lrs[-1] < 1e-6 and max(lrs) == pytest.approx(peak)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), dtype=np.float64)
    b = Tensor(np.zeros(1), dtype=np.float64)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 10.0) == 5.0
    assert grad_norm([a, b]) == 5.0
    assert clip_grad_norm([a, b], 1.0) == 5.0
    assert grad_norm([a, b]) == pytest.approx(1.0)


# --- training loop ---

def test_smoke_two_epochs(small_dataset, tmp_path):
    res = train(small_dataset, small_config(), out_dir=tmp_path, log=lambda *_: None)
    assert [r["epoch"] for r in res.rows] == [0, 1, 2]
    for r in res.rows:
        assert all(math.isfinite(r[k]) for k in ("l_total", "l_cls", "l_box", "l_seg"))
        assert 0.0 <= r["miou"] <= 1.0
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,l_total,l_cls,l_box,l_seg,miou,ap@1,ap@2"
    assert len(lines) == 4
    assert (tmp_path / "epoch_002.ckpt").exists() and (tmp_path / "model.ckpt").exists()
    assert json.loads((tmp_path / "config.json").read_text())["train"]["epochs"] == 2


def test_training_is_deterministic(small_dataset, tmp_path):
    cfg = small_config(epochs=1, train_limit=8)
    train(small_dataset, cfg, out_dir=tmp_path / "a", log=lambda *_: None)
    train(small_dataset, cfg, out_dir=tmp_path / "b", log=lambda *_: None)
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    other = train(small_dataset, cfg, seed=2, log=lambda *_: None)
    state = checkpoint.load(tmp_path / "a" / "model.ckpt")
    assert any(not np.array_equal(state[k], v) for k, v in other.model.state_dict().items())


def test_training_reduces_probe_loss(small_dataset):
    res = train(small_dataset, small_config(epochs=3, lr=3e-3), log=lambda *_: None)
    assert res.rows[-1]["l_total"] < res.rows[0]["l_total"]


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        train(tmp_path / "nope", small_config(), log=lambda *_: None)


def test_grid_mismatch(small_dataset):
    cfg = small_config()
    cfg.grid = GridSpec(8, 8, 1.0)
    with pytest.raises(ValueError):
        train(small_dataset, cfg, log=lambda *_: None)


def test_nan_loss_aborts_with_dump(small_dataset, tmp_path, monkeypatch):
    import maskbev.training.trainer as trainer

    real = trainer.total_loss

    def poisoned(preds, scene, cfg):
        out = real(preds, scene, cfg)
        out.total = out.total * float("nan")
        return out

    monkeypatch.setattr(trainer, "total_loss", poisoned)
    cfg = small_config(epochs=1, train_limit=4, val_limit=1, probe_size=1)
    with pytest.raises(TrainingDiverged):
        train(small_dataset, cfg, out_dir=tmp_path, log=lambda *_: None)
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["epoch"] == 1 and dump["step"] == 0 and len(dump["scene_seeds"]) == 4
