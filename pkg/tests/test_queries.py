import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskbev.autodiff import ShapeError, Tensor, check_tensors
from maskbev.queries import (
    ANCHOR_DIM,
    PeMlp,
    anchor_pe,
    encode_anchor,
    init_queries,
    median_size,
    pe_width,
    sinusoidal_pe,
)
from maskbev.scenes import GridSpec


def test_pe_at_zero_alternates():
    np.testing.assert_array_equal(sinusoidal_pe(0.0, 8), [0, 1, 0, 1, 0, 1, 0, 1])


def test_pe_pi_unit_temperature():
    np.testing.assert_allclose(sinusoidal_pe(math.pi, 2, temperature=1.0), [0.0, -1.0], atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e4, 1e4, allow_nan=False), st.integers(1, 32))
def test_pe_bounded_and_unit_pairs(x, half):
    pe = sinusoidal_pe(x, 2 * half)
    assert np.all(np.abs(pe) <= 1.0)
    np.testing.assert_allclose(pe[0::2] ** 2 + pe[1::2] ** 2, 1.0, atol=1e-12)


def test_pe_frequencies_match_formula():
    x, d, t = 3.7, 6, 10000.0
    expected = []
    for i in range(d // 2):
        f = x / t ** (2 * i / d)
        expected += [math.sin(f), math.cos(f)]
    np.testing.assert_allclose(sinusoidal_pe(x, d), expected, atol=1e-15)


@pytest.mark.parametrize("d", [0, 1, 3, 7])
def test_pe_rejects_odd_width(d):
    with pytest.raises(ValueError):
        sinusoidal_pe(1.0, d)


def test_pe_width_for_64_channels():
    assert pe_width(64) == 18
    assert ANCHOR_DIM * pe_width(64) == 126


def test_encode_anchor_shapes(rng):
    mlp = PeMlp(32, rng)
    anchor = np.array([1.0, 2.0, 0.5, 4.0, 1.8, 1.5, 0.2])
    assert encode_anchor(anchor, mlp).shape == (32,)
    batch = np.stack([anchor, anchor * 0.5, anchor])
    out = encode_anchor(batch, mlp)
    assert out.shape == (3, 32)
    np.testing.assert_array_equal(out.data[0], out.data[2])
    np.testing.assert_allclose(out.data[0], encode_anchor(anchor, mlp).data, atol=1e-6)


def test_encode_anchor_width_mismatch(rng):
    mlp = PeMlp(32, rng, n_scalars=6)
    with pytest.raises(ShapeError):
        encode_anchor(np.zeros(7), mlp)


def test_encode_anchor_gradcheck(rng):
    mlp = PeMlp(16, rng).astype(np.float64)
    anchors = np.array([[3.0, -1.0, 0.8, 4.2, 1.9, 1.6, 0.5], [-7.0, 2.5, 0.9, 0.6, 0.6, 1.8, -2.9]])
    rep = check_tensors(lambda: encode_anchor(anchors, mlp).sum(), list(mlp.named_parameters()), tol=1e-5)
    assert rep.passed, rep.per_input


def test_pos_embed_tiny_perturbation(rng):
    mlp = PeMlp(64, rng).astype(np.float64)
    anchor = np.array([5.0, -3.0, 0.8, 4.2, 1.9, 1.6, 0.5])
    base = encode_anchor(anchor, mlp).data
    for k in range(ANCHOR_DIM):
        moved = anchor.copy()
        moved[k] += 9e-8
        assert np.max(np.abs(encode_anchor(moved, mlp).data - base)) < 1e-3


def test_refresh_changes_only_moved_rows(rng):
    grid = GridSpec(32, 32)
    mlp = PeMlp(32, rng)
    q = init_queries(6, grid, seed=2, channels=32).refresh(mlp)
    before = q.pos_embed.data.copy()
    q.anchors[3, 0] += 1.5
    after = q.refresh(mlp).pos_embed.data
    changed = np.any(after != before, axis=1)
    np.testing.assert_array_equal(changed, [False, False, False, True, False, False])


def test_init_queries_counts_and_extent():
    grid = GridSpec(64, 64)
    q = init_queries(300, grid, seed=1, channels=64)
    assert q.anchors.shape == (300, 7) and q.content.shape == (300, 64)
    xa, xb, ya, yb = grid.extent
    assert np.all((q.anchors[:, 0] > xa) & (q.anchors[:, 0] < xb))
    assert np.all((q.anchors[:, 1] > ya) & (q.anchors[:, 1] < yb))
    np.testing.assert_array_equal(q.anchors[:, 2], 0.0)
    np.testing.assert_array_equal(q.anchors[:, 6], 0.0)
    np.testing.assert_allclose(q.anchors[:, 3:6], np.tile(median_size(), (300, 1)))
    assert q.content.requires_grad
    assert abs(q.content.data.std() - 0.02) < 0.002


def test_init_queries_deterministic():
    grid = GridSpec(32, 32)
    a, b = init_queries(10, grid, 5, 16), init_queries(10, grid, 5, 16)
    np.testing.assert_array_equal(a.anchors, b.anchors)
    np.testing.assert_array_equal(a.content.data, b.content.data)
    c = init_queries(10, grid, 6, 16)
    assert not np.array_equal(a.anchors, c.anchors)


def test_init_queries_rejects_zero():
    with pytest.raises(ValueError):
        init_queries(0, GridSpec(16, 16), 0)


def test_anchor_pe_concatenates_per_scalar():
    a = np.array([[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]])
    out = anchor_pe(a, 4)
    for k in range(7):
        np.testing.assert_array_equal(out[0, 4 * k:4 * k + 4], sinusoidal_pe(a[0, k], 4))
