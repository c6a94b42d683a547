import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from maskbev import autodiff as ad
from maskbev.autodiff import ShapeError, Tensor, backward, check_tensors, checkpoint, grad_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def sliding_conv(x, w, padding, dilation):
    """Direct per-output-cell summation, the textbook definition."""
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = h + 2 * padding - dilation * (k - 1)
    ow = wd + 2 * padding - dilation * (k - 1)
    out = np.zeros((cout, oh, ow))
    for o in range(cout):
        for r in range(oh):
            for c in range(ow):
                acc = 0.0
                for i in range(cin):
                    for a in range(k):
                        for b in range(k):
                            acc += w[o, i, a, b] * xp[i, r + a * dilation, c + b * dilation]
                out[o, r, c] = acc
    return out


def test_softmax_uniform():
    out = ad.softmax(Tensor(np.array([1.0, 1.0, 1.0])))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-12)


def test_sigmoid_zero():
    assert ad.sigmoid(Tensor(np.array([0.0]))).data[0] == 0.5


def test_conv_dilated_center_is_nine():
    x = Tensor(np.ones((1, 5, 5)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, w, padding=2, dilation=2)
    assert out.shape == (1, 5, 5)
    assert out.data[0, 2, 2] == 9.0
    np.testing.assert_array_equal(out.data, sliding_conv(x.data, w.data, 2, 2))


@pytest.mark.parametrize("padding,dilation,k", [(0, 1, 3), (1, 1, 3), (2, 2, 3), (4, 4, 3), (0, 1, 1), (3, 3, 3)])
def test_conv_matches_sliding_window(padding, dilation, k, rng):
    x = rng.normal(size=(2, 7, 6))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=padding, dilation=dilation)
    np.testing.assert_allclose(out.data, sliding_conv(x, w, padding, dilation) + b[:, None, None], atol=1e-12)


def test_backward_sum_gives_ones():
    x = leaf(np.random.default_rng(0).normal(size=(2, 3, 4)))
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = leaf([2.0])
    backward((x * x).sum())
    assert x.grad[0] == 4.0


def test_backward_softmax_sum_is_zero(rng):
    x = leaf(rng.normal(size=(3, 5)))
    backward(ad.softmax(x, axis=-1).sum())
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)


def test_backward_repeatable(rng):
    w = rng.normal(size=(4, 4))
    grads = []
    for _ in range(2):
        x = leaf(w)
        backward(ad.gelu(x @ x).mean())
        grads.append(x.grad.copy())
    np.testing.assert_array_equal(grads[0], grads[1])


def test_backward_rejects_non_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ShapeError, match="scalar"):
        backward(x * 2.0)


def test_backward_rejects_unrecorded():
    with pytest.raises(RuntimeError):
        backward(Tensor(np.ones(1)).sum())


def test_backward_accumulates_across_calls():
    x = leaf([1.0, 2.0])
    backward((x * 3.0).sum())
    backward((x * 3.0).sum())
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_shared_subexpression_visits_once():
    x = leaf([1.5])
    y = x * x
    backward((y + y).sum())
    assert x.grad[0] == pytest.approx(6.0)


def test_shape_errors_name_op_and_shapes():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5)))
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        a @ b
    with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(4, 5\)"):
        a + b
    with pytest.raises(ShapeError, match="reshape"):
        a.reshape(7)


def test_no_grad_skips_tape():
    x = leaf([1.0])
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_float32_default():
    assert Tensor([1.0, 2.0]).dtype == np.float32


def test_debug_mode_flags_non_finite(monkeypatch):
    from maskbev.autodiff import tensor as tmod
    monkeypatch.setattr(tmod, "DEBUG", True)
    with pytest.raises(FloatingPointError), np.errstate(divide="ignore"):
        ad.log(Tensor(np.array([0.0, 1.0])))


def test_gradcheck_matmul_chain(rng):
    a = Tensor(rng.normal(size=(4, 4)))
    b = rng.normal(size=(4, 4))
    rep = grad_check(lambda x: ((x @ Tensor(b)) @ x).sum(), a, eps=1e-5, tol=1e-6)
    assert rep.passed, rep.max_rel_err


def test_gradcheck_detects_wrong_gradient():
    # a deliberately broken op: forward x^2, backward claims 3x
    def bad(a):
        return ad.tensor._make(a.data ** 2, (a,), lambda g: (g * 3 * a.data,), "bad")

    rep = grad_check(lambda x: bad(x).sum(), Tensor(np.array([1.0, 2.0])))
    assert not rep.passed


def test_gradcheck_requires_float64():
    with pytest.raises(TypeError):
        check_tensors(lambda: Tensor(np.ones(2, dtype=np.float32)).sum(), [("x", Tensor(np.ones(2, dtype=np.float32)))])


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
                  elements=st.floats(-30, 30, allow_nan=False)),
       st.floats(-1e3, 1e3, allow_nan=False))
def test_softmax_shift_invariance(x, c):
    a = ad.softmax(Tensor(x), axis=-1).data
    b = ad.softmax(Tensor(x + c), axis=-1).data
    np.testing.assert_allclose(a, b, atol=1e-6)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 6)),
                  elements=st.floats(-5, 5, allow_nan=False)))
def test_layernorm_moments(x):
    y = ad.layernorm(Tensor(x), axis=-1).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    var = x.var(axis=-1)
    expected = var / (var + 1e-5)
    np.testing.assert_allclose(y.var(axis=-1), expected, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_random_expression_gradients(b, n, m, seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.normal(size=(b, n, m)))
    w = Tensor(r.normal(size=(m, 3)))
    bias = Tensor(r.normal(size=(3,)))

    def f():
        h = ad.gelu(x @ w + bias)
        return (ad.softmax(h, axis=-1) * ad.sigmoid(h)).mean()

    rep = check_tensors(f, [("x", x), ("w", w), ("bias", bias)], tol=1e-5)
    assert rep.passed, rep.per_input


def test_getitem_advanced_accumulates_duplicates():
    x = leaf([1.0, 2.0, 3.0])
    backward(x[np.array([0, 0, 2])].sum())
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_split_concat_roundtrip(rng):
    x = Tensor(rng.normal(size=(6, 2)))
    parts = ad.split(x, [2, 4], axis=0)
    assert [p.shape for p in parts] == [(2, 2), (4, 2)]
    np.testing.assert_array_equal(ad.concat(parts, axis=0).data, x.data)


def test_global_avg_pool(rng):
    x = rng.normal(size=(3, 4, 5))
    np.testing.assert_allclose(ad.global_avg_pool(Tensor(x)).data, x.mean(axis=(1, 2)))


def test_clip_straight_through():
    x = leaf([-1.0, 0.5, 2.0])
    backward(ad.clip(x, 0.0, 1.0, straight_through=True).sum())
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])
    y = leaf([-1.0, 0.5, 2.0])
    backward(ad.clip(y, 0.0, 1.0).sum())
    np.testing.assert_array_equal(y.grad, [0.0, 1.0, 0.0])


def test_checkpoint_roundtrip(tmp_path, rng):
    params = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32),
              "scalar": np.float32(2.5) * np.ones((), dtype=np.float32)}
    path = tmp_path / "x.ckpt"
    checkpoint.save(path, params)
    back = checkpoint.load(path)
    assert list(back) == list(params)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
    assert checkpoint.dumps(back) == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"not a checkpoint at all")
