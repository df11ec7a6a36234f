import math

import numpy as np
import pytest

from locorisk import autodiff as ad
from locorisk.autodiff import Tensor
from oracles import naive_conv1d

TOL = 1e-4


def _check(build, arrays, rng=None, samples=None):
    """Compare backward() gradients with central differences for every array."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*leaves)
    ad.backward(loss)
    for leaf, arr in zip(leaves, arrays):
        def f():
            return float(build(*[Tensor(a) for a in arrays]).data)
        idx = None
        if samples is not None and arr.size > samples:
            idx = rng.choice(arr.size, samples, replace=False)
        num = ad.numerical_gradient(f, arr, index=idx)
        keys = list(num)
        ana = np.asarray(leaf.grad).reshape(-1)[keys]
        assert ad.max_relative_error(ana, [num[i] for i in keys]) < TOL


def _weighted(t, w):
    return ad.tensor_sum(ad.mul(t, Tensor(w)))


@pytest.mark.parametrize("k,cin,cout", [(1, 3, 2), (3, 1, 4), (8, 2, 3), (8, 8, 3)])
def test_conv_gradients(k, cin, cout):
    rng = np.random.default_rng(k * 10 + cin)
    x = rng.standard_normal((2, 9, cin))
    w = rng.standard_normal((k, cin, cout))
    b = rng.standard_normal(cout)
    proj = rng.standard_normal((2, 9, cout))
    _check(lambda x_, w_, b_: _weighted(ad.conv1d(x_, w_, b_), proj), [x, w, b])


def test_conv_matches_nested_loops():
    rng = np.random.default_rng(0)
    for k, cin, cout, length in [(3, 1, 1, 4), (8, 2, 3, 11), (1, 4, 2, 5), (2, 3, 2, 6)]:
        x = rng.standard_normal((2, length, cin))
        w = rng.standard_normal((k, cin, cout))
        b = rng.standard_normal(cout)
        got = ad.conv1d(x, w, b).data
        assert np.allclose(got, naive_conv1d(x, w, b), atol=1e-12)


def test_conv_examples():
    x = np.random.default_rng(1).standard_normal((3, 5, 4))
    eye = np.eye(4)[None]
    assert np.allclose(ad.conv1d(x, eye, np.zeros(4)).data, x)
    out = ad.conv1d(np.zeros((2, 5, 1)), np.ones((3, 1, 2)), np.array([1.5, -2.0]))
    assert np.all(out.data[..., 0] == 1.5) and np.all(out.data[..., 1] == -2.0)
    with pytest.raises(ad.ShapeError):
        ad.conv1d(np.zeros((1, 5, 2)), np.ones((3, 1, 2)), np.zeros(2))


def test_affine_and_relu_gradients():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 7, 4))
    s, h = rng.standard_normal(4), rng.standard_normal(4)
    proj = rng.standard_normal((3, 7, 4))
    _check(lambda x_, s_, h_: _weighted(ad.per_component_affine(x_, s_, h_), proj), [x, s, h])
    # keep relu inputs away from the kink
    x = np.where(np.abs(x) < 0.05, 0.3, x)
    _check(lambda x_: _weighted(ad.relu(x_), proj), [x])


def test_affine_examples():
    x = np.full((1, 1, 1), 3.0)
    assert ad.per_component_affine(x, np.ones(1), np.zeros(1)).data.item() == 3.0
    assert ad.per_component_affine(x, np.full(1, 2.0), np.ones(1)).data.item() == 7.0
    assert ad.relu(np.array([-1.0, 2.0])).data.tolist() == [0.0, 2.0]


def test_affine_relu_matches_composition():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 6, 3))
    s, h = rng.standard_normal(3), rng.standard_normal(3)
    fused = ad.affine_relu(x, s, h).data
    comp = ad.relu(ad.per_component_affine(x, s, h)).data
    assert np.array_equal(fused, comp)


def test_dense_mean_reshape_gradients():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 3, 5))
    w, b = rng.standard_normal((5, 2)), rng.standard_normal(2)
    proj = rng.standard_normal((4, 2))

    def build(x_, w_, b_):
        m = ad.mean_axis(x_, 1)
        return _weighted(ad.dense(ad.reshape(ad.reshape(m, (2, 2, 5)), (4, 5)), w_, b_), proj)

    _check(build, [x, w, b])


def test_cross_entropy_gradient_and_value():
    rng = np.random.default_rng(5)
    z = rng.standard_normal((6, 2))
    labels = rng.integers(0, 2, 6)
    mask = np.array([1, 0, 1, 1, 0, 1.0])
    _check(lambda z_: ad.softmax_cross_entropy(z_, labels, mask), [z])
    for lab in (0, 1):
        v = ad.softmax_cross_entropy(np.zeros((1, 2)), np.array([lab])).data
        assert abs(float(v) - math.log(2)) < 1e-12
    with pytest.raises(ad.NoLabeledSamplesError, match="no labeled samples in batch"):
        ad.softmax_cross_entropy(z, labels, np.zeros(6))


def test_gradient_reversal():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    y = ad.gradient_reversal(x, 0.1)
    assert np.array_equal(y.data, x.data)
    ad.backward(_weighted(y, np.array([2.0, 2.0])))
    assert np.allclose(x.grad, [-0.2, -0.2])
    x0 = Tensor(np.ones(2), requires_grad=True)
    ad.backward(_weighted(ad.gradient_reversal(x0, 0.0), np.ones(2)))
    assert np.all(x0.grad == 0)


def test_reversal_equals_negated_plain_gradient():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))
    labels = np.array([0, 1, 1])
    for lam in (0.05, 0.1, 0.7):
        a = Tensor(x, requires_grad=True)
        ad.backward(ad.softmax_cross_entropy(ad.dense(ad.gradient_reversal(a, lam), Tensor(w), Tensor(np.zeros(2))), labels))
        b = Tensor(x, requires_grad=True)
        ad.backward(ad.softmax_cross_entropy(ad.dense(b, Tensor(w), Tensor(np.zeros(2))), labels))
        assert np.allclose(a.grad, -lam * b.grad, rtol=0, atol=1e-15)


def test_dropout():
    x = np.random.default_rng(7).standard_normal((4, 5))
    assert np.array_equal(ad.dropout(x, 0.0, True, np.random.default_rng(0)).data, x)
    assert np.array_equal(ad.dropout(x, 0.5, False).data, x)
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, True, np.random.default_rng(0))
    a = ad.dropout(x, 0.3, True, np.random.default_rng(9)).data
    b = ad.dropout(x, 0.3, True, np.random.default_rng(9)).data
    assert np.array_equal(a, b)
    kept = a != 0
    assert np.allclose(a[kept], x[kept] / 0.7)


def test_batch_norm_gradients():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((3, 5, 2))
    g, b = rng.standard_normal(2), rng.standard_normal(2)
    proj = rng.standard_normal((3, 5, 2))

    def build(x_, g_, b_):
        running = {"mean": np.zeros(2), "var": np.ones(2)}
        return _weighted(ad.batch_norm(x_, g_, b_, running, True), proj)

    _check(build, [x, g, b])


def test_backward_examples():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    ad.backward(ad.tensor_sum(x))
    assert np.array_equal(x.grad, np.ones(3))
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = np.array([3.0, -4.0])
    ad.backward(ad.tensor_sum(ad.mul(a, Tensor(y))))
    assert np.array_equal(a.grad, y)
    with pytest.raises(ad.ShapeError):
        ad.backward(Tensor(np.ones(2)))


def test_adam_examples():
    opt = ad.Adam()
    p = {"w": np.array([0.5])}
    opt.step(p, {"w": np.zeros(1)}, 1e-3)
    assert p["w"][0] == 0.5 and opt.t == 1
    opt = ad.Adam()
    p = {"w": np.array([0.0])}
    opt.step(p, {"w": np.ones(1)}, 1e-3)
    assert p["w"][0] == pytest.approx(-9.99999e-4, rel=1e-5)
    for _ in range(5):
        opt.step(p, {"w": np.ones(1)}, 1e-3)
    assert p["w"][0] < 0
    with pytest.raises(ad.NonFiniteGradientError):
        opt.step(p, {"w": np.array([np.nan])}, 1e-3)


def test_forward_is_deterministic():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 12, 3))
    w = rng.standard_normal((8, 3, 3))
    a = ad.dropout(ad.conv1d(x, w, np.zeros(3)), 0.1, True, np.random.default_rng(1)).data
    b = ad.dropout(ad.conv1d(x, w, np.zeros(3)), 0.1, True, np.random.default_rng(1)).data
    assert a.tobytes() == b.tobytes()
