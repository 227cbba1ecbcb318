import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import conv3d_loops, finite_difference
from structage import nnkit
from structage.nnkit import (Concat, Conv3d, Dense, MaxPool2, Network, OptimizerState, ReLU, Upsample2, forward,
                             gradients, load_network, mae_loss, mixup_batch, optimizer_step, save_network,
                             shifted_patch)


def _tiny_unet(rng, dtype=np.float64):
    net = Network()
    net.add(Conv3d(1, 2, 3, rng, dtype), -1)
    skip = net.add(ReLU())
    net.add(MaxPool2())
    net.add(Conv3d(2, 3, 3, rng, dtype))
    net.add(ReLU())
    up = net.add(Upsample2())
    net.add(Concat(), (up, skip))
    net.add(Conv3d(5, 1, 1, rng, dtype))
    return net


def test_identity_conv_and_relu():
    net = Network()
    conv = Conv3d(1, 1, 1)
    conv.params["weight"][...] = 1.0
    net.add(conv)
    x = np.random.default_rng(0).normal(size=(2, 1, 3, 4, 5)).astype(np.float32)
    assert np.array_equal(forward(net, x), x)
    net.add(ReLU())
    assert np.array_equal(forward(net, x), np.maximum(x, 0))


def test_constant_conv_output():
    conv = Conv3d(2, 1, 3)
    conv.params["bias"][...] = 4.0
    net = Network()
    net.add(conv)
    out = forward(net, np.ones((1, 2, 4, 4, 4), np.float32))
    assert np.all(out == 4.0)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 4, 6))
    w = rng.normal(size=(4, 3, 3, 3, 3))
    b = rng.normal(size=4)
    ref = conv3d_loops(x, w, b)
    assert np.allclose(nnkit._conv3d(x, w, b), ref, atol=1e-10)
    assert np.allclose(nnkit.conv3d_reference(x, w, b), ref, atol=1e-10)


def test_conv_backward_matches_numpy_path():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 2, 4, 5, 3))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    d = rng.normal(size=(2, 3, 4, 5, 3))
    dx, dw = nnkit._conv3d_backward(x, w, d)
    rx, rw = nnkit._conv3d_reference_backward(x, w, d)
    assert np.allclose(dx, rx, atol=1e-10) and np.allclose(dw, rw, atol=1e-10)


def test_mae_examples():
    assert mae_loss(np.array([1.0, 2.0]), np.array([1.0, 4.0])) == 1.0
    assert mae_loss(np.array([3.0]), np.array([3.0])) == 0.0
    assert mae_loss(np.array([0.0, 0.0]), np.array([1.0, 3.0]), np.array([3.0, 1.0])) == 1.5
    with pytest.raises(ValueError):
        mae_loss(np.zeros(2), np.zeros(3))


def test_single_weight_gradient_by_hand():
    net = Network()
    lin = Dense(1, 1, dtype=np.float64)
    lin.params["weight"][...] = 2.0
    net.add(lin)
    x = np.array([[1.5], [-2.0], [3.0]])
    t = np.array([[10.0], [0.0], [6.0]])
    loss, (gb, gw) = gradients(net, x, t)  # sorted names: bias, weight
    pred = 2.0 * x
    s = np.sign(pred - t)
    assert loss == pytest.approx(np.abs(pred - t).mean())
    assert gw[0, 0] == pytest.approx((s * x).mean())
    assert gb[0] == pytest.approx(s.mean())
    # zero residual gives a zero subgradient
    assert gradients(net, np.array([[1.0]]), np.array([[2.0]]))[1][1][0, 0] == 0.0


def test_unet_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    net = _tiny_unet(rng)
    x = rng.normal(size=(2, 1, 4, 4, 4))
    t = rng.normal(size=(2, 1, 4, 4, 4)) * 3
    _, grads = gradients(net, x, t)
    params = net.param_list()
    fd = finite_difference(lambda: mae_loss(forward(net, x), t), params, h=1e-6)
    for g, f in zip(grads, fd):
        assert np.allclose(g, f, atol=1e-5)


def test_weighted_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    net = _tiny_unet(rng)
    x = rng.normal(size=(1, 1, 4, 2, 4))
    t = rng.normal(size=x.shape)
    w = rng.uniform(0.1, 1.0, size=x.shape)
    _, grads = gradients(net, x, t, w)
    fd = finite_difference(lambda: mae_loss(forward(net, x), t, w), net.param_list(), h=1e-6)
    assert all(np.allclose(g, f, atol=1e-5) for g, f in zip(grads, fd))


def test_sgd_step():
    p = [np.array([1.0])]
    optimizer_step(OptimizerState("sgd", 0.05), p, [np.array([1.0])])
    assert p[0][0] == pytest.approx(0.95)


def test_adam_first_step_is_lr_sign():
    p = [np.array([1.0, 1.0, 1.0])]
    st_ = OptimizerState("adam", 0.001)
    optimizer_step(st_, p, [np.array([3.0, -0.2, 0.0])])
    assert np.allclose(p[0], [0.999, 1.001, 1.0], atol=1e-9)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_leaves_params(kind):
    p = [np.array([0.3, -1.0])]
    s = OptimizerState(kind, 0.1)
    for _ in range(3):
        optimizer_step(s, p, [np.zeros(2)])
    assert p[0].tolist() == [0.3, -1.0]


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        OptimizerState("rmsprop")


def test_shift_examples_and_clamp():
    v = np.arange(10 * 4 * 4, dtype=np.float32).reshape(10, 4, 4)
    assert np.array_equal(shifted_patch(v, (2, 0, 0), (4, 4, 4), (1, 0, 0)), v[3:7])
    assert np.array_equal(shifted_patch(v, (0, 0, 0), (4, 4, 4), (-1, 0, 0)), v[0:4])
    assert np.array_equal(shifted_patch(v, (6, 0, 0), (4, 4, 4), (1, 1, -1)), v[6:10])


@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 3))
def test_shift_in_range_and_deterministic(seed, s):
    a = nnkit.draw_shift(np.random.default_rng(seed), s)
    b = nnkit.draw_shift(np.random.default_rng(seed), s)
    assert a.tolist() == b.tolist() and all(-s <= t <= s for t in a)


def test_mixup_examples():
    x = np.array([[0.0], [10.0]])
    y = np.array([[0.0], [100.0]])
    xm, ym, lam = mixup_batch(x, y, np.random.default_rng(5), 0.2, return_lam=True)
    assert np.all((xm >= 0) & (xm <= 10)) and np.all((ym >= 0) & (ym <= 100))
    assert np.allclose(ym, 10 * xm)  # same lambda and partner for inputs and targets
    one_x, one_y = mixup_batch(x[:1], y[:1], np.random.default_rng(0))
    assert np.array_equal(one_x, x[:1]) and np.array_equal(one_y, y[:1])
    with pytest.raises(ValueError):
        mixup_batch(x, y, np.random.default_rng(0), 0.0)


class _FixedLam:
    def __init__(self, lam):
        self.lam = lam

    def beta(self, a, b, size):
        return np.full(size, self.lam)

    def permutation(self, n):
        return np.arange(n)[::-1]


def test_mixup_fixed_lambda():
    x, y = np.array([[2.0], [4.0]]), np.array([[20.0], [40.0]])
    xm, ym = mixup_batch(x, y, _FixedLam(1.0))
    assert np.array_equal(xm, x) and np.array_equal(ym, y)
    xm, ym = mixup_batch(x, y, _FixedLam(0.5))
    assert xm.ravel().tolist() == [3.0, 3.0] and ym.ravel().tolist() == [30.0, 30.0]


@given(st.integers(2, 6), st.integers(0, 2 ** 32 - 1))
def test_mixup_convex(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    y = rng.normal(size=(n, 1))
    xm, ym = mixup_batch(x, y, np.random.default_rng(seed + 1))
    assert xm.min() >= x.min() - 1e-12 and xm.max() <= x.max() + 1e-12
    assert ym.min() >= y.min() - 1e-12 and ym.max() <= y.max() + 1e-12


def test_serialization_bit_exact(tmp_path):
    rng = np.random.default_rng(6)
    net = _tiny_unet(rng, np.float32)
    save_network(net, tmp_path / "n")
    back = load_network(tmp_path / "n")
    assert back.digest() == net.digest()
    assert (tmp_path / "n.bin").stat().st_size == 4 * net.n_params()
    x = rng.normal(size=(1, 1, 4, 4, 4)).astype(np.float32)
    assert np.array_equal(forward(back, x), forward(net, x))
    with pytest.raises(ValueError):
        nnkit.params_from_bytes(back, b"\0" * 8)


def test_gradient_step_descends():
    rng = np.random.default_rng(7)
    net = _tiny_unet(rng)
    x = rng.normal(size=(3, 1, 4, 4, 4))
    t = rng.normal(size=x.shape) + 2
    loss0, grads = gradients(net, x, t)
    optimizer_step(OptimizerState("sgd", 1e-3), net.param_list(), grads)
    assert mae_loss(forward(net, x), t) < loss0


def test_copy_is_independent():
    net = _tiny_unet(np.random.default_rng(8))
    c = net.copy()
    c.param_list()[0][...] += 1
    assert c.digest() != net.digest()
