"""Network forward/backward, optimizer, policy head, checkpoint container."""

import os

import numpy as np
import pytest

import gradcheck
from ecosignal import nn


def test_forward_zero_weights_outputs_bias():
    net = nn.MLP([4, 3], ["linear"], rng=np.random.default_rng(0))
    net.params[0][0][:] = 0.0
    net.params[0][1][:] = [1.0, -2.0, 0.5]
    out, _ = net.forward(np.zeros((2, 4)))
    assert np.allclose(out, [[1.0, -2.0, 0.5]] * 2)


def test_forward_identity_passthrough():
    net = nn.MLP([3, 3], ["linear"], rng=np.random.default_rng(0))
    net.params[0][0][:] = np.eye(3)
    net.params[0][1][:] = 0.0
    x = np.array([[0.3, -1.2, 4.0]])
    out, _ = net.forward(x)
    assert np.array_equal(out, x)


def test_forward_matches_matrix_oracle():
    rng = np.random.default_rng(1)
    net = nn.MLP([5, 7, 2], ["tanh", "linear"], rng=rng)
    x = rng.normal(size=(3, 5))
    out, _ = net.forward(x)
    w0, b0 = net.params[0]
    w1, b1 = net.params[1]
    expected = np.tanh(x @ w0 + b0) @ w1 + b1
    assert np.allclose(out, expected, atol=1e-12)


def test_forward_shape_mismatch_raises():
    net = nn.MLP([4, 2], ["linear"], rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 5)))


def test_backward_zero_upstream_zero_grads():
    rng = np.random.default_rng(2)
    net = nn.MLP([4, 6, 2], ["relu", "linear"], rng=rng)
    _, cache = net.forward(rng.normal(size=(3, 4)))
    grads, dx = net.backward(cache, np.zeros((3, 2)))
    assert all(np.all(gw == 0) and np.all(gb == 0) for gw, gb in grads)
    assert np.all(dx == 0)


def test_backward_linearity():
    rng = np.random.default_rng(3)
    net = nn.MLP([4, 5, 2], ["tanh", "linear"], rng=rng)
    x = rng.normal(size=(2, 4))
    d1 = rng.normal(size=(2, 2))
    d2 = rng.normal(size=(2, 2))
    _, cache = net.forward(x)
    g1, _ = net.backward(cache, d1)
    g2, _ = net.backward(cache, d2)
    g12, _ = net.backward(cache, d1 + d2)
    for (a_w, a_b), (b_w, b_b), (c_w, c_b) in zip(g1, g2, g12):
        assert np.allclose(a_w + b_w, c_w, atol=1e-12)
        assert np.allclose(a_b + b_b, c_b, atol=1e-12)


def test_backward_finite_difference_sample():
    rng = np.random.default_rng(4)
    for trial in range(10):
        net = gradcheck.random_mlp(rng)
        x = rng.normal(size=(3, net.sizes[0]))
        if not gradcheck.kink_safe(net, x):
            continue
        w_out = rng.normal(size=net.sizes[-1])

        def loss():
            y, _ = net.forward(x)
            return float((y @ w_out).sum())

        _, cache = net.forward(x)
        grads, _ = net.backward(cache, np.tile(w_out, (3, 1)))
        gradcheck.fd_check_params(net.params, loss, grads, tol=1e-4)


def test_adam_zero_grad_no_change():
    net = nn.MLP([3, 2], ["linear"], rng=np.random.default_rng(5))
    opt = nn.Adam(net.params, lr=0.1)
    before = [[w.copy(), b.copy()] for w, b in net.params]
    opt.update(net.params, nn.zeros_like_params(net.params))
    for (w, b), (w0, b0) in zip(net.params, before):
        assert np.array_equal(w, w0) and np.array_equal(b, b0)


def test_adam_single_step_hand_formula():
    net = nn.MLP([2, 1], ["linear"], rng=np.random.default_rng(6))
    w0 = net.params[0][0].copy()
    g = np.array([[0.3], [-0.7]])
    opt = nn.Adam(net.params, lr=0.01)
    opt.update(net.params, [[g, np.zeros(1)]])
    # first step with zero moments: delta = -lr * g / (|g| + eps)
    expected = w0 - 0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(net.params[0][0], expected, atol=1e-12)


def test_adam_deterministic():
    def run():
        net = nn.MLP([3, 2], ["linear"], rng=np.random.default_rng(7))
        opt = nn.Adam(net.params, lr=0.05)
        g = [[np.full((3, 2), 0.1), np.full(2, -0.2)]]
        for _ in range(5):
            opt.update(net.params, g)
        return net.params[0][0].copy()

    assert np.array_equal(run(), run())


def test_soft_update_boundaries():
    rng = np.random.default_rng(8)
    online = nn.MLP([2, 2], ["linear"], rng=rng)
    target = nn.MLP([2, 2], ["linear"], rng=rng)
    snapshot = [[w.copy(), b.copy()] for w, b in target.params]

    t1 = target.copy()
    nn.soft_update(t1, online, 1.0)
    assert np.array_equal(t1.params[0][0], online.params[0][0])

    t0 = target.copy()
    nn.soft_update(t0, online, 0.0)
    assert np.array_equal(t0.params[0][0], snapshot[0][0])


def test_soft_update_halfway_scalar():
    online = nn.MLP([1, 1], ["linear"], rng=np.random.default_rng(0))
    target = nn.MLP([1, 1], ["linear"], rng=np.random.default_rng(0))
    online.params[0][0][:] = 2.0
    target.params[0][0][:] = 0.0
    nn.soft_update(target, online, 0.5)
    assert target.params[0][0][0, 0] == pytest.approx(1.0)


# -- squashed-Gaussian head -----------------------------------------------------

def test_sample_action_bounds_and_determinism():
    rng = np.random.default_rng(9)
    for _ in range(200):
        out = rng.normal(size=10) * 3
        action, log_p = nn.sample_action(out, rng)
        # mathematically strict interior; float tanh may saturate at bounds
        assert -0.7 <= action[0] <= 0.7
        assert np.all(action[1:] >= 0.0) and np.all(action[1:] <= 1.0)
        assert np.isfinite(log_p)
    # away from saturation the samples sit strictly inside
    for _ in range(100):
        out = rng.normal(size=10) * 0.5
        action, _ = nn.sample_action(out, rng)
        assert -0.7 < action[0] < 0.7
        assert np.all(action[1:] > 0.0) and np.all(action[1:] < 1.0)


def test_squash_mean_at_tiny_std():
    mean = np.array([0.3, -1.0, 0.0, 2.0, -0.5])
    out = np.concatenate([mean, np.full(5, -40.0)])  # clamps to LOG_STD_MIN
    rng = np.random.default_rng(10)
    action, _ = nn.sample_action(out, rng)
    expected = nn.ACTION_SCALE * np.tanh(mean) + nn.ACTION_SHIFT
    assert np.allclose(action, expected, atol=1e-6)


def test_deterministic_action_is_squashed_mean():
    mean = np.array([[0.5, 0.1, -0.3, 0.0, 1.0]])
    det = nn.deterministic_action(mean)
    assert np.allclose(det, nn.ACTION_SCALE * np.tanh(mean) + nn.ACTION_SHIFT)


def test_log_prob_normalizes_on_first_dimension():
    # quadrature of exp(log p) over the first action's range must be ~1
    mean = np.full(5, 0.2)
    log_std_raw = np.full(5, -0.5)
    scale = nn.ACTION_SCALE[0]
    a_grid = np.linspace(-scale + 1e-6, scale - 1e-6, 200_001)
    pre = np.arctanh(a_grid / scale)
    std = np.exp(-0.5)
    xi = (pre - mean[0]) / std
    xi_full = np.zeros((len(a_grid), 5))
    xi_full[:, 0] = xi
    _, log_p, _ = nn.squash_sample(np.tile(mean, (len(a_grid), 1)),
                                   np.tile(log_std_raw, (len(a_grid), 1)),
                                   xi_full)
    density = np.exp(log_p[:, 0])
    integral = np.trapezoid(density, a_grid)
    assert integral == pytest.approx(1.0, rel=0.02)


def test_log_prob_matches_naive_formula():
    rng = np.random.default_rng(11)
    mean = rng.normal(size=(4, 5))
    lsr = rng.normal(size=(4, 5)) * 0.2
    xi = rng.standard_normal((4, 5))
    _, log_p, _ = nn.squash_sample(mean, lsr, xi)
    std = np.exp(np.clip(lsr, nn.LOG_STD_MIN, nn.LOG_STD_MAX))
    pre = mean + std * xi
    naive = (-np.log(std) - 0.5 * xi ** 2 - 0.5 * np.log(2 * np.pi)
             - np.log(nn.ACTION_SCALE) - np.log(1.0 - np.tanh(pre) ** 2))
    assert np.allclose(log_p, naive, atol=1e-9)


# -- checkpoint container ---------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(12)
    arrays = {"a.w0": rng.normal(size=(4, 3)),
              "b": np.arange(5, dtype=np.int64),
              "c": rng.normal(size=7).astype(np.float32)}
    meta = {"kind": "test", "nested": {"x": 1}}
    path = tmp_path / "ckpt.bin"
    nn.save_checkpoint(path, arrays, meta)
    loaded, meta2 = nn.load_checkpoint(path)
    assert meta2 == meta
    for k, v in arrays.items():
        assert loaded[k].dtype == v.dtype
        assert np.array_equal(loaded[k], v)


def test_checkpoint_bytes_stable(tmp_path):
    arrays = {"x": np.linspace(0, 1, 11)}
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    nn.save_checkpoint(p1, arrays, {"v": 1})
    nn.save_checkpoint(p2, arrays, {"v": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        nn.load_checkpoint(path)


def test_mlp_flat_round_trip():
    rng = np.random.default_rng(13)
    net = nn.MLP([6, 5, 3], ["relu", "linear"], rng=rng)
    arrays = net.flat_arrays("m")
    net2 = nn.MLP(net.sizes, net.activations, rng=np.random.default_rng(99))
    net2.load_flat(arrays, "m")
    x = rng.normal(size=(2, 6))
    assert np.array_equal(net.forward(x)[0], net2.forward(x)[0])
