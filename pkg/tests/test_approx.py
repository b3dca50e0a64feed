import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decmarl.approx import (LOG_STD_MAX, LOG_STD_MIN, MlpParams, Sgd, SquashedGaussianHead, backward, finite_difference,
                            flatten, forward, log1m_tanh_sq, log_prob, log_prob_backward, relative_error,
                            reparam_backward, sample_squashed)


def reference_forward(sizes, flat, x):
    # second evaluator: unpack the flat vector itself and loop over units
    pos, h = 0, list(map(float, x))
    layers = list(zip(sizes[:-1], sizes[1:]))
    for k, (n_in, n_out) in enumerate(layers):
        W = flat[pos:pos + n_in * n_out].reshape(n_in, n_out)
        pos += n_in * n_out
        b = flat[pos:pos + n_out]
        pos += n_out
        out = []
        for j in range(n_out):
            acc = b[j]
            for i in range(n_in):
                acc = acc + h[i] * W[i, j]
            out.append(np.tanh(acc) if k < len(layers) - 1 else acc)
        h = out
    return np.array(h)


def head_with_mean(mu, log_std, obs_dim=1):
    """Head whose outputs are constant (mu, log_std) regardless of the state."""
    d = len(mu)
    trunk = MlpParams([obs_dim, 2 * d], weights=[np.zeros((obs_dim, 2 * d))], biases=[np.concatenate([mu, log_std])])
    return SquashedGaussianHead(obs_dim, d, trunk=trunk)


def test_zero_net_outputs_zero():
    net = MlpParams([3, 4, 2])
    net.set_flat(np.zeros(net.num_params))
    np.testing.assert_array_equal(forward(net, np.ones(3)), np.zeros(2))


def test_identity_layer():
    net = MlpParams([3, 3], weights=[np.eye(3)], biases=[np.zeros(3)])
    x = np.array([0.5, -2.0, 7.0])
    np.testing.assert_array_equal(forward(net, x), x)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_forward_matches_second_evaluator(seed):
    sizes = [3, 5, 4, 2]
    net = MlpParams(sizes, seed=seed)
    x = np.random.default_rng(seed).normal(size=3)
    np.testing.assert_allclose(forward(net, x), reference_forward(sizes, net.flat(), x), rtol=0, atol=1e-14)


def test_linear_layer_gradient_is_outer_product():
    net = MlpParams([3, 2], seed=1)
    x, up = np.array([1.0, 2.0, 3.0]), np.array([0.5, -1.0])
    grads, gin = backward(net, x, up)
    np.testing.assert_allclose(grads[0], np.outer(x, up))
    np.testing.assert_allclose(grads[1], up)
    np.testing.assert_allclose(gin, net.weights[0] @ up)


def test_zero_upstream_zero_gradients():
    net = MlpParams([3, 6, 2], seed=2)
    grads, gin = backward(net, np.ones((4, 3)), np.zeros((4, 2)))
    assert all(np.all(g == 0) for g in grads) and np.all(gin == 0)


def test_shape_mismatch():
    net = MlpParams([3, 2])
    with pytest.raises(ValueError):
        forward(net, np.ones(4))
    with pytest.raises(ValueError):
        backward(net, np.ones(3), np.ones(3))
    with pytest.raises(ValueError):
        MlpParams([3, 2], weights=[np.ones((2, 2))], biases=[np.ones(2)])


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = MlpParams([4, 8, 6, 3], seed=seed)
    assert net.num_params <= 200
    x, up = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
    grads, gin = backward(net, x, up)
    theta = net.flat()

    def f(v):
        net.set_flat(v)
        return float(np.sum(up * forward(net, x)))

    fd = finite_difference(f, theta)
    net.set_flat(theta)
    assert relative_error(flatten(grads), fd) < 1e-4
    fd_in = finite_difference(lambda v: float(np.sum(up * forward(net, v.reshape(5, 4)))), x.ravel())
    assert relative_error(gin.ravel(), fd_in) < 1e-4


def test_deterministic_bitwise():
    net = MlpParams([4, 8, 2], seed=3)
    x = np.random.default_rng(0).normal(size=(6, 4))
    a, b = backward(net, x, np.ones((6, 2))), backward(net, x, np.ones((6, 2)))
    assert all(np.array_equal(g, h) for g, h in zip(a[0], b[0]))


def test_sgd_momentum():
    net = MlpParams([1, 1], weights=[np.zeros((1, 1))], biases=[np.zeros(1)])
    opt = Sgd(net, 0.1, momentum=0.5)
    g = [np.ones((1, 1)), np.ones(1)]
    opt.step(g)
    opt.step(g)
    # velocity 1 then 1.5: total displacement 0.25
    assert net.biases[0][0] == pytest.approx(-0.25)
    opt.step(g, ascent=True)
    assert net.biases[0][0] == pytest.approx(-0.25 + 0.175)


def test_stable_log_det():
    u = np.array([-30.0, -3.0, 0.0, 0.5, 3.0, 30.0])
    assert np.all(np.isfinite(log1m_tanh_sq(u)))
    small = u[1:-1]
    np.testing.assert_allclose(log1m_tanh_sq(small), np.log(1 - np.tanh(small) ** 2), rtol=1e-10)
    assert log1m_tanh_sq(30.0) == pytest.approx(2 * np.log(2) - 60.0)


def test_noiseless_and_tiny_sigma():
    head = head_with_mean(np.array([0.3, -1.2]), np.array([0.0, 0.0]))
    a, xi = sample_squashed(head, np.zeros(1), np.random.default_rng(0), xi=np.zeros(2))
    np.testing.assert_allclose(a, np.tanh([0.3, -1.2]))
    tight = head_with_mean(np.array([0.3]), np.array([LOG_STD_MIN]))
    draws = [sample_squashed(tight, np.zeros(1), np.random.default_rng(k))[0] for k in range(20)]
    np.testing.assert_allclose(draws, np.tanh(0.3), atol=1e-8)


def test_log_std_clamped():
    head = head_with_mean(np.array([0.0, 0.0]), np.array([50.0, -50.0]))
    _, log_std, inside, _ = head.distribution(np.zeros(1))
    np.testing.assert_array_equal(log_std, [LOG_STD_MAX, LOG_STD_MIN])
    assert not inside.any()


def test_pre_squash_mean_matches_mu():
    mu, log_std = np.array([0.4]), np.array([-0.5])
    head = head_with_mean(mu, log_std)
    rng = np.random.default_rng(1)
    n = 100_000
    a, _ = sample_squashed(head, np.zeros((n, 1)), rng)
    u = np.arctanh(a[:, 0])
    assert abs(u.mean() - mu[0]) < 3 * np.exp(log_std[0]) / np.sqrt(n)
    assert np.all(np.abs(a) < 1)


def test_log_prob_closed_form_and_boundary():
    head = head_with_mean(np.array([0.0]), np.array([0.0]))
    assert log_prob(head, np.zeros(1), np.array([0.0])) == pytest.approx(-0.91894, abs=1e-5)
    for bad in (1.0, -1.0, 1.5):
        with pytest.raises(ValueError):
            log_prob(head, np.zeros(1), np.array([bad]))


@pytest.mark.parametrize("mu,log_std", [(0.0, 0.0), (0.8, -1.0), (-1.5, 0.5)])
def test_density_integrates_to_one(mu, log_std):
    head = head_with_mean(np.array([mu]), np.array([log_std]))
    # integrate in u = atanh(a) where the density is a plain Gaussian times the Jacobian
    a = np.tanh(np.linspace(-12, 12, 200_001))
    mids = 0.5 * (a[1:] + a[:-1])
    dens = np.exp(log_prob(head, np.zeros((len(mids), 1)), mids[:, None]))
    assert np.sum(dens * np.diff(a)) == pytest.approx(1.0, abs=1e-3)


def test_sample_has_finite_log_prob():
    head = SquashedGaussianHead(3, 2, hidden=(8,), seed=4)
    s = np.random.default_rng(0).normal(size=(50, 3))
    a, _ = sample_squashed(head, s, np.random.default_rng(1))
    assert np.all(np.isfinite(log_prob(head, s, a)))


@pytest.mark.parametrize("seed", range(8))
def test_log_prob_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    head = SquashedGaussianHead(3, 2, hidden=(6, 6), seed=seed)
    assert head.trunk.num_params <= 200
    s = rng.normal(size=(4, 3))
    a = np.tanh(rng.normal(size=(4, 2)))
    theta = head.trunk.flat()

    def f(v):
        head.trunk.set_flat(v)
        return float(np.sum(log_prob(head, s, a)))

    fd = finite_difference(f, theta)
    head.trunk.set_flat(theta)
    assert relative_error(flatten(log_prob_backward(head, s, a)), fd) < 1e-4


@pytest.mark.parametrize("seed", range(8))
def test_reparam_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    head = SquashedGaussianHead(3, 2, hidden=(6, 6), seed=seed)
    s, xi = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    c = rng.normal(size=(4, 2))
    theta = head.trunk.flat()

    def f(v):
        head.trunk.set_flat(v)
        return float(np.sum(c * sample_squashed(head, s, None, xi=xi)[0]))

    fd = finite_difference(f, theta)
    head.trunk.set_flat(theta)
    assert relative_error(flatten(reparam_backward(head, s, xi, c)), fd) < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    net = MlpParams([3, 5, 2], seed=7)
    net.save(tmp_path / "net")
    raw = np.fromfile(tmp_path / "net.bin", dtype="<f8")
    np.testing.assert_array_equal(raw, net.flat())
    back = MlpParams.load(tmp_path / "net")
    np.testing.assert_array_equal(back.flat(), net.flat())
    assert back.sizes == [3, 5, 2]
