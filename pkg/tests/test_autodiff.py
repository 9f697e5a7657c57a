import numpy as np
import pytest

from gaitlab import nets
from gaitlab.autodiff import Tensor, as_tensor, maximum, minimum, param

from conftest import finite_difference_grad


def test_quadratic_gradient():
    theta = param(np.array([1.0, -2.0, 3.0]))
    loss = (theta.square() * 0.5).sum()
    loss.backward()
    assert np.allclose(theta.grad, theta.data)


def test_constant_loss_zero_gradient():
    theta = param(np.array([1.0, 2.0]))
    loss = (theta * 0.0).sum() + 5.0
    loss.backward()
    assert np.allclose(theta.grad, 0.0)


def test_matmul_broadcast_backward():
    rng = np.random.default_rng(0)
    W = param(rng.normal(size=(4, 3)))
    b = param(rng.normal(size=3))
    x = rng.normal(size=(8, 4))
    loss = ((as_tensor(x) @ W + b).square()).mean()
    loss.backward()

    def f(p):
        return float((((x @ p["W"]) + p["b"]) ** 2).mean())

    fd = finite_difference_grad(f, {"W": W.data, "b": b.data})
    assert np.allclose(W.grad, fd["W"], rtol=1e-6, atol=1e-8)
    assert np.allclose(b.grad, fd["b"], rtol=1e-6, atol=1e-8)


def test_elu_minimum_clip_grads():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(5, 4))
    theta = param(rng.normal(size=(4,)))

    def graph(t):
        h = (as_tensor(x0) * t).elu()
        m = minimum(h, as_tensor(np.full_like(x0, 0.5)))
        return (m.clip(-0.3, 2.0).square()).sum()

    loss = graph(theta)
    loss.backward()

    def f(p):
        h = x0 * p["t"]
        h = np.where(h > 0, h, np.exp(h) - 1)
        m = np.minimum(h, 0.5)
        return float((np.clip(m, -0.3, 2.0) ** 2).sum())

    fd = finite_difference_grad(f, {"t": theta.data})
    assert np.allclose(theta.grad, fd["t"], rtol=1e-5, atol=1e-7)


def test_maximum_and_div():
    a = param(np.array([2.0, -1.0]))
    b = param(np.array([1.0, 1.0]))
    loss = (maximum(a, b) / b).sum()
    loss.backward()
    # element 0: a wins -> d/da = 1/b = 1, d/db = -a/b^2 = -2
    # element 1: b wins -> max = b, so b/b = 1 -> d/db = 0
    assert np.allclose(a.grad, [1.0, 0.0])
    assert np.allclose(b.grad, [-2.0, 0.0])


def test_reused_node_accumulates():
    x = param(np.array([3.0]))
    y = x * 2.0
    loss = (y + y).sum()
    loss.backward()
    assert np.allclose(x.grad, [4.0])


def test_backward_requires_scalar():
    x = param(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        (x * 2).backward()


@pytest.mark.parametrize("seed", range(5))
def test_mlp_policy_gradients_match_fd(seed):
    """Full actor+critic graph vs central finite differences."""
    rng = np.random.default_rng(seed)
    pol = nets.init_policy(5, 7, 3, rng, hidden=(8, 8))
    obs = rng.normal(size=(6, 5))
    cobs = rng.normal(size=(6, 7))
    actions = rng.normal(size=(6, 3))
    returns = rng.normal(size=6)

    def build(params):
        tensors = {k: param(v) for k, v in params.items()}
        mean = nets.actor_mean_graph(pol, tensors, obs)
        logstd = nets.logstd_graph(tensors)
        logp = nets.gaussian_logp_graph(mean, logstd, actions)
        value = nets.critic_value_graph(pol, tensors, cobs)
        loss = (-logp).mean() + ((value - as_tensor(returns[:, None])).square()).mean()
        return loss, tensors

    loss, tensors = build(pol.params)
    loss.backward()

    def f(params):
        l, _ = build(params)
        return float(l.data)

    fd = finite_difference_grad(f, pol.params)
    for k in pol.params:
        a, b = tensors[k].grad, fd[k]
        if a is None:
            a = np.zeros_like(b)
        denom = np.maximum(np.abs(b), 1e-6)
        assert np.max(np.abs(a - b) / denom) < 1e-4, k


def test_net_forward_zero_weights():
    pol = nets.zero_policy(4, 5, 2)
    mean, logstd, value = nets.net_forward(pol, np.zeros((3, 4)), np.zeros((3, 5)))
    assert np.all(mean == 0) and np.all(value == 0)
    assert logstd.shape == (2,)


def test_net_forward_identity_single_layer():
    pol = nets.MlpPolicy(1, 1, 1, hidden=(), params={
        "actor.W0": np.array([[1.0]]), "actor.b0": np.zeros(1),
        "critic.W0": np.array([[1.0]]), "critic.b0": np.zeros(1),
        "actor.logstd": np.zeros(1),
    })
    x = np.array([[0.7]])
    mean, _, value = nets.net_forward(pol, x, x)
    assert mean[0, 0] == pytest.approx(0.7)
    assert value[0] == pytest.approx(0.7)


def test_forward_matches_independent_matrix_math():
    rng = np.random.default_rng(11)
    pol = nets.init_policy(4, 6, 2, rng)
    obs = rng.normal(size=(5, 4))
    got = nets.actor_mean(pol, obs)

    h = obs
    for i in range(3):
        h = h.dot(pol.params[f"actor.W{i}"]) + pol.params[f"actor.b{i}"]
        if i < 2:
            h = np.where(h > 0, h, np.expm1(np.minimum(h, 0)))
    assert np.max(np.abs(got - h)) < 1e-12


def test_shape_mismatch_rejected():
    pol = nets.zero_policy(4, 5, 2)
    with pytest.raises(ValueError):
        nets.actor_mean(pol, np.zeros((3, 7)))


def test_flatten_roundtrip():
    rng = np.random.default_rng(2)
    pol = nets.init_policy(3, 4, 2, rng)
    flat = nets.flatten_params(pol.params)
    back = nets.unflatten_params(pol.params, flat)
    for k in pol.params:
        assert np.array_equal(back[k], pol.params[k])
