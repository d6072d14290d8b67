import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duelattack.nnkit import (AdamState, MlpSpec, ParamVector, adam_step, forward, grad, init_params,
                              logprob_and_grad)


def random_params(spec, seed):
    rng = np.random.default_rng(seed)
    p = init_params(spec, rng)
    p.values[:] = rng.normal(0.0, 0.7, p.values.size)
    if spec.output_head == "gaussian":
        p["log_std"][...] = rng.uniform(-1.0, 0.5, spec.out_dim)
    return p


def straight_line_forward(params, x, n_layers, act):
    h = np.asarray(x, dtype=np.float64)
    for i in range(n_layers):
        W, b = params[f"W{i}"], params[f"b{i}"]
        z = np.array([sum(W[r, c] * h[c] for c in range(W.shape[1])) + b[r] for r in range(W.shape[0])])
        h = z if i == n_layers - 1 else np.array([act(v) for v in z])
    return h


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def fd_check(f, params, h=1e-5):
    """Largest relative error between the analytic gradient and central differences."""
    _, g = f(params)
    worst = 0.0
    for k in range(params.values.size):
        plus, minus = params.copy(), params.copy()
        plus.values[k] += h
        minus.values[k] -= h
        fd = (f(plus)[0] - f(minus)[0]) / (2 * h)
        if abs(fd) < 1e-7 and abs(g.values[k]) < 1e-7:
            continue
        worst = max(worst, rel_err(fd, g.values[k]))
    return worst


def test_identity_linear_layer():
    spec = MlpSpec((3, 3))
    p = ParamVector.zeros(spec.manifest())
    p["W0"][...] = np.eye(3)
    x = np.array([0.3, -1.2, 4.0])
    assert np.array_equal(forward(spec, p, x), x)


def test_zero_weights_return_bias():
    spec = MlpSpec((4, 5, 2))
    p = ParamVector.zeros(spec.manifest())
    p["b1"][...] = [1.5, -2.0]
    for x in np.random.default_rng(0).normal(size=(5, 4)):
        assert np.array_equal(forward(spec, p, x), [1.5, -2.0])


def test_forward_matches_straight_line_reimplementation():
    spec = MlpSpec((4, 8, 2), "tanh")
    p = random_params(spec, 11)
    for x in np.random.default_rng(1).normal(size=(10, 4)):
        ref = straight_line_forward(p, x, 2, math.tanh)
        assert np.max(np.abs(forward(spec, p, x) - ref)) < 1e-12


def test_forward_rejects_wrong_width():
    spec = MlpSpec((4, 3))
    with pytest.raises(ValueError):
        forward(spec, init_params(spec, np.random.default_rng(0)), np.zeros(5))


def test_zero_upstream_gives_zero_gradient():
    spec = MlpSpec((3, 5, 2))
    p = random_params(spec, 2)
    assert not np.any(grad(spec, p, np.ones(3), np.zeros(2)).values)


def test_linear_layer_weight_gradient_is_outer_product():
    spec = MlpSpec((3, 2))
    p = random_params(spec, 3)
    x, up = np.array([0.5, -1.0, 2.0]), np.array([1.5, -0.25])
    g = grad(spec, p, x, up)
    assert np.array_equal(g["W0"], np.outer(up, x))
    assert np.array_equal(g["b0"], up)


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_gradient_matches_finite_differences(seed, activation):
    spec = MlpSpec((3, 5, 1), activation)
    p = random_params(spec, seed)
    x, up = np.random.default_rng(seed + 10).normal(size=3), np.array([1.3])
    err = fd_check(lambda q: (float(forward(spec, q, x) @ up), grad(spec, q, x, up)), p)
    assert err < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("head", ["gaussian", "categorical"])
def test_logprob_gradient_matches_finite_differences(seed, head):
    spec = MlpSpec((3, 6, 2 if head == "gaussian" else 4), "tanh", head)
    p = random_params(spec, seed)
    rng = np.random.default_rng(seed + 20)
    x = rng.normal(size=3)
    action = rng.normal(size=2) if head == "gaussian" else 2
    err = fd_check(lambda q: logprob_and_grad(spec, q, x, action), p)
    assert err < 1e-4


def test_gaussian_logprob_at_mean():
    spec = MlpSpec((2, 3), "tanh", "gaussian")
    p = random_params(spec, 4)
    x = np.array([0.1, 0.2])
    mean = forward(spec, p, x)
    sigma = np.exp(p["log_std"])
    logp, _ = logprob_and_grad(spec, p, x, mean)
    assert logp == pytest.approx(-np.sum(np.log(sigma) + 0.5 * math.log(2 * math.pi)), abs=1e-12)


def test_gaussian_log_std_is_clamped():
    spec = MlpSpec((1, 1), "tanh", "gaussian")
    p = ParamVector.zeros(spec.manifest())
    p["log_std"][...] = 10.0
    logp, _ = logprob_and_grad(spec, p, np.zeros(1), np.zeros(1))
    assert logp == pytest.approx(-(2.0 + 0.5 * math.log(2 * math.pi)))


def test_uniform_categorical_logprob():
    spec = MlpSpec((2, 5), "tanh", "categorical")
    p = ParamVector.zeros(spec.manifest())
    for a in range(5):
        assert logprob_and_grad(spec, p, np.ones(2), a)[0] == pytest.approx(-math.log(5), abs=1e-15)


def test_categorical_rejects_out_of_range_action():
    spec = MlpSpec((2, 3), "tanh", "categorical")
    with pytest.raises(ValueError):
        logprob_and_grad(spec, ParamVector.zeros(spec.manifest()), np.ones(2), 3)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_categorical_probabilities_sum_to_one(seed):
    spec = MlpSpec((3, 4, 6), "tanh", "categorical")
    p = random_params(spec, seed)
    x = np.random.default_rng(seed).normal(size=3) * 3
    total = sum(math.exp(logprob_and_grad(spec, p, x, a)[0]) for a in range(6))
    assert abs(total - 1.0) < 1e-9


def test_gaussian_density_integrates_to_one():
    spec = MlpSpec((1, 1), "tanh", "gaussian", log_std_init=-0.3)
    p = init_params(spec, np.random.default_rng(0))
    grid = np.linspace(-12, 12, 24001)
    dens = np.exp([logprob_and_grad(spec, p, np.array([0.4]), np.array([a]))[0] for a in grid])
    assert abs(np.trapezoid(dens, grid) - 1.0) < 1e-3


def test_param_round_trip_is_bit_identical():
    spec = MlpSpec((4, 8, 2))
    p = random_params(spec, 5)
    restored = ParamVector(np.frombuffer(p.values.astype("<f8").tobytes(), dtype="<f8").copy(), p.manifest)
    x = np.random.default_rng(0).normal(size=(7, 4))
    assert np.array_equal(forward(spec, p, x), forward(spec, restored, x))


def test_manifest_size_mismatch_rejected():
    with pytest.raises(ValueError):
        ParamVector(np.zeros(5), (("W0", (2, 2)),))


def test_adam_zero_gradient_keeps_parameters():
    p = ParamVector(np.array([1.0, -2.0]), (("w", (2,)),))
    new, _ = adam_step(p, p.like(np.zeros(2)), AdamState.like(p), lr=0.1)
    assert np.array_equal(new.values, p.values)


def test_adam_first_step_closed_form():
    p = ParamVector(np.array([1.0, -2.0, 0.5]), (("w", (3,)),))
    g = np.array([0.3, -4.0, 1e-6])
    lr = 0.01
    new, st_ = adam_step(p, p.like(g), AdamState.like(p), lr)
    # after bias correction m_hat = g and v_hat = g^2
    expected = p.values - lr * g / (np.abs(g) + 1e-8)
    assert np.allclose(new.values, expected, rtol=0, atol=1e-15)
    assert st_.t == 1


def test_adam_two_steps_decrease_quadratic():
    p = ParamVector(np.array([1.0]), (("x", (1,)),))
    s = AdamState.like(p)
    losses = [float(p.values[0] ** 2)]
    for _ in range(2):
        p, s = adam_step(p, p.like(2 * p.values), s, lr=0.1)
        losses.append(float(p.values[0] ** 2))
    assert losses[0] > losses[1] > losses[2]
