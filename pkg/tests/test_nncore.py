import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advskill.errors import ConfigError, OptimizationError, UsageError
from advskill.gradcheck import numeric_grads, relative_error
from advskill.nncore import (
    AdamState,
    GaussianHead,
    GaussianPolicy,
    MlpSpec,
    adam_step,
    gaussian_kl,
    gaussian_logprob,
    init_params,
    mlp_backward,
    mlp_forward,
)


def reference_forward(spec, params, x):
    """Straight-line matrix arithmetic, independent of the library loop."""
    h = np.asarray(x, dtype=np.float64)
    n = spec.n_layers
    for i in range(n):
        h = h @ params[f"W{i}"].astype(np.float64) + params[f"b{i}"].astype(np.float64)
        if i < n - 1:
            h = np.where(h > 0, h, 0.0)
    if spec.output_activation == "sigmoid":
        h = 1.0 / (1.0 + np.exp(-h))
    elif spec.output_activation == "unit-normalize":
        h = h / np.sqrt(np.sum(h * h, axis=-1, keepdims=True))
    return h


def random_net(rng, act="linear", dtype=np.float64):
    spec = MlpSpec(int(rng.integers(1, 6)), tuple(int(h) for h in rng.integers(1, 7, size=rng.integers(0, 3))),
                   int(rng.integers(1, 5)), act)
    params = init_params(spec, rng, dtype)
    for k in params:
        params[k] = params[k] + 0.3 * rng.standard_normal(params[k].shape).astype(dtype)
    return spec, params


def test_zero_weights_give_zero_output():
    spec = MlpSpec(3, (4,), 2)
    params = {k: np.zeros_like(v) for k, v in init_params(spec, np.random.default_rng(0)).items()}
    out, _ = mlp_forward(spec, params, np.array([1.0, -2.0, 3.0]))
    assert np.array_equal(out, np.zeros(2))


def test_identity_layer():
    spec = MlpSpec(3, (), 3)
    params = {"W0": np.eye(3), "b0": np.zeros(3)}
    x = np.array([0.5, -1.0, 2.0])
    assert np.allclose(mlp_forward(spec, params, x)[0], x)


@pytest.mark.parametrize("act", ["linear", "sigmoid", "unit-normalize"])
def test_forward_matches_reference(act):
    rng = np.random.default_rng(1)
    for _ in range(50):
        spec, params = random_net(rng, act)
        x = rng.standard_normal((5, spec.input_dim))
        out, _ = mlp_forward(spec, params, x)
        assert np.allclose(out, reference_forward(spec, params, x), atol=1e-6)


def test_forward_shape_mismatch():
    spec = MlpSpec(3, (4,), 2)
    params = init_params(spec, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        mlp_forward(spec, params, np.zeros(4))


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_unit_normalize_and_sigmoid_ranges(seed):
    rng = np.random.default_rng(seed)
    spec, params = random_net(rng, "unit-normalize", np.float32)
    x = rng.standard_normal((4, spec.input_dim)) * 10
    out, _ = mlp_forward(spec, params, x)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)
    spec, params = random_net(rng, "sigmoid")
    out, _ = mlp_forward(spec, params, rng.standard_normal((4, spec.input_dim)))
    assert np.all((out > 0) & (out < 1))


def test_backward_needs_cache():
    spec = MlpSpec(2, (3,), 1)
    params = init_params(spec, np.random.default_rng(0))
    _, cache = mlp_forward(spec, params, np.ones(2), cache=False)
    with pytest.raises(UsageError):
        mlp_backward(spec, params, cache, np.ones(1))


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(2)
    spec, params = random_net(rng)
    x = rng.standard_normal((3, spec.input_dim))
    _, cache = mlp_forward(spec, params, x)
    grads, gx = mlp_backward(spec, params, cache, np.zeros((3, spec.output_dim)))
    assert all(not g.any() for g in grads.values()) and not gx.any()


def test_linear_input_gradient_is_transpose_product():
    rng = np.random.default_rng(3)
    spec = MlpSpec(4, (), 3)
    params = {"W0": rng.standard_normal((4, 3)), "b0": rng.standard_normal(3)}
    g = rng.standard_normal(3)
    _, cache = mlp_forward(spec, params, rng.standard_normal(4))
    _, gx = mlp_backward(spec, params, cache, g)
    assert np.allclose(gx, params["W0"] @ g)


@pytest.mark.parametrize("act", ["linear", "sigmoid", "unit-normalize"])
def test_backward_matches_finite_differences(act):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        spec, params = random_net(rng, act)
        x = rng.standard_normal((3, spec.input_dim))
        up = rng.standard_normal((3, spec.output_dim))
        out, cache = mlp_forward(spec, params, x)
        grads, gx = mlp_backward(spec, params, cache, up)

        def loss():
            return float(np.sum(mlp_forward(spec, params, x, cache=False)[0] * up))

        worst = max(worst, relative_error(grads, numeric_grads(loss, params)))
        xs = {"x": x}
        worst = max(worst, relative_error({"x": gx}, numeric_grads(
            lambda: float(np.sum(mlp_forward(spec, params, xs["x"], cache=False)[0] * up)), xs)))
    assert worst < 1e-4


def test_adam_zero_grads_from_fresh_state_leave_params():
    params = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(params, {"w": np.zeros(2)}, AdamState.fresh(params, 1e-3))
    assert np.array_equal(new["w"], params["w"]) and state.step_count == 1


def test_adam_first_step_hand_unrolled():
    alpha, eps = 1e-3, 1e-8
    params = {"w": np.array([0.5])}
    new, _ = adam_step(params, {"w": np.array([1.0])}, AdamState.fresh(params, alpha))
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    assert new["w"][0] == pytest.approx(0.5 - alpha * m_hat / (np.sqrt(v_hat) + eps), abs=1e-15)
    assert new["w"][0] == pytest.approx(0.5 - alpha, abs=1e-10)


def test_adam_is_pure_and_deterministic():
    rng = np.random.default_rng(5)
    params = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal(2)}
    grads = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal(2)}
    state = AdamState.fresh(params)
    before = {k: v.copy() for k, v in params.items()}
    p1, s1 = adam_step(params, grads, state)
    p2, s2 = adam_step(params, grads, state)
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)
    assert all(np.array_equal(params[k], before[k]) for k in params)
    assert state.step_count == 0 and s1.step_count == s2.step_count == 1


def test_adam_rejects_non_finite_with_name():
    params = {"layer": np.ones(2)}
    with pytest.raises(OptimizationError, match="layer"):
        adam_step(params, {"layer": np.array([np.inf, 0.0])}, AdamState.fresh(params))


def test_logprob_values():
    head = GaussianHead.isotropic(1, 1.0)
    assert gaussian_logprob(head, np.array([0.3]), np.array([0.3])) == pytest.approx(-0.918939, abs=1e-6)
    assert gaussian_logprob(head, np.array([0.0]), np.array([1.0])) == pytest.approx(
        -0.5 - 0.5 * np.log(2 * np.pi), abs=1e-12)


def test_density_integrates_to_one():
    rng = np.random.default_rng(6)
    for _ in range(10):
        var = float(rng.uniform(0.05, 2.0))
        mu = float(rng.normal())
        head = GaussianHead.isotropic(1, var)
        grid = np.linspace(mu - 12 * np.sqrt(var), mu + 12 * np.sqrt(var), 20001)
        dens = np.exp(gaussian_logprob(head, np.full((len(grid), 1), mu), grid[:, None]))
        assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)


def test_kl_values():
    assert gaussian_kl(np.array([0.2, 0.1]), np.array([0.2, 0.1]), 0.3) == 0.0
    assert gaussian_kl(np.array([0.1]), np.array([0.0]), 0.0025) == pytest.approx(2.0, abs=1e-12)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(7)
    var = np.array([0.3, 0.5, 0.2])
    m1, m2 = rng.standard_normal(3), rng.standard_normal(3)
    head = GaussianHead(3, tuple(var))
    x = m1 + np.sqrt(var) * rng.standard_normal((200_000, 3))
    samples = gaussian_logprob(head, np.broadcast_to(m1, x.shape), x) - gaussian_logprob(
        head, np.broadcast_to(m2, x.shape), x)
    se = samples.std() / np.sqrt(len(samples))
    assert abs(samples.mean() - gaussian_kl(m1, m2, var)) < 3 * se


def test_kl_symmetric_nonnegative():
    rng = np.random.default_rng(8)
    for _ in range(20):
        a, b = rng.standard_normal(4), rng.standard_normal(4)
        assert gaussian_kl(a, b, 0.1) >= 0
        assert gaussian_kl(a, b, 0.1) == pytest.approx(gaussian_kl(b, a, 0.1))


def test_policy_output_layer_starts_small():
    pol = GaussianPolicy.create(MlpSpec(5, (16,), 3), 0.01, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((10, 5))
    assert np.max(np.abs(pol.mean(x))) < 0.05


def test_init_is_glorot_uniform():
    spec = MlpSpec(30, (20,), 10)
    p = init_params(spec, np.random.default_rng(0))
    assert np.max(np.abs(p["W0"])) <= np.sqrt(6 / 50)
    assert not p["b0"].any() and p["W0"].dtype == np.float32
