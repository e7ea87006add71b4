import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from demorl.ars import LinearPolicy
from demorl.envs import CartPoleSwingUp, EnvModel, Pendulum
from demorl.mpc import (
    DmdMpc, GaussianControlSequence, MpcConfig, PlanningError, RolloutBatch, cem_update, elite_indices,
    kl_gaussian, left_shift, mppi_update, sample_rollouts, sequence_cost, shift, total_cost,
)


class Integrator:
    """x' = x + u, a model that is trivial to reason about."""

    def step(self, x, u, rng=None):
        return np.asarray(x) + np.asarray(u)


class Exploding:
    def step(self, x, u, rng=None):
        return np.asarray(x) * 1e4 + 1.0


def seq(mean, sigma=1.0):
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    return GaussianControlSequence(mean, np.full(mean.shape[1], sigma))


def random_batch(rng, M, H, m, n=1):
    return RolloutBatch(rng.normal(size=(M, H + 1, n)), rng.normal(size=(M, H, m)), rng.normal(size=M) * 3)


def brute_force_cem(mu_tilde, controls, costs, alpha, p, lam):
    M = len(costs)
    k = max(1, math.ceil(p * M - 1e-9))
    order = sorted(range(M), key=lambda i: (costs[i], i))[:k]
    cmin = min(costs[i] for i in order)
    ws = [math.exp(-(costs[i] - cmin) / lam) for i in order]
    total = sum(ws)
    g = sum(w / total * controls[i] for w, i in zip(ws, order))
    return (1 - alpha) * mu_tilde + alpha * g


def brute_force_mppi(controls, costs, lam):
    ws = [math.exp(-c / lam) for c in costs]
    total = sum(ws)
    return sum(w / total * u for w, u in zip(ws, controls))


# -- total cost ---------------------------------------------------------------

def test_total_cost_unit_costs():
    states, controls = np.zeros((3, 1)), np.zeros((2, 1))
    assert total_cost(states, controls, lambda x, u: np.ones(x.shape[:-1]), None, 1.0, 2) == 2.0


def test_total_cost_with_terminal():
    states, controls = np.zeros((3, 1)), np.zeros((2, 1))
    c = total_cost(states, controls, lambda x, u: np.ones(x.shape[:-1]), lambda x: -4.0 * np.ones(x.shape[:-1]), 0.5, 2)
    assert c == 2.5


def test_total_cost_matches_loop(rng):
    H, n, m, gamma = 7, 3, 2, 0.9
    states, controls = rng.normal(size=(H + 1, n)), rng.normal(size=(H, m))
    env = Pendulum()
    cost = lambda x, u: np.sum(x**2, -1) + np.sum(u**2, -1)
    value = lambda x: np.sum(np.sin(x), -1)
    expected = 0.0
    for h in range(H):
        expected += gamma**h * (sum(states[h] ** 2) + sum(controls[h] ** 2))
    expected -= gamma**H * sum(np.sin(states[H]))
    assert total_cost(states, controls, cost, value, gamma) == pytest.approx(expected, abs=1e-12)


def test_total_cost_horizon_zero_is_minus_value():
    x0 = np.array([[0.3, 0.1]])
    assert total_cost(x0, np.zeros((0, 1)), lambda x, u: np.zeros(x.shape[:-1]), lambda x: x[..., 0] * 5, 0.9) == -1.5


def test_total_cost_rejects_nonfinite():
    with pytest.raises(PlanningError):
        total_cost(np.zeros((2, 1)), np.zeros((1, 1)), lambda x, u: np.full(x.shape[:-1], np.nan))


# -- shifts -------------------------------------------------------------------

def test_left_shift_repeats_last():
    out = shift(seq([[1.0], [2.0], [3.0]]), None, np.zeros(1), "left_shift")
    np.testing.assert_array_equal(out.mean, [[2.0], [3.0], [3.0]])


def test_policy_shift_constant_policy():
    out = shift(seq(np.zeros((4, 1))), lambda x: np.full(1, 0.7), np.zeros(2), "policy_shift", Integrator())
    np.testing.assert_array_equal(out.mean, np.full((4, 1), 0.7))


def test_policy_shift_matches_step_by_step_oracle():
    env = CartPoleSwingUp()
    model = EnvModel(env.perturbed(length=0.6))
    policy = LinearPolicy(np.array([[1.5, 2.0, -3.0, 8.0, 1.0]]), env.action_low, env.action_high, normalize=False)
    x = np.array([0.1, 0.0, np.cos(2.8), np.sin(2.8), 0.2])
    out = shift(seq(np.zeros((25, 1))), policy, x, "policy_shift", model, action_low=env.action_low, action_high=env.action_high)
    expect = []
    for _ in range(25):
        u = policy(x)
        expect.append(u)
        x = env.perturbed(length=0.6).dynamics(x, u)
    np.testing.assert_array_equal(out.mean, np.array(expect))


def test_policy_shift_needs_model_and_policy():
    with pytest.raises(PlanningError, match="model"):
        shift(seq(np.zeros((2, 1))), lambda x: x, np.zeros(1), "policy_shift")
    with pytest.raises(PlanningError, match="policy"):
        shift(seq(np.zeros((2, 1))), None, np.zeros(1), "policy_shift", Integrator())


# -- sampling -----------------------------------------------------------------

def test_degenerate_covariance_reproduces_mean():
    eta = seq(np.array([[0.5], [-1.0], [2.0]]), sigma=1e-12)
    batch = sample_rollouts(Integrator(), np.zeros(1), eta, 20, seed=0)
    assert np.max(np.abs(batch.controls - eta.mean[None])) < 1e-5


def test_sampling_is_seeded():
    eta = seq(np.zeros((4, 2)))
    a = sample_rollouts(Integrator(), np.zeros(2), eta, 10, seed=3, cost_fn=lambda x, u: np.sum(x**2, -1))
    b = sample_rollouts(Integrator(), np.zeros(2), eta, 10, seed=3, cost_fn=lambda x, u: np.sum(x**2, -1))
    np.testing.assert_array_equal(a.controls, b.controls)
    np.testing.assert_array_equal(a.costs, b.costs)


def test_sample_mean_within_clt_band():
    M = 100_000
    mean = np.array([[0.3, -1.0], [2.0, 0.0]])
    sigma = np.array([0.25, 4.0])
    batch = sample_rollouts(Integrator(), np.zeros(2), GaussianControlSequence(mean, sigma), M, seed=8)
    err = np.abs(batch.controls.mean(axis=0) - mean)
    assert np.all(err < 4 * np.sqrt(sigma) / np.sqrt(M))


def test_divergent_rollouts_get_infinite_cost():
    batch = sample_rollouts(Exploding(), np.ones(1), seq(np.zeros((3, 1))), 5, seed=0, cost_fn=lambda x, u: x[..., 0])
    assert np.all(np.isinf(batch.costs))


def test_controls_clipped_to_bounds():
    batch = sample_rollouts(Integrator(), np.zeros(1), seq(np.zeros((5, 1)), sigma=100.0), 50, seed=0,
                            action_low=np.array([-1.0]), action_high=np.array([1.0]))
    assert np.all(np.abs(batch.controls) <= 1.0)


# -- CEM ----------------------------------------------------------------------

def test_cem_alpha_zero_keeps_warm_start(rng):
    eta = seq(rng.normal(size=(3, 2)))
    out = cem_update(eta, random_batch(rng, 10, 3, 2), 0.0, 0.3)
    np.testing.assert_array_equal(out.mean, eta.mean)


def test_cem_literal_weighting_arithmetic():
    batch = RolloutBatch(np.zeros((2, 2, 1)), np.array([[[2.0]], [[4.0]]]), np.array([1.0, 2.0]))
    out = cem_update(seq([[0.0]]), batch, 0.5, 1.0, weighting="literal")
    assert out.mean[0, 0] == pytest.approx(5.0 / 3.0, abs=1e-15)


def test_elite_selection_example():
    assert set(elite_indices(np.array([3.0, 1.0, 2.0, 4.0, 0.0, 5.0]), 1 / 3)) == {4, 1}


def test_cem_exp_matches_brute_force(rng):
    for _ in range(50):
        M, H, m = int(rng.integers(2, 21)), int(rng.integers(1, 6)), int(rng.integers(1, 3))
        batch = random_batch(rng, M, H, m)
        eta = seq(rng.normal(size=(H, m)))
        alpha, p, lam = rng.uniform(), rng.uniform(0.05, 1.0), rng.uniform(0.1, 5)
        out = cem_update(eta, batch, alpha, p, lam)
        ref = brute_force_cem(eta.mean, list(batch.controls), list(batch.costs), alpha, p, lam)
        np.testing.assert_allclose(out.mean, ref, rtol=0, atol=1e-10)


def test_cem_errors():
    batch = RolloutBatch(np.zeros((2, 2, 1)), np.ones((2, 1, 1)), np.array([np.inf, np.inf]))
    with pytest.raises(PlanningError):
        cem_update(seq([[0.0]]), batch, 1.0, 0.5)
    mixed = RolloutBatch(np.zeros((2, 2, 1)), np.ones((2, 1, 1)), np.array([-1.0, 2.0]))
    with pytest.raises(PlanningError, match="exp"):
        cem_update(seq([[0.0]]), mixed, 1.0, 1.0, weighting="literal")
    zero = RolloutBatch(np.zeros((2, 2, 1)), np.ones((2, 1, 1)), np.array([0.0, 0.0]))
    with pytest.raises(PlanningError):
        cem_update(seq([[0.0]]), zero, 1.0, 1.0, weighting="literal")


@given(st.integers(0, 2**31), st.floats(0.0, 1.0), st.floats(0.01, 1.0))
def test_cem_output_lies_between_warm_start_and_target(seed, alpha, p):
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, 12, 3, 2)
    eta = seq(rng.normal(size=(3, 2)))
    g = cem_update(eta, batch, 1.0, p).mean
    mu = cem_update(eta, batch, alpha, p).mean
    lo, hi = np.minimum(eta.mean, g), np.maximum(eta.mean, g)
    assert np.all(mu >= lo - 1e-12) and np.all(mu <= hi + 1e-12)


@given(st.integers(0, 2**31), st.floats(0.05, 1.0))
def test_adding_a_worse_rollout_keeps_elites(seed, p):
    rng = np.random.default_rng(seed)
    costs = rng.normal(size=int(rng.integers(2, 30)))
    k = len(elite_indices(costs, p))
    worse = np.append(costs, costs.max() + 1.0)
    # the elite count can grow with M; the old elites must stay the best ones
    assert list(elite_indices(worse, p)[:k]) == list(elite_indices(costs, p))
    assert len(costs) not in elite_indices(worse, p)[: max(k, 1)]


# -- MPPI ---------------------------------------------------------------------

def test_mppi_weights_example():
    batch = RolloutBatch(np.zeros((2, 2, 1)), np.array([[[0.0]], [[3.0]]]), np.array([0.0, math.log(2.0)]))
    assert mppi_update(seq([[0.0]]), batch, 1.0).mean[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_mppi_large_temperature_is_plain_mean(rng):
    batch = random_batch(rng, 9, 2, 1)
    out = mppi_update(seq(np.zeros((2, 1))), batch, 1e9)
    np.testing.assert_allclose(out.mean, batch.controls.mean(axis=0), atol=1e-6)


def test_mppi_matches_brute_force(rng):
    for _ in range(50):
        M, H = int(rng.integers(1, 21)), int(rng.integers(1, 6))
        batch = random_batch(rng, M, H, 1)
        lam = rng.uniform(0.1, 5)
        ref = brute_force_mppi(list(batch.controls), list(batch.costs), lam)
        np.testing.assert_allclose(mppi_update(seq(np.zeros((H, 1))), batch, lam).mean, ref, rtol=0, atol=1e-10)


def test_mppi_is_cem_with_all_elites_and_full_step(rng):
    for _ in range(50):
        batch = random_batch(rng, int(rng.integers(1, 21)), 4, 2)
        eta = seq(rng.normal(size=(4, 2)))
        lam = rng.uniform(0.1, 3)
        a = mppi_update(eta, batch, lam).mean
        b = cem_update(eta, batch, 1.0, 1.0, lam, "exp").mean
        np.testing.assert_array_equal(a, b)


@given(st.integers(0, 2**31), st.floats(-1e3, 1e3))
def test_mppi_ignores_constant_cost_offset(seed, offset):
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, 10, 2, 1)
    shifted = RolloutBatch(batch.states, batch.controls, batch.costs + offset)
    np.testing.assert_allclose(mppi_update(seq(np.zeros((2, 1))), batch, 0.7).mean,
                               mppi_update(seq(np.zeros((2, 1))), shifted, 0.7).mean, atol=1e-10)


def test_mppi_all_infinite_rejected():
    batch = RolloutBatch(np.zeros((2, 2, 1)), np.ones((2, 1, 1)), np.array([np.inf, np.inf]))
    with pytest.raises(PlanningError):
        mppi_update(seq([[0.0]]), batch, 1.0)


# -- KL -----------------------------------------------------------------------

def test_kl_examples():
    assert kl_gaussian([1.0, 2.0], [1.0, 2.0], [0.3, 0.3]) == 0.0
    assert kl_gaussian([0.0], [2.0], [1.0]) == 2.0


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.floats(0.01, 10))
def test_kl_symmetric_and_nonnegative(a, s):
    b = np.asarray(a)[::-1]
    assert kl_gaussian(a, b, s) == pytest.approx(kl_gaussian(b, a, s))
    assert kl_gaussian(a, b, s) >= 0.0


# -- driver -------------------------------------------------------------------

def _pendulum_planner(horizon=30, rollouts=64, **kw):
    env = Pendulum()
    cfg = MpcConfig(horizon=horizon, rollouts=rollouts, shift="left_shift", discount=1.0, **kw)
    return env, DmdMpc(EnvModel(env), env.cost, cfg, env.action_low, env.action_high)


def test_plan_step_is_seeded():
    env, planner = _pendulum_planner(horizon=10, rollouts=16)
    x = env.reset(0).x
    a = planner.plan(x, seed=5)[0].mean
    planner.reset()
    b = planner.plan(x, seed=5)[0].mean
    np.testing.assert_array_equal(a, b)


def test_update_improves_planned_cost_with_exact_model():
    env, planner = _pendulum_planner(sigma_scale=0.1)
    rng = np.random.default_rng(0)
    x = env.reset(0).x
    better = 0
    for _ in range(100):
        eta, eta_tilde, _ = planner.plan(x, seed=rng)
        c_new = sequence_cost(planner.model, x, eta.mean, env.cost, action_low=env.action_low, action_high=env.action_high)
        c_old = sequence_cost(planner.model, x, eta_tilde.mean, env.cost, action_low=env.action_low, action_high=env.action_high)
        better += c_new <= c_old
        x = env.dynamics(x, eta.mean[0])
    assert better >= 95


def test_config_validation():
    with pytest.raises(ValueError):
        MpcConfig(alpha=1.5)
    with pytest.raises(ValueError):
        MpcConfig(objective="cma")
    with pytest.raises(ValueError):
        GaussianControlSequence(np.zeros((2, 1)), np.array([0.0]))
