import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from demorl.ars import LinearPolicy, rollout_returns
from demorl.demo_layer import (
    DemoLayerConfig, biased_model, guided_action, make_planner, run_guided_episode, swing_up_success,
)
from demorl.envs import CartPoleSwingUp, EnvModel
from demorl.mpc import MpcConfig


def small_cfg(mix, horizon=15, rollouts=16):
    return DemoLayerConfig(mix, MpcConfig(horizon=horizon, rollouts=rollouts, shift="policy_shift", discount=0.99))


@pytest.fixture
def env():
    return CartPoleSwingUp(episode_length=40)


@pytest.fixture
def policy(env):
    return LinearPolicy(np.array([[0.5, 1.0, -2.0, 4.0, 0.8]]), env.action_low, env.action_high, normalize=False)


def state(th=2.5):
    return np.array([0.1, -0.2, np.cos(th), np.sin(th), 0.3])


def test_mix_zero_is_the_policy_action(env, policy):
    planner = make_planner(env, biased_model(env), small_cfg(0.0))
    step = guided_action(policy, planner, state(), 0.0, seed=1)
    np.testing.assert_array_equal(step.u, policy(state()))


def test_mix_one_is_the_planner_action(env, policy):
    planner = make_planner(env, biased_model(env), small_cfg(1.0))
    step = guided_action(policy, planner, state(), 1.0, seed=4)
    eta, _, _ = make_planner(env, biased_model(env), small_cfg(1.0)).plan(state(), policy, np.random.default_rng(4))
    np.testing.assert_array_equal(step.u, eta.mean[0])


@settings(max_examples=15)
@given(st.floats(0.0, 1.0), st.integers(0, 1000), st.floats(-np.pi, np.pi))
def test_action_lies_between_endpoints(mix, seed, th):
    env = CartPoleSwingUp()
    policy = LinearPolicy(np.array([[0.5, 1.0, -2.0, 4.0, 0.8]]), env.action_low, env.action_high, normalize=False)
    planner = make_planner(env, biased_model(env), small_cfg(mix, 8, 8))
    step = guided_action(policy, planner, state(th), mix, seed)
    lo, hi = np.minimum(step.u_rl, step.g), np.maximum(step.u_rl, step.g)
    assert np.all(step.u >= lo - 1e-12) and np.all(step.u <= hi + 1e-12)


def test_mix_zero_episode_matches_plain_policy(env, policy):
    ep = run_guided_episode(policy, env, biased_model(env), small_cfg(0.0), seed=0, start=state())
    plain, _ = rollout_returns(policy, policy.theta[None], env, state()[None])
    assert ep.total_return == pytest.approx(plain[0], abs=1e-12)


def test_episode_is_seeded_and_bounded(env, policy):
    a = run_guided_episode(policy, env, biased_model(env), small_cfg(0.5), seed=3)
    b = run_guided_episode(policy, env, biased_model(env), small_cfg(0.5), seed=3)
    np.testing.assert_array_equal(a.states, b.states)
    us = np.array([s.u for s in a.steps])
    assert np.all(us >= env.action_low) and np.all(us <= env.action_high)
    assert len(a.steps) == env.episode_length


def test_policy_is_never_modified(env):
    policy = LinearPolicy(np.array([[0.5, 1.0, -2.0, 4.0, 0.8]]), env.action_low, env.action_high, normalize=True)
    policy.update_stats(np.random.default_rng(0).normal(size=(30, 5)))
    before = [getattr(policy, k).tobytes() for k in ("theta", "mean", "var", "_m2")]
    run_guided_episode(policy, env, biased_model(env), small_cfg(0.7), seed=2)
    assert before == [getattr(policy, k).tobytes() for k in ("theta", "mean", "var", "_m2")]
    assert policy.count == 30


def test_exact_model_full_mix_is_plain_planning(env, policy):
    cfg = small_cfg(1.0)
    ep = run_guided_episode(policy, env, EnvModel(env), cfg, seed=9, start=state())
    plan_seed = np.random.SeedSequence(9).spawn(2)[1]
    rng = np.random.default_rng(plan_seed)
    planner = make_planner(env, EnvModel(env), cfg)
    x = state()
    for step in ep.steps:
        eta, _, _ = planner.plan(x, policy, rng)
        np.testing.assert_array_equal(step.u, eta.mean[0])
        x = env.dynamics(x, eta.mean[0])


class Diverging:
    def step(self, x, u, rng=None):
        return np.full_like(np.asarray(x, dtype=float), np.inf)


def test_model_divergence_falls_back_with_warning(env, policy, caplog):
    planner = make_planner(env, Diverging(), small_cfg(0.5))
    with caplog.at_level(logging.WARNING, logger="demorl.demo_layer"):
        step = guided_action(policy, planner, state(), 0.5, seed=0)
    assert step.fallback
    np.testing.assert_array_equal(step.u, policy(state()))
    assert "falling back" in caplog.text or "using the policy action" in caplog.text


def test_biased_model_scales_pole_length(env):
    assert biased_model(env, 1.2).env.length == pytest.approx(1.2 * env.length)


def test_swing_up_success_window():
    env = CartPoleSwingUp()
    upright = np.tile(state(0.05), (60, 1))
    assert swing_up_success(env, upright)
    assert not swing_up_success(env, np.vstack([upright, state(0.5)[None]]))


def test_config_validation():
    with pytest.raises(ValueError):
        DemoLayerConfig(mix=1.5)
    with pytest.raises(ValueError):
        DemoLayerConfig(mpc=MpcConfig(shift="left_shift"))
    with pytest.raises(ValueError):
        DemoLayerConfig(model_source="oracle")
