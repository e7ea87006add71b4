"""Deployment-time guidance of a frozen policy by DMD-MPC on a model.

At every true-environment step the planner warm-starts from the policy
rolled through the model (policy shift), takes one elite-weighted update
and hands back its first action ``g``. The emitted action is

    u = clip((1 - mix) * pi(x) + mix * g)

The policy is only ever called, never modified. Rollouts carry no terminal
value. If planning fails on the model the step falls back to ``pi(x)`` and a
warning is logged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .envs import Env, EnvModel
from .mpc import DmdMpc, MpcConfig, PlanningError

log = logging.getLogger(__name__)

MODEL_SOURCES = ("analytic_biased", "learned_ensemble")


@dataclass
class DemoLayerConfig:
    mix: float = 0.5
    mpc: MpcConfig = field(default_factory=lambda: MpcConfig(horizon=120, rollouts=90, shift="policy_shift"))
    model_source: str = "analytic_biased"

    def __post_init__(self) -> None:
        if not 0.0 <= self.mix <= 1.0:
            raise ValueError(f"mix must lie in [0, 1], got {self.mix}")
        if self.model_source not in MODEL_SOURCES:
            raise ValueError(f"model_source must be one of {MODEL_SOURCES}")
        if self.mpc.shift != "policy_shift":
            raise ValueError("the layer warm-starts from the policy; use shift='policy_shift'")


@dataclass
class GuidedStep:
    u_rl: np.ndarray
    g: np.ndarray
    u: np.ndarray
    fallback: bool


@dataclass
class GuidedEpisode:
    states: np.ndarray
    steps: list[GuidedStep]
    rewards: np.ndarray

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())


def biased_model(env: Env, length_bias: float = 1.2) -> EnvModel:
    """Analytic model of ``env`` with its pole length scaled by ``length_bias``."""
    params = env.physical_params()
    key = "length" if "length" in params else "l"
    return EnvModel(env.perturbed(**{key: params[key] * length_bias}))


def make_planner(env: Env, model, cfg: DemoLayerConfig) -> DmdMpc:
    return DmdMpc(model, env.cost, cfg.mpc, env.action_low, env.action_high)


def guided_action(policy, planner: DmdMpc, x_t: np.ndarray, mix: float, seed=None) -> GuidedStep:
    rng = np.random.default_rng(seed)
    u_rl = np.asarray(policy(x_t), dtype=np.float64).reshape(planner.action_low.shape)
    try:
        with np.errstate(over="ignore", invalid="ignore"):  # a diverged model is caught below
            eta, _, _ = planner.plan(x_t, policy, rng)
        g = eta.mean[0]
        if not np.all(np.isfinite(g)):
            raise PlanningError("non-finite planned action")
    except (PlanningError, FloatingPointError) as exc:
        log.warning("model planning failed, using the policy action: %s", exc)
        return GuidedStep(u_rl, u_rl.copy(), np.clip(u_rl, planner.action_low, planner.action_high), True)
    u = (1.0 - mix) * u_rl + mix * g
    return GuidedStep(u_rl, g, np.clip(u, planner.action_low, planner.action_high), False)


def run_guided_episode(policy, env: Env, model, cfg: DemoLayerConfig, seed=None, start: np.ndarray | None = None) -> GuidedEpisode:
    """One episode in the true ``env`` where every action passes through the layer.

    ``start`` overrides the reset state; otherwise ``env.reset`` draws it from ``seed``.
    """
    ss = np.random.SeedSequence(seed)
    reset_seed, plan_seed = ss.spawn(2)
    state = env.reset(reset_seed) if start is None else None
    x = np.asarray(start, dtype=np.float64) if start is not None else state.x
    planner = make_planner(env, model, cfg)
    rng = np.random.default_rng(plan_seed)
    states, steps, rewards = [x], [], []
    for _ in range(env.episode_length):
        if cfg.mix == 0.0:  # planning cannot change the action; skip it
            u_rl = np.asarray(policy(x), dtype=np.float64).reshape(env.action_low.shape)
            step = GuidedStep(u_rl, u_rl.copy(), env.clip_action(u_rl), False)
        else:
            step = guided_action(policy, planner, x, cfg.mix, rng)
        rewards.append(float(env.reward(x, step.u)))
        x = env.dynamics(x, step.u)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"{env.name}: non-finite state during guided episode")
        steps.append(step)
        states.append(x)
        if env.failed(x):
            break
    return GuidedEpisode(np.array(states), steps, np.array(rewards))


def swing_up_success(env: Env, states: np.ndarray, window: int = 50, tol: float = 0.2) -> bool:
    """Whether the pole stays within ``tol`` rad of upright over the last ``window`` states."""
    th = env.angle(states[-window:])
    return bool(np.all(np.abs(th) < tol))
