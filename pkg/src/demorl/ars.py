"""Augmented random search for linear state-feedback policies.

A policy acts as ``u = clip(theta @ ((x - mean) / sqrt(var)))``. One
iteration perturbs ``theta`` along ``N`` Gaussian directions, evaluates each
direction at ``theta +- nu * delta``, keeps the ``b`` directions with the
largest ``max(r+, r-)`` and steps

    theta += step / (b * sigma_R) * sum_k (r+_k - r-_k) * delta_k

with ``sigma_R`` the std of the ``2b`` returns that were used. State
statistics stay frozen while an iteration's episodes run and are refreshed
from the visited states afterwards.

Checkpoint text format, one item per line::

    linear-policy v1
    shape <m> <n>
    normalize <0|1>
    count <k>
    theta          followed by m lines of n floats
    mean           followed by 1 line of n floats
    var            followed by 1 line of n floats
    action_low     followed by 1 line of m floats
    action_high    followed by 1 line of m floats
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import Env

VAR_FLOOR = 1e-8


@dataclass
class ArsConfig:
    step_size: float = 0.02
    noise: float = 0.03
    directions: int = 8
    top: int = 4
    accelerated: bool = False
    beta: float = 0.5
    mix: float = 0.7

    def __post_init__(self) -> None:
        if not 1 <= self.top <= self.directions:
            raise ValueError(f"need 1 <= top <= directions, got top={self.top}, directions={self.directions}")
        if self.noise <= 0:
            raise ValueError("noise must be positive")
        if not 0.0 <= self.mix <= 1.0:
            raise ValueError("mix must lie in [0, 1]")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")


@dataclass
class LinearPolicy:
    theta: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray
    normalize: bool = True
    mean: np.ndarray = None
    var: np.ndarray = None
    count: int = 0
    _m2: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.theta = np.array(self.theta, dtype=np.float64, ndmin=2)
        n = self.theta.shape[1]
        self.action_low = np.asarray(self.action_low, dtype=np.float64).reshape(-1)
        self.action_high = np.asarray(self.action_high, dtype=np.float64).reshape(-1)
        self.mean = np.zeros(n) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.var = np.ones(n) if self.var is None else np.asarray(self.var, dtype=np.float64)
        if self._m2 is None:
            self._m2 = self.var * self.count

    @classmethod
    def zeros(cls, state_dim: int, action_low, action_high, normalize: bool = True) -> "LinearPolicy":
        m = np.size(action_low)
        return cls(np.zeros((m, state_dim)), action_low, action_high, normalize)

    @property
    def shape(self) -> tuple[int, int]:
        return self.theta.shape

    def normalized(self, x: np.ndarray) -> np.ndarray:
        if not self.normalize:
            return np.asarray(x, dtype=np.float64)
        return (x - self.mean) / np.sqrt(np.maximum(self.var, VAR_FLOOR))

    def update_stats(self, states: np.ndarray) -> None:
        """Merge a batch of visited states into the running mean and variance."""
        states = np.asarray(states, dtype=np.float64).reshape(-1, self.theta.shape[1])
        k = len(states)
        if k == 0:
            return
        b_mean = states.mean(axis=0)
        b_m2 = ((states - b_mean) ** 2).sum(axis=0)
        total = self.count + k
        d = b_mean - self.mean
        self.mean = self.mean + d * k / total
        self._m2 = self._m2 + b_m2 + d * d * self.count * k / total
        self.count = total
        self.var = self._m2 / total

    def copy(self) -> "LinearPolicy":
        return LinearPolicy(
            self.theta.copy(), self.action_low.copy(), self.action_high.copy(), self.normalize,
            self.mean.copy(), self.var.copy(), self.count, self._m2.copy(),
        )

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return policy_act(self, x)

    def save(self, path: str | Path) -> None:
        m, n = self.theta.shape

        def row(v):
            return " ".join(repr(float(a)) for a in v)

        lines = ["linear-policy v1", f"shape {m} {n}", f"normalize {int(self.normalize)}", f"count {self.count}", "theta"]
        lines += [row(r) for r in self.theta]
        for name in ("mean", "var", "action_low", "action_high"):
            lines += [name, row(getattr(self, name))]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LinearPolicy":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != "linear-policy v1":
            raise ValueError(f"{path}: not a linear policy checkpoint")
        m, n = (int(v) for v in lines[1].split()[1:])
        normalize = lines[2].split()[1] == "1"
        count = int(lines[3].split()[1])

        def floats(s):
            return np.array([float(v) for v in s.split()])

        theta = np.stack([floats(lines[5 + i]) for i in range(m)]).reshape(m, n)
        rest = {}
        at = 5 + m
        for name in ("mean", "var", "action_low", "action_high"):
            if lines[at] != name:
                raise ValueError(f"{path}: expected {name!r} at line {at + 1}")
            rest[name] = floats(lines[at + 1])
            at += 2
        return cls(theta, rest["action_low"], rest["action_high"], normalize, rest["mean"], rest["var"], count)


def policy_act(policy: LinearPolicy, x: np.ndarray) -> np.ndarray:
    """``theta @ normalized(x)`` clipped to the action box; ``x`` may be batched."""
    z = policy.normalized(x)
    u = z @ policy.theta.T
    return np.clip(u, policy.action_low, policy.action_high)


def top_directions(r_plus: np.ndarray, r_minus: np.ndarray, b: int) -> np.ndarray:
    """Indices of the ``b`` largest ``max(r+, r-)``; equal scores go to the lower index."""
    score = np.maximum(r_plus, r_minus)
    return np.argsort(-score, kind="stable")[:b]


def ars_update(
    theta: np.ndarray,
    deltas: np.ndarray,
    r_plus: np.ndarray,
    r_minus: np.ndarray,
    step_size: float,
    sigma_r: float | None = None,
) -> tuple[np.ndarray, bool]:
    """Apply the step over the given (already selected) directions.

    Returns the new ``theta`` and whether scaling was skipped because the
    returns had zero spread.
    """
    r_plus = np.asarray(r_plus, dtype=np.float64)
    r_minus = np.asarray(r_minus, dtype=np.float64)
    b = len(r_plus)
    if sigma_r is None:
        sigma_r = float(np.std(np.concatenate([r_plus, r_minus])))
    skipped = sigma_r == 0.0
    if skipped:
        sigma_r = 1.0
    step = np.tensordot(r_plus - r_minus, np.asarray(deltas, dtype=np.float64), axes=1)
    return theta + step_size / (b * sigma_r) * step, skipped


def ars_search_step(theta: np.ndarray, objective, cfg: ArsConfig, seed=None) -> tuple[np.ndarray, dict]:
    """One iteration against a plain objective ``theta -> return``."""
    rng = np.random.default_rng(seed)
    theta = np.asarray(theta, dtype=np.float64)
    deltas = rng.standard_normal((cfg.directions, *theta.shape))
    r_plus = np.array([objective(theta + cfg.noise * d) for d in deltas])
    r_minus = np.array([objective(theta - cfg.noise * d) for d in deltas])
    keep = top_directions(r_plus, r_minus, cfg.top)
    new, skipped = ars_update(theta, deltas[keep], r_plus[keep], r_minus[keep], cfg.step_size)
    return new, {"r_plus": r_plus, "r_minus": r_minus, "used": keep, "sigma_skipped": skipped}


def rollout_returns(policy: LinearPolicy, thetas: np.ndarray, env: Env, starts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run one episode per row of ``thetas`` (shape ``(k, m, n)``) in lockstep.

    Normalization uses the policy's current statistics. An episode stops
    contributing once ``env.failed`` fires. Returns the episode returns and
    every visited state.
    """
    x = np.array(starts, dtype=np.float64)
    total = np.zeros(len(x))
    alive = np.ones(len(x), dtype=bool)
    visited = []
    for _ in range(env.episode_length):
        visited.append(x[alive])
        u = np.einsum("kmn,kn->km", thetas, policy.normalized(x))
        u = np.clip(u, policy.action_low, policy.action_high)
        total += np.where(alive, env.reward(x, u), 0.0)
        x = env.dynamics(x, u)
        alive &= ~env.failed(x)
        if not alive.any():
            break
    return total, np.concatenate(visited)


def ars_iteration(policy: LinearPolicy, env: Env, cfg: ArsConfig, seed=None, history: list | None = None) -> tuple[LinearPolicy, dict]:
    """One ARS iteration on ``env``; returns a new policy and a report.

    Each ``+-`` pair starts from the same initial state. When
    ``cfg.accelerated`` is set and a ``history`` list is supplied, the fresh
    iterate is blended with the running average of ``history`` and the
    result is appended to it.
    """
    rng = np.random.default_rng(seed)
    theta = policy.theta
    N = cfg.directions
    deltas = rng.standard_normal((N, *theta.shape))
    starts = np.stack([env.reset(int(rng.integers(2**31))).x for _ in range(N)])
    thetas = np.concatenate([theta + cfg.noise * deltas, theta - cfg.noise * deltas])
    returns, visited = rollout_returns(policy, thetas, env, np.concatenate([starts, starts]))
    r_plus, r_minus = returns[:N], returns[N:]
    keep = top_directions(r_plus, r_minus, cfg.top)
    new_theta, skipped = ars_update(theta, deltas[keep], r_plus[keep], r_minus[keep], cfg.step_size)

    out = policy.copy()
    if cfg.accelerated and history is not None:
        if not history:
            history.append(theta.copy())
        new_theta = accelerated_step([*history, new_theta], cfg)
        history.append(new_theta.copy())
    out.theta = new_theta
    if out.normalize:
        out.update_stats(visited)
    report = {
        "mean_return": float(returns.mean()),
        "max_return": float(returns.max()),
        "r_plus": r_plus,
        "r_minus": r_minus,
        "used": keep,
        "sigma_skipped": skipped,
    }
    return out, report


def accelerated_step(history: list[np.ndarray], cfg: ArsConfig) -> np.ndarray:
    """Blend the newest iterate ``history[-1]`` with a running average of the rest.

    The average weights the ``i``-th most recent earlier iterate by
    ``(1 - beta) ** i`` (``i = 0`` is the one just before the newest) and
    normalizes the weights to sum to one. With only one iterate the average
    is that iterate.
    """
    if not history:
        raise ValueError("history must not be empty")
    fresh = np.asarray(history[-1], dtype=np.float64)
    past = [np.asarray(h, dtype=np.float64) for h in reversed(history[:-1])]
    if not past:
        return fresh.copy()
    w = (1.0 - cfg.beta) ** np.arange(len(past))
    w /= w.sum()
    average = np.tensordot(w, np.stack(past), axes=1)
    return cfg.mix * fresh + (1.0 - cfg.mix) * average


def evaluate_policy(policy: LinearPolicy, env: Env, episodes: int, seed=None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    starts = np.stack([env.reset(int(rng.integers(2**31))).x for _ in range(episodes)])
    thetas = np.broadcast_to(policy.theta, (episodes, *policy.theta.shape))
    returns, _ = rollout_returns(policy, thetas, env, starts)
    return returns


def train_ars(policy: LinearPolicy, env: Env, cfg: ArsConfig, iterations: int, seed=None, callback=None) -> tuple[LinearPolicy, list[dict]]:
    """Run ``iterations`` ARS iterations. ``callback(i, policy, report)`` may return True to stop."""
    ss = np.random.SeedSequence(seed)
    history: list[np.ndarray] = []
    reports = []
    for i, child in enumerate(ss.spawn(iterations)):
        policy, report = ars_iteration(policy, env, cfg, np.random.default_rng(child), history)
        reports.append(report)
        if callback is not None and callback(i, policy, report):
            break
    return policy, reports
