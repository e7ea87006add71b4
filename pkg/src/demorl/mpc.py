"""Dynamic mirror descent MPC over fixed-covariance Gaussian control sequences.

A plan step takes a warm-start distribution (the shifted previous plan or
the outer policy rolled through the model), samples ``M`` perturbed control
sequences, scores them by their discounted ``H``-step cost and moves the
mean toward a weighted average of the sampled controls::

    mu = (1 - alpha) * mu_tilde + alpha * g

For CEM, ``g`` averages the lowest-cost ``ceil(p M)`` rollouts; for MPPI it
is the softmax(-C / lambda) average of all rollouts with ``alpha = 1``.
With a fixed diagonal covariance the KL proximal term reduces to a scaled
squared distance between means, see :func:`kl_gaussian`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

CostFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
ValueFn = Callable[[np.ndarray], np.ndarray]
Policy = Callable[[np.ndarray], np.ndarray]


class PlanningError(RuntimeError):
    pass


class DynamicsModel(Protocol):
    def step(self, x: np.ndarray, u: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray: ...


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class GaussianControlSequence:
    mean: np.ndarray  # (H, m) expectation parameters
    sigma: np.ndarray  # (m,) diagonal covariance shared across the horizon

    def __post_init__(self) -> None:
        self.mean = np.atleast_2d(np.asarray(self.mean, dtype=np.float64))
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if self.mean.shape[1] != self.sigma.size:
            raise ValueError(f"mean shape {self.mean.shape} does not match sigma size {self.sigma.size}")
        if not np.all(self.sigma > 0):
            raise ValueError("covariance entries must be positive")

    @property
    def horizon(self) -> int:
        return self.mean.shape[0]

    @property
    def natural(self) -> np.ndarray:
        return self.mean / self.sigma


@dataclass
class MpcConfig:
    horizon: int = 15
    rollouts: int = 100
    alpha: float = 1.0
    elite_fraction: float = 0.1
    temperature: float = 1.0
    objective: str = "cem"
    shift: str = "policy_shift"
    discount: float = 0.99
    sigma_scale: float = 0.3
    weighting: str = "exp"
    blowup: float = 1e6

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.rollouts < 1:
            raise ValueError("horizon and rollouts must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.elite_fraction <= 1.0:
            raise ValueError(f"elite_fraction must lie in (0, 1], got {self.elite_fraction}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.objective not in ("cem", "mppi"):
            raise ValueError(f"objective must be 'cem' or 'mppi', got {self.objective!r}")
        if self.shift not in ("policy_shift", "left_shift"):
            raise ValueError(f"shift must be 'policy_shift' or 'left_shift', got {self.shift!r}")
        if self.weighting not in ("exp", "literal"):
            raise ValueError(f"weighting must be 'exp' or 'literal', got {self.weighting!r}")
        if n_elites(self.elite_fraction, self.rollouts) < 1:
            raise ValueError("elite_fraction * rollouts must be >= 1")

    def default_sigma(self, action_low, action_high) -> np.ndarray:
        return (self.sigma_scale * (np.asarray(action_high) - np.asarray(action_low))) ** 2


@dataclass
class RolloutBatch:
    states: np.ndarray  # (M, H+1, n)
    controls: np.ndarray  # (M, H, m)
    costs: np.ndarray  # (M,), +inf marks a diverged rollout

    def __len__(self) -> int:
        return len(self.costs)


def n_elites(p: float, m: int) -> int:
    return max(1, math.ceil(p * m - 1e-9))


def total_cost(
    states: np.ndarray,
    controls: np.ndarray,
    cost_fn: CostFn,
    terminal_value_fn: ValueFn | None = None,
    gamma: float = 1.0,
    horizon: int | None = None,
) -> np.ndarray | float:
    """Discounted H-step cost ``sum_h gamma^h c(x_h, u_h) - gamma^H V(x_H)``.

    Leading batch axes are allowed: ``states`` is ``(..., H+1, n)`` and
    ``controls`` ``(..., H, m)``. Without a value function the terminal cost
    is zero.
    """
    states = np.asarray(states, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    H = controls.shape[-2] if horizon is None else horizon
    if states.shape[-2] != H + 1 or controls.shape[-2] != H:
        raise ValueError(f"need H+1={H + 1} states and H={H} controls, got {states.shape} and {controls.shape}")
    disc = gamma ** np.arange(H)
    running = np.asarray(cost_fn(states[..., :H, :], controls), dtype=np.float64)
    out = running @ disc if H else np.zeros(states.shape[:-2])
    if terminal_value_fn is not None:
        out = out - gamma**H * np.asarray(terminal_value_fn(states[..., H, :]), dtype=np.float64).reshape(out.shape)
    if not np.all(np.isfinite(out)):
        raise PlanningError("non-finite trajectory cost")
    return float(out) if np.ndim(out) == 0 else out


def left_shift(mean: np.ndarray) -> np.ndarray:
    mean = np.asarray(mean)
    return np.concatenate([mean[1:], mean[-1:]], axis=0)


def policy_rollout(policy: Policy, model: DynamicsModel, x0: np.ndarray, horizon: int, rng, low=None, high=None) -> np.ndarray:
    """Means ``pi(x_h)`` along the model trajectory driven by the policy.

    ``x0`` may be a single state ``(n,)`` or a batch ``(B, n)``.
    """
    x = np.asarray(x0, dtype=np.float64)
    means = []
    for _ in range(horizon):
        mu = np.asarray(policy(x), dtype=np.float64)
        means.append(mu)
        u = mu if low is None else np.clip(mu, low, high)
        x = model.step(x, u, rng)
    return np.stack(means, axis=-2)


def shift(
    prev: GaussianControlSequence,
    policy: Policy | None,
    x_t: np.ndarray,
    mode: str,
    model: DynamicsModel | None = None,
    seed=None,
    action_low=None,
    action_high=None,
) -> GaussianControlSequence:
    """Warm-start distribution for this round.

    ``left_shift`` drops the first mean and repeats the last one.
    ``policy_shift`` rolls the policy through the model from ``x_t``.
    """
    if mode == "left_shift":
        return GaussianControlSequence(left_shift(prev.mean), prev.sigma.copy())
    if mode != "policy_shift":
        raise ValueError(f"unknown shift mode {mode!r}")
    if policy is None:
        raise PlanningError("policy_shift needs a policy")
    if model is None:
        raise PlanningError("policy_shift needs a dynamics model")
    means = policy_rollout(policy, model, x_t, prev.horizon, _rng(seed), action_low, action_high)
    return GaussianControlSequence(means.reshape(prev.mean.shape), prev.sigma.copy())


def simulate(model: DynamicsModel, x0: np.ndarray, controls: np.ndarray, rng, blowup: float = 1e6) -> tuple[np.ndarray, np.ndarray]:
    """Roll ``(R, H, m)`` control sequences from ``(R, n)`` starts.

    Returns states ``(R, H+1, n)`` and a mask of rollouts that left the
    ``blowup`` box or went non-finite. Diverged rows are frozen at zero.
    """
    R, H, _ = controls.shape
    x = np.array(x0, dtype=np.float64)
    states = np.empty((R, H + 1, x.shape[-1]))
    states[:, 0] = x
    bad = np.zeros(R, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for h in range(H):
            x = model.step(x, controls[:, h], rng)
            now_bad = ~np.all(np.isfinite(x), axis=1) | np.any(np.abs(x) > blowup, axis=1)
            if np.any(now_bad):
                bad |= now_bad
                x = np.where(bad[:, None], 0.0, x)
            states[:, h + 1] = x
    return states, bad


def sample_rollouts(
    model: DynamicsModel,
    x0: np.ndarray,
    eta_tilde: GaussianControlSequence,
    M: int,
    seed=None,
    cost_fn: CostFn | None = None,
    terminal_value_fn: ValueFn | None = None,
    gamma: float = 1.0,
    action_low=None,
    action_high=None,
    blowup: float = 1e6,
) -> RolloutBatch:
    """``M`` control sequences ``mu_tilde + sqrt(Sigma) eps`` pushed through the model."""
    rng = _rng(seed)
    H, m = eta_tilde.mean.shape
    eps = rng.standard_normal((M, H, m))
    controls = eta_tilde.mean[None] + np.sqrt(eta_tilde.sigma) * eps
    if action_low is not None:
        controls = np.clip(controls, action_low, action_high)
    x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64), (M, np.size(x0)))
    states, bad = simulate(model, x0, controls, rng, blowup)
    costs = np.zeros(M)
    if cost_fn is not None:
        ok = ~bad
        if np.any(ok):
            costs[ok] = total_cost(states[ok], controls[ok], cost_fn, terminal_value_fn, gamma, H)
    costs[bad] = np.inf
    return RolloutBatch(states, controls, costs)


def elite_indices(costs: np.ndarray, p: float) -> np.ndarray:
    """Indices of the ``ceil(p M)`` lowest costs; ties go to the lower index."""
    k = n_elites(p, len(costs))
    return np.argsort(costs, kind="stable")[:k]


def _clip(mean, low, high):
    return mean if low is None else np.clip(mean, low, high)


def cem_update(
    eta_tilde: GaussianControlSequence,
    batch: RolloutBatch,
    alpha: float,
    p: float,
    lam: float = 1.0,
    weighting: str = "exp",
    action_low=None,
    action_high=None,
) -> GaussianControlSequence:
    """Elite-weighted mean step ``mu = (1 - alpha) mu_tilde + alpha g``.

    ``weighting="literal"`` uses ``g = sum C_i U_i / sum C_i`` over the
    elites exactly as written; ``"exp"`` uses weights
    ``exp(-(C_i - C_min) / lam)`` so that cheaper elites count more.
    """
    costs = np.asarray(batch.costs, dtype=np.float64)
    k = n_elites(p, len(costs))
    if np.sum(np.isfinite(costs)) < k:
        raise PlanningError(f"need {k} finite rollout costs, have {int(np.sum(np.isfinite(costs)))}")
    # index order, so p = 1 sums in exactly the order mppi_update does
    elites = np.sort(elite_indices(costs, p))
    c = costs[elites]
    if weighting == "literal":
        total = c.sum()
        if total == 0.0 or (np.any(c > 0) and np.any(c < 0)):
            raise PlanningError("literal cost weighting needs same-sign, non-zero elite costs; use weighting='exp'")
        w = c / total
    elif weighting == "exp":
        w = np.exp(-(c - c.min()) / lam)
        w /= w.sum()
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    g = np.tensordot(w, batch.controls[elites], axes=1)
    mean = (1.0 - alpha) * eta_tilde.mean + alpha * g
    return GaussianControlSequence(_clip(mean, action_low, action_high), eta_tilde.sigma.copy())


def mppi_update(
    eta_tilde: GaussianControlSequence,
    batch: RolloutBatch,
    lam: float,
    action_low=None,
    action_high=None,
) -> GaussianControlSequence:
    """Softmax(-C / lam) average over all rollouts (the ``alpha = 1`` step)."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    costs = np.asarray(batch.costs, dtype=np.float64)
    finite = np.isfinite(costs)
    if not np.any(finite):
        raise PlanningError("all rollout costs are infinite")
    w = np.zeros_like(costs)
    w[finite] = np.exp(-(costs[finite] - costs[finite].min()) / lam)
    w /= w.sum()
    g = np.tensordot(w, batch.controls, axes=1)
    return GaussianControlSequence(_clip(g, action_low, action_high), eta_tilde.sigma.copy())


def kl_gaussian(mu1, mu2, sigma) -> float:
    """KL between equal-covariance diagonal Gaussians, summed over the grid."""
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mu1.shape)
    if np.any(sigma <= 0):
        raise ValueError("covariance entries must be positive")
    return float(np.sum((mu1 - mu2) ** 2 / (2.0 * sigma)))


def sequence_cost(model, x0, mean, cost_fn, terminal_value_fn=None, gamma=1.0, action_low=None, action_high=None, seed=None) -> float:
    """Cost of executing a mean control sequence through the model (no noise)."""
    controls = _clip(np.asarray(mean, dtype=np.float64), action_low, action_high)[None]
    states, bad = simulate(model, np.asarray(x0, dtype=np.float64)[None], controls, _rng(seed))
    if bad[0]:
        return math.inf
    return float(total_cost(states, controls, cost_fn, terminal_value_fn, gamma)[0])


@dataclass
class DmdMpc:
    """Plan-step driver bundling model, cost and config.

    ``plan`` handles one state; ``plan_batch`` runs independent policy-shift
    plan steps from many start states with one vectorized rollout pass.
    """

    model: DynamicsModel
    cost_fn: CostFn
    config: MpcConfig
    action_low: np.ndarray
    action_high: np.ndarray
    terminal_value_fn: ValueFn | None = None
    sigma: np.ndarray | None = None
    _prev: GaussianControlSequence | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.action_low = np.asarray(self.action_low, dtype=np.float64)
        self.action_high = np.asarray(self.action_high, dtype=np.float64)
        if self.sigma is None:
            self.sigma = self.config.default_sigma(self.action_low, self.action_high)

    def reset(self) -> None:
        self._prev = None

    def initial(self) -> GaussianControlSequence:
        mid = 0.5 * (self.action_low + self.action_high)
        return GaussianControlSequence(np.tile(mid, (self.config.horizon, 1)), self.sigma.copy())

    def warm_start(self, x_t, policy: Policy | None, rng) -> GaussianControlSequence:
        cfg = self.config
        if cfg.shift == "left_shift":
            prev = self._prev if self._prev is not None else self.initial()
            if self._prev is None:
                return prev
            return shift(prev, None, x_t, "left_shift")
        return shift(self.initial(), policy, x_t, "policy_shift", self.model, rng, self.action_low, self.action_high)

    def update(self, eta_tilde: GaussianControlSequence, batch: RolloutBatch) -> GaussianControlSequence:
        cfg = self.config
        if cfg.objective == "mppi":
            return mppi_update(eta_tilde, batch, cfg.temperature, self.action_low, self.action_high)
        return cem_update(
            eta_tilde, batch, cfg.alpha, cfg.elite_fraction, cfg.temperature, cfg.weighting, self.action_low, self.action_high
        )

    def plan(self, x_t, policy: Policy | None = None, seed=None) -> tuple[GaussianControlSequence, GaussianControlSequence, RolloutBatch]:
        """One DMD-MPC round: returns ``(eta_t, eta_tilde_t, rollouts)``."""
        rng = _rng(seed)
        cfg = self.config
        eta_tilde = self.warm_start(x_t, policy, rng)
        batch = sample_rollouts(
            self.model, x_t, eta_tilde, cfg.rollouts, rng, self.cost_fn, self.terminal_value_fn,
            cfg.discount, self.action_low, self.action_high, cfg.blowup,
        )
        eta = self.update(eta_tilde, batch)
        self._prev = eta
        return eta, eta_tilde, batch

    def plan_batch(self, x0: np.ndarray, policy: Policy, seed=None) -> np.ndarray:
        """Policy-shift plan steps from each row of ``x0``; returns means ``(B, H, m)``.

        Starts whose rollouts all diverge keep their warm-start means.
        """
        rng = _rng(seed)
        cfg = self.config
        x0 = np.asarray(x0, dtype=np.float64)
        B, H, M = len(x0), cfg.horizon, cfg.rollouts
        m = self.action_low.size
        mu_tilde = policy_rollout(policy, self.model, x0, H, rng, self.action_low, self.action_high)
        eps = rng.standard_normal((B, M, H, m))
        controls = np.clip(mu_tilde[:, None] + np.sqrt(self.sigma) * eps, self.action_low, self.action_high)
        flat_u = controls.reshape(B * M, H, m)
        states, bad = simulate(self.model, np.repeat(x0, M, axis=0), flat_u, rng, cfg.blowup)
        costs = np.full(B * M, np.inf)
        ok = ~bad
        if np.any(ok):
            costs[ok] = total_cost(states[ok], flat_u[ok], self.cost_fn, self.terminal_value_fn, cfg.discount, H)
        costs = costs.reshape(B, M)
        states = states.reshape(B, M, H + 1, -1)
        out = np.empty_like(mu_tilde)
        for b in range(B):
            eta_tilde = GaussianControlSequence(mu_tilde[b], self.sigma)
            try:
                out[b] = self.update(eta_tilde, RolloutBatch(states[b], controls[b], costs[b])).mean
            except PlanningError:
                out[b] = np.clip(mu_tilde[b], self.action_low, self.action_high)
        return out

    def with_config(self, **changes) -> "DmdMpc":
        return replace(self, config=replace(self.config, **changes), _prev=None)
