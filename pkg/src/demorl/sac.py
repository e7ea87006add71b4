"""Soft actor-critic with an explicit state-value network.

Networks: actor (mean and log-std per action dimension), twin critics
``Q1, Q2`` on ``(x, u)``, value ``V`` on ``x`` and EMA targets of ``V`` and
both critics. Critics regress ``r + gamma (1 - done) V_target(x')``; the
value net regresses ``min(Q1, Q2)(x, u~) - alpha log pi(u~ | x)`` with a
fresh reparameterized ``u~``; the actor minimizes
``alpha log pi(u~ | x) - min(Q1, Q2)(x, u~)``.

Actions are squashed: ``u = center + half * tanh(mean + std * eps)``.
The critic targets are tracked alongside the value target but the critic
regression only reads the value target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import AdamState, Mlp, adam_step
from .replay import TransitionBatch

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
NETS = ("actor", "q1", "q2", "value", "value_target", "q1_target", "q2_target")


class SacError(FloatingPointError):
    pass


def _log1m_tanh_sq(z: np.ndarray) -> np.ndarray:
    # log(1 - tanh(z)^2), stable for large |z|
    return 2.0 * (math.log(2.0) - z - np.logaddexp(0.0, -2.0 * z))


@dataclass
class SacConfig:
    hidden: Sequence[int] = (64, 64)
    activation: str = "relu"
    learning_rate: float = 3e-4
    entropy_weight: float = 0.2
    tau: float = 0.005
    discount: float = 0.99
    batch_size: int = 256


class SacAgent:
    def __init__(self, state_dim: int, action_low, action_high, config: SacConfig | None = None, seed: int = 0) -> None:
        self.config = cfg = config or SacConfig()
        self.state_dim = state_dim
        self.action_low = np.asarray(action_low, dtype=np.float64)
        self.action_high = np.asarray(action_high, dtype=np.float64)
        self.action_dim = m = self.action_low.size
        self.center = 0.5 * (self.action_high + self.action_low)
        self.half = 0.5 * (self.action_high - self.action_low)
        self.entropy_weight = cfg.entropy_weight
        self.tau = cfg.tau
        self.discount = cfg.discount
        seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(4)]
        hidden = list(cfg.hidden)
        act = cfg.activation
        self.actor = Mlp([state_dim, *hidden, 2 * m], act, seed=seeds[0])
        self.q1 = Mlp([state_dim + m, *hidden, 1], act, seed=seeds[1])
        self.q2 = Mlp([state_dim + m, *hidden, 1], act, seed=seeds[2])
        self.value = Mlp([state_dim, *hidden, 1], act, seed=seeds[3])
        self.value_target = self.value.copy()
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.optims = {
            name: AdamState.zeros_like(getattr(self, name).params(), cfg.learning_rate)
            for name in ("actor", "q1", "q2", "value")
        }

    # -- policy ---------------------------------------------------------------

    def actor_dist(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.actor.forward(np.atleast_2d(x))
        m = self.action_dim
        return out[:, :m], np.clip(out[:, m:], LOG_STD_MIN, LOG_STD_MAX)

    def squash(self, z: np.ndarray) -> np.ndarray:
        return self.center + self.half * np.tanh(z)

    def log_prob_z(self, z: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
        """Log-density of the squashed action produced by pre-squash value ``z``."""
        eps = (z - mean) / np.exp(log_std)
        gauss = -0.5 * eps**2 - log_std - _HALF_LOG_2PI
        return np.sum(gauss - np.log(self.half) - _log1m_tanh_sq(z), axis=-1)

    def deterministic_action(self, x: np.ndarray) -> np.ndarray:
        mean, _ = self.actor_dist(x)
        u = self.squash(mean)
        return u[0] if np.ndim(x) == 1 else u

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.deterministic_action(x)

    # -- value ----------------------------------------------------------------

    def q_min(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        xu = np.concatenate([x, u], axis=1)
        return np.minimum(self.q1.forward(xu), self.q2.forward(xu))[:, 0]

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        arrays = {}
        for name in NETS:
            arrays[f"net_{name}"] = np.frombuffer(getattr(self, name).to_bytes(), dtype=np.uint8)
        for name, st in self.optims.items():
            arrays[f"opt_{name}_step"] = np.array(st.step_count)
            for i, (m1, m2) in enumerate(zip(st.first_moment, st.second_moment)):
                arrays[f"opt_{name}_m_{i}"] = m1
                arrays[f"opt_{name}_v_{i}"] = m2
        arrays["scalars"] = np.array([self.entropy_weight, self.tau, self.discount])
        arrays["bounds"] = np.stack([self.action_low, self.action_high])
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "SacAgent":
        with np.load(path) as z:
            nets = {name: Mlp.from_bytes(z[f"net_{name}"].tobytes()) for name in NETS}
            low, high = z["bounds"]
            agent = cls(nets["value"].n_in, low, high)
            for name, net in nets.items():
                setattr(agent, name, net)
            agent.entropy_weight, agent.tau, agent.discount = (float(v) for v in z["scalars"])
            for name in agent.optims:
                params = getattr(agent, name).params()
                st = AdamState.zeros_like(params, agent.config.learning_rate)
                st.step_count = int(z[f"opt_{name}_step"])
                st.first_moment = [z[f"opt_{name}_m_{i}"].copy() for i in range(len(params))]
                st.second_moment = [z[f"opt_{name}_v_{i}"].copy() for i in range(len(params))]
                agent.optims[name] = st
        return agent


def actor_sample(agent: SacAgent, x: np.ndarray, seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Reparameterized squashed-Gaussian sample and its log-density."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    single = np.ndim(x) == 1
    mean, log_std = agent.actor_dist(x)
    z = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    u, logp = agent.squash(z), agent.log_prob_z(z, mean, log_std)
    return (u[0], float(logp[0])) if single else (u, logp)


def value_of(agent: SacAgent, x: np.ndarray):
    v = agent.value.forward(np.atleast_2d(x))[:, 0]
    return float(v[0]) if np.ndim(x) == 1 else v


def sac_losses(agent: SacAgent, batch: TransitionBatch, eps: np.ndarray) -> tuple[dict, dict]:
    """Losses and parameter gradients for one batch with fixed action noise ``eps``.

    Returns ``(losses, grads)`` where ``grads`` maps network name to a list in
    that network's ``params()`` order.
    """
    x, u, r, xn = batch.x, batch.u, batch.r, batch.x_next
    not_done = 1.0 - batch.done.astype(np.float64)
    B, m = len(r), agent.action_dim
    a_w = agent.entropy_weight

    # fresh reparameterized action
    out, actor_cache = agent.actor.forward_cache(x)
    mean, raw_log_std = out[:, :m], out[:, m:]
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    z = mean + std * eps
    a = np.tanh(z)
    u_new = agent.center + agent.half * a
    logp = agent.log_prob_z(z, mean, log_std)

    xu_new = np.concatenate([x, u_new], axis=1)
    q1n, c1n = agent.q1.forward_cache(xu_new)
    q2n, c2n = agent.q2.forward_cache(xu_new)
    use1 = (q1n[:, 0] <= q2n[:, 0])[:, None]
    qmin_new = np.where(use1, q1n, q2n)[:, 0]

    # value
    v_target = qmin_new - a_w * logp
    v_pred, v_cache = agent.value.forward_cache(x)
    v_err = v_pred[:, 0] - v_target
    j_v = 0.5 * float(np.mean(v_err**2))
    g_v, _ = agent.value.backward(v_cache, (v_err / B)[:, None])

    # critics
    q_target = r + agent.discount * not_done * agent.value_target.forward(xn)[:, 0]
    xu = np.concatenate([x, u], axis=1)
    losses, grads = {"value": j_v}, {"value": g_v}
    for name in ("q1", "q2"):
        net = getattr(agent, name)
        q_pred, cache = net.forward_cache(xu)
        err = q_pred[:, 0] - q_target
        losses[name] = 0.5 * float(np.mean(err**2))
        grads[name], _ = net.backward(cache, (err / B)[:, None])

    # actor, backprop through the min critic into the action
    _, din1 = agent.q1.backward(c1n, use1.astype(np.float64))
    _, din2 = agent.q2.backward(c2n, (~use1).astype(np.float64))
    dq_du = (din1 + din2)[:, x.shape[1] :]
    dz = (a_w * 2.0 * a - dq_du * agent.half * (1.0 - a * a)) / B
    d_mean = dz
    d_log_std = (dz * std * eps - a_w / B) * ((raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX))
    grads["actor"], _ = agent.actor.backward(actor_cache, np.concatenate([d_mean, d_log_std], axis=1))
    losses["actor"] = float(np.mean(a_w * logp - qmin_new))

    for name, val in losses.items():
        if not math.isfinite(val):
            raise SacError(f"non-finite {name} loss")
    return losses, grads


def sac_update(agent: SacAgent, batch: TransitionBatch, seed=None) -> dict:
    """One Adam step on value, both critics and actor. Returns the losses."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal((len(batch), agent.action_dim))
    losses, grads = sac_losses(agent, batch, eps)
    for name, g in grads.items():
        adam_step(getattr(agent, name).params(), g, agent.optims[name])
    return {"J_V": losses["value"], "J_Q1": losses["q1"], "J_Q2": losses["q2"], "J_pi": losses["actor"]}


def target_update(agent: SacAgent, tau: float | None = None) -> None:
    """``target <- tau * live + (1 - tau) * target`` for every target net."""
    tau = agent.tau if tau is None else tau
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    for live, target in ((agent.value, agent.value_target), (agent.q1, agent.q1_target), (agent.q2, agent.q2_target)):
        for p, t in zip(live.params(), target.params()):
            if tau == 1.0:
                t[...] = p
            else:
                t *= 1.0 - tau
                t += tau * p
