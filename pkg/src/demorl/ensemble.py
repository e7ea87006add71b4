"""Bootstrap ensemble of deterministic delta-dynamics networks.

Each member maps normalized ``(x, u)`` to the normalized state change
``x' - x`` and is trained on squared error. Checkpoints are a directory
holding ``member_<k>.mlp`` (``nn`` binary format) and ``ensemble.json``
(normalizers and validation losses).
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import AdamState, Mlp, adam_step, load_mlp, save_mlp
from .replay import ReplayBuffer

_SCALE_FLOOR = 1e-6


class InsufficientDataError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


class EnsembleModel:
    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        n_members: int = 5,
        hidden: Sequence[int] = (64, 64),
        activation: str = "tanh",
        learning_rate: float = 1e-3,
        seed: int = 0,
    ) -> None:
        if n_members < 1:
            raise ValueError("an ensemble needs at least one member")
        self.state_dim = state_dim
        self.action_dim = action_dim
        sizes = [state_dim + action_dim, *hidden, state_dim]
        seeds = np.random.SeedSequence(seed).generate_state(n_members)
        self.members = [Mlp(sizes, activation, seed=int(s)) for s in seeds]
        self.optims = [AdamState.zeros_like(m.params(), learning_rate) for m in self.members]
        self.in_mean = np.zeros(state_dim + action_dim)
        self.in_scale = np.ones(state_dim + action_dim)
        self.out_mean = np.zeros(state_dim)
        self.out_scale = np.ones(state_dim)
        self.val_losses = np.zeros(n_members)
        self.train_history: list[np.ndarray] = []

    @property
    def n_members(self) -> int:
        return len(self.members)

    def fit_normalizers(self, inputs: np.ndarray, targets: np.ndarray) -> None:
        self.in_mean = inputs.mean(axis=0)
        self.in_scale = _safe_scale(inputs.std(axis=0))
        self.out_mean = targets.mean(axis=0)
        self.out_scale = _safe_scale(targets.std(axis=0))

    def normalize_input(self, z: np.ndarray) -> np.ndarray:
        return (z - self.in_mean) / self.in_scale

    def normalize_target(self, d: np.ndarray) -> np.ndarray:
        return (d - self.out_mean) / self.out_scale

    def denormalize_target(self, y: np.ndarray) -> np.ndarray:
        return y * self.out_scale + self.out_mean

    def member_delta(self, k: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        z = np.concatenate([x, u], axis=-1)
        return self.denormalize_target(self.members[k].forward(self.normalize_input(z)))

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k, m in enumerate(self.members):
            save_mlp(m, d / f"member_{k}.mlp")
        meta = {
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "in_mean": self.in_mean.tolist(),
            "in_scale": self.in_scale.tolist(),
            "out_mean": self.out_mean.tolist(),
            "out_scale": self.out_scale.tolist(),
            "val_losses": self.val_losses.tolist(),
        }
        (d / "ensemble.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, directory: str | Path) -> "EnsembleModel":
        d = Path(directory)
        meta = json.loads((d / "ensemble.json").read_text())
        k = len(meta["val_losses"])
        model = cls(meta["state_dim"], meta["action_dim"], n_members=k)
        model.members = [load_mlp(d / f"member_{i}.mlp") for i in range(k)]
        model.optims = [AdamState.zeros_like(m.params()) for m in model.members]
        for key in ("in_mean", "in_scale", "out_mean", "out_scale", "val_losses"):
            setattr(model, key, np.array(meta[key], dtype=np.float64))
        return model

    def planning_model(self, members: Sequence[int]) -> "EnsemblePlanningModel":
        return EnsemblePlanningModel(self, members)


def _safe_scale(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64).copy()
    s[s < _SCALE_FLOOR] = 1.0
    return s


def _mse_and_grad(net: Mlp, z: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    pred, cache = net.forward_cache(z)
    err = pred - y
    loss = float(np.mean(np.sum(err * err, axis=1)))
    grads, _ = net.backward(cache, 2.0 * err / len(z))
    return loss, grads


def train_ensemble(
    model: EnsembleModel,
    d_env: ReplayBuffer,
    epochs: int,
    seed=None,
    batch_size: int = 256,
    holdout: float = 0.1,
    min_size: int = 250,
    max_steps_per_epoch: int | None = None,
) -> EnsembleModel:
    """Fit every member on its own bootstrap of ``d_env``; score on a holdout.

    Normalizers are refit on the full buffer each call. ``val_losses`` are the
    members' mean squared errors on their holdout splits in normalized delta
    units. ``model.train_history`` gets one row per epoch holding each
    member's mean training loss for that epoch.
    """
    if d_env.size < min_size:
        raise InsufficientDataError(f"need at least {min_size} transitions, have {d_env.size}")
    rng = np.random.default_rng(seed)
    data = d_env.all()
    inputs = np.concatenate([data.x, data.u], axis=1)
    deltas = data.x_next - data.x
    model.fit_normalizers(inputs, deltas)
    z_all = model.normalize_input(inputs)
    y_all = model.normalize_target(deltas)

    n = len(z_all)
    n_val = max(1, int(round(holdout * n)))
    splits = []
    for _ in range(model.n_members):
        perm = rng.permutation(n)
        val_idx, train_pool = perm[:n_val], perm[n_val:]
        if len(train_pool) == 0:
            train_pool = val_idx
        boot = train_pool[rng.integers(0, len(train_pool), size=len(train_pool))]
        splits.append((boot, val_idx))

    history = []
    for _ in range(int(epochs)):
        row = np.zeros(model.n_members)
        for k, (net, opt) in enumerate(zip(model.members, model.optims)):
            boot = splits[k][0]
            order = boot[rng.permutation(len(boot))]
            n_batches = math.ceil(len(order) / batch_size)
            if max_steps_per_epoch is not None:
                n_batches = min(n_batches, max_steps_per_epoch)
            losses = []
            for b in range(n_batches):
                idx = order[b * batch_size : (b + 1) * batch_size]
                try:
                    loss, grads = _mse_and_grad(net, z_all[idx], y_all[idx])
                except FloatingPointError as exc:
                    raise DivergenceError(f"ensemble member {k} diverged: {exc}") from exc
                if not math.isfinite(loss):
                    raise DivergenceError(f"ensemble member {k} produced non-finite loss")
                adam_step(net.params(), grads, opt)
                losses.append(loss)
            row[k] = float(np.mean(losses))
        history.append(row)
    model.train_history.extend(history)

    for k, net in enumerate(model.members):
        val_idx = splits[k][1]
        err = net.forward(z_all[val_idx]) - y_all[val_idx]
        model.val_losses[k] = float(np.mean(np.sum(err * err, axis=1)))
        if not math.isfinite(model.val_losses[k]):
            raise DivergenceError(f"ensemble member {k} has non-finite validation loss")
    return model


def select_members(model: EnsembleModel, count: int) -> list[int]:
    """Indices of the ``count`` lowest validation losses, ties to lower index."""
    if not 1 <= count <= model.n_members:
        raise ValueError(f"count must be in [1, {model.n_members}], got {count}")
    order = sorted(range(model.n_members), key=lambda k: (model.val_losses[k], k))
    return order[:count]


def predict(model: EnsembleModel, members: Sequence[int], x, u, seed=None) -> np.ndarray:
    """One-step prediction from one member drawn uniformly from ``members``.

    The same member serves every row of a batched call.
    """
    if len(members) == 0:
        raise ValueError("members must be non-empty")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = members[0] if len(members) == 1 else members[int(rng.integers(len(members)))]
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    x_next = x + model.member_delta(k, x, u)
    if not np.all(np.isfinite(x_next)):
        raise DivergenceError(f"ensemble member {k} predicted a non-finite state")
    return x_next


class EnsemblePlanningModel:
    """Adapter giving the planners a ``step(x, u, rng)`` over chosen members."""

    def __init__(self, model: EnsembleModel, members: Sequence[int]) -> None:
        self.model = model
        self.members = list(members)

    def step(self, x, u, rng=None) -> np.ndarray:
        rng = rng if rng is not None else np.random.default_rng()
        k = self.members[int(rng.integers(len(self.members)))]
        return np.asarray(x) + self.model.member_delta(k, np.asarray(x), np.asarray(u))
