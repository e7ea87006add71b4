"""Ring-buffer replay memory for true-environment and model transitions.

Dump format (``save`` / ``load``) is a numpy ``.npz`` archive with arrays
``x, u, r, x_next, done`` holding the live items oldest-first, plus the
scalar ``capacity``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envs import Transition


@dataclass
class TransitionBatch:
    x: np.ndarray
    u: np.ndarray
    r: np.ndarray
    x_next: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.r)

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.x[i], self.u[i], float(self.r[i]), self.x_next[i], bool(self.done[i]))

    @classmethod
    def concat(cls, parts: list["TransitionBatch"]) -> "TransitionBatch":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("x", "u", "r", "x_next", "done")))


class ReplayBuffer:
    def __init__(self, state_dim: int, action_dim: int, capacity: int = 1_000_000) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.capacity = int(capacity)
        self._x = np.zeros((capacity, state_dim))
        self._u = np.zeros((capacity, action_dim))
        self._r = np.zeros(capacity)
        self._xn = np.zeros((capacity, state_dim))
        self._d = np.zeros(capacity, dtype=bool)
        self._next = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        self.push_batch(
            np.asarray(t.x)[None], np.asarray(t.u)[None], np.array([t.r]), np.asarray(t.x_next)[None], np.array([t.done])
        )

    def push_batch(self, x, u, r, x_next, done) -> None:
        x = np.asarray(x, dtype=np.float64)
        x_next = np.asarray(x_next, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        r = np.asarray(r, dtype=np.float64).reshape(-1)
        done = np.asarray(done, dtype=bool).reshape(-1)
        k = len(r)
        if (
            x.shape != (k, self.state_dim)
            or x_next.shape != (k, self.state_dim)
            or u.shape != (k, self.action_dim)
            or done.shape != (k,)
        ):
            raise ValueError(
                f"transition shapes x{x.shape} u{u.shape} x_next{x_next.shape} do not match "
                f"state_dim={self.state_dim}, action_dim={self.action_dim}"
            )
        if k > self.capacity:
            x, u, r, x_next, done = x[-self.capacity :], u[-self.capacity :], r[-self.capacity :], x_next[-self.capacity :], done[-self.capacity :]
            k = self.capacity
        idx = (self._next + np.arange(k)) % self.capacity
        self._x[idx], self._u[idx], self._r[idx], self._xn[idx], self._d[idx] = x, u, r, x_next, done
        self._next = (self._next + k) % self.capacity
        self.size = min(self.size + k, self.capacity)

    def _ordered_index(self) -> np.ndarray:
        start = (self._next - self.size) % self.capacity
        return (start + np.arange(self.size)) % self.capacity

    def _take(self, idx: np.ndarray) -> TransitionBatch:
        return TransitionBatch(self._x[idx].copy(), self._u[idx].copy(), self._r[idx].copy(), self._xn[idx].copy(), self._d[idx].copy())

    def all(self) -> TransitionBatch:
        """Every stored transition, oldest first."""
        return self._take(self._ordered_index())

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self._ordered_index()[rng.integers(0, self.size, size=n)]

    def save(self, path: str | Path) -> None:
        b = self.all()
        np.savez(path, x=b.x, u=b.u, r=b.r, x_next=b.x_next, done=b.done, capacity=self.capacity)

    @classmethod
    def load(cls, path: str | Path) -> "ReplayBuffer":
        with np.load(path) as z:
            buf = cls(z["x"].shape[1], z["u"].shape[1], int(z["capacity"]))
            buf.push_batch(z["x"], z["u"], z["r"], z["x_next"], z["done"])
        return buf


def push(buffer: ReplayBuffer, t: Transition) -> None:
    buffer.push(t)


def sample_uniform(buffer: ReplayBuffer, n: int, seed=None) -> TransitionBatch:
    """``n`` i.i.d. uniform draws with replacement."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return buffer._take(buffer.sample_indices(n, rng))


def sample_union(b1: ReplayBuffer, b2: ReplayBuffer, n: int, ratio: float = 0.5, seed=None) -> TransitionBatch:
    """Each element comes from ``b1`` with probability ``ratio``, else ``b2``.

    When one buffer is empty every element comes from the other one.
    """
    if b1.size == 0 and b2.size == 0:
        raise ValueError("both buffers are empty")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if b2.size == 0:
        n1 = n
    elif b1.size == 0:
        n1 = 0
    else:
        n1 = int(np.sum(rng.random(n) < ratio))
    parts = []
    if n1:
        parts.append(b1._take(b1.sample_indices(n1, rng)))
    if n - n1:
        parts.append(b2._take(b2.sample_indices(n - n1, rng)))
    return TransitionBatch.concat(parts)
