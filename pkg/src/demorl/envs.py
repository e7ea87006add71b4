"""Analytic desk-scale environments.

All dynamics are vectorized over leading axes: ``dynamics(x, u)`` accepts
``x`` of shape ``(..., n)`` and ``u`` of shape ``(..., m)``, which is what the
planners roll out in bulk. ``step`` wraps the same code for one state.

Pendulum (n=3, m=1). State ``[cos th, sin th, th_dot]`` with ``th = 0``
upright and ``th = pi`` hanging. Equation of motion::

    th_ddot = (g / l) sin th - (b / (m l^2)) th_dot + u / (m l^2)

integrated by ``substeps`` semi-implicit Euler steps per control period
``dt`` (velocity first, then angle); the velocity is clipped to
``+-max_speed`` after every substep. Reward::

    r = -(wrap(th)^2 + 0.1 th_dot^2 + 0.001 u^2)

which is 0 upright at rest with zero torque and negative elsewhere.
rho_0: ``th = pi + U(-a, a)``, ``th_dot = U(-a, a)`` with ``a = init_noise``.

Cart-pole swing-up (n=5, m=1). State ``[x, x_dot, cos th, sin th, th_dot]``
with ``th = 0`` upright. Gym cart-pole equations with half pole length
``length``, continuous force in ``[-force_mag, force_mag]``, one
semi-implicit Euler step of ``dt`` per control. Reward::

    r = upright * centered * gentle * slow
    upright  = (1 + cos th) / 2
    centered = (1 + 10^(-(x / 2)^2)) / 2
    gentle   = (4 + 1 - (u / force_mag)^2) / 5
    slow     = (1 + 10^(-(th_dot / 5)^2)) / 2

so every step scores in [0, 1], hanging scores 0 and upright at rest at the
origin scores 1.
rho_0 is hanging (``init="hanging"``) or upright (``init="upright"``, used
for the balance task), each with ``U(-a, a)`` noise on every coordinate.
Optional ``fail_angle`` / ``fail_position`` end an episode early once
``|th|`` or ``|x|`` exceeds them; ``cartpole_balance`` sets 12 degrees and 2.4.

Point mass (n=4, m=2). State ``[px, py, vx, vy]``, force input in
``[-1, 1]^2``, linear drag, semi-implicit Euler. Reward
``-|p - goal|^2 - 0.01 |u|^2``.

Only the optional cart-pole failure limits end an episode early; otherwise
``done`` is true exactly when ``t == episode_length``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    episode_length: int
    discount: float

    def __post_init__(self) -> None:
        if not np.all(self.action_low < self.action_high):
            raise ValueError("action_low must be < action_high elementwise")
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")


@dataclass
class EnvState:
    x: np.ndarray
    t: int = 0


@dataclass
class Transition:
    x: np.ndarray
    u: np.ndarray
    r: float
    x_next: np.ndarray
    done: bool


def wrap_angle(th):
    return (np.asarray(th) + np.pi) % (2.0 * np.pi) - np.pi


class Env:
    """Base class; subclasses provide ``_dynamics``, ``reward`` and ``_initial``."""

    name = "env"
    state_dim = 0
    action_dim = 0

    def __init__(self, episode_length: int = 500, discount: float = 0.99, init_noise: float = 0.05) -> None:
        self.episode_length = int(episode_length)
        self.discount = float(discount)
        self.init_noise = float(init_noise)
        self.last_clipped = False

    # physical constants that may be overridden / biased
    def physical_params(self) -> dict:
        return {
            f.name: getattr(self, f.name)
            for f in dataclasses.fields(self._Params)  # type: ignore[attr-defined]
        }

    def perturbed(self, **overrides) -> "Env":
        """Copy of this env with some physical constants changed (model bias hook)."""
        params = self.physical_params()
        unknown = set(overrides) - set(params)
        if unknown:
            raise KeyError(f"{self.name}: unknown parameters {sorted(unknown)}")
        params.update(overrides)
        return type(self)(
            episode_length=self.episode_length,
            discount=self.discount,
            init_noise=self.init_noise,
            **self._extra_kwargs(),
            **params,
        )

    def _extra_kwargs(self) -> dict:
        return {}

    @property
    def spec(self) -> EnvSpec:
        return EnvSpec(
            self.state_dim,
            self.action_dim,
            self.action_low.copy(),
            self.action_high.copy(),
            self.episode_length,
            self.discount,
        )

    def clip_action(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=np.float64), self.action_low, self.action_high)

    def dynamics(self, x, u) -> np.ndarray:
        """Next state for (batched) states and actions; actions are clipped."""
        return self._dynamics(np.asarray(x, dtype=np.float64), self.clip_action(u))

    def cost(self, x, u):
        return -self.reward(x, u)

    def reset(self, seed=None) -> EnvState:
        rng = np.random.default_rng(seed)
        return EnvState(self._initial(rng), 0)

    def step(self, state: EnvState, u) -> tuple[EnvState, float, bool]:
        u = np.asarray(u, dtype=np.float64).reshape(self.action_dim)
        uc = self.clip_action(u)
        self.last_clipped = bool(np.any(uc != u))
        r = float(self.reward(state.x, uc))
        x_next = self._dynamics(state.x, uc)
        t = state.t + 1
        if not np.all(np.isfinite(x_next)):
            raise SimulationError(f"{self.name}: non-finite state at step {t}")
        done = t >= self.episode_length or bool(self.failed(x_next))
        return EnvState(x_next, t), r, done

    def failed(self, x) -> np.ndarray:
        """Mask of states that end an episode early (none by default)."""
        return np.zeros(np.shape(x)[:-1], dtype=bool)


@dataclass
class _PendulumParams:
    g: float = 10.0
    l: float = 1.0
    m: float = 1.0
    damping: float = 0.0
    max_torque: float = 2.0
    max_speed: float = 8.0
    dt: float = 0.05
    substeps: int = 10


class Pendulum(Env):
    name = "pendulum"
    state_dim = 3
    action_dim = 1
    _Params = _PendulumParams

    def __init__(self, episode_length: int = 500, discount: float = 0.99, init_noise: float = 0.05, **params) -> None:
        super().__init__(episode_length, discount, init_noise)
        p = _PendulumParams(**params)
        for k, v in dataclasses.asdict(p).items():
            setattr(self, k, v)
        self.substeps = int(self.substeps)
        self.action_low = np.array([-self.max_torque])
        self.action_high = np.array([self.max_torque])

    @staticmethod
    def angle(x) -> np.ndarray:
        x = np.asarray(x)
        return np.arctan2(x[..., 1], x[..., 0])

    @staticmethod
    def from_angle(th, th_dot) -> np.ndarray:
        th = np.asarray(th, dtype=np.float64)
        return np.stack([np.cos(th), np.sin(th), np.broadcast_to(th_dot, th.shape)], axis=-1)

    def energy(self, x) -> np.ndarray:
        """Mechanical energy with the hanging rest position as zero."""
        th, w = self.angle(x), np.asarray(x)[..., 2]
        return 0.5 * self.m * self.l**2 * w**2 + self.m * self.g * self.l * (1.0 + np.cos(th))

    def _dynamics(self, x, u):
        th = np.arctan2(x[..., 1], x[..., 0])
        w = x[..., 2]
        h = self.dt / self.substeps
        inertia = self.m * self.l**2
        torque = u[..., 0]
        for _ in range(self.substeps):
            acc = self.g / self.l * np.sin(th) - self.damping / inertia * w + torque / inertia
            w = np.clip(w + acc * h, -self.max_speed, self.max_speed)
            th = th + w * h
        return np.stack([np.cos(th), np.sin(th), w], axis=-1)

    def reward(self, x, u):
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        th = wrap_angle(np.arctan2(x[..., 1], x[..., 0]))
        return -(th**2 + 0.1 * x[..., 2] ** 2 + 0.001 * u[..., 0] ** 2)

    def _initial(self, rng):
        a = self.init_noise
        th = np.pi + rng.uniform(-a, a)
        w = rng.uniform(-a, a)
        return self.from_angle(th, w)


@dataclass
class _CartPoleParams:
    gravity: float = 9.8
    masscart: float = 1.0
    masspole: float = 0.1
    length: float = 0.5
    force_mag: float = 10.0
    dt: float = 0.02


class CartPoleSwingUp(Env):
    name = "cartpole"
    state_dim = 5
    action_dim = 1
    _Params = _CartPoleParams

    def __init__(
        self,
        episode_length: int = 500,
        discount: float = 0.99,
        init_noise: float = 0.05,
        init: str = "hanging",
        fail_angle: float | None = None,
        fail_position: float | None = None,
        **params,
    ) -> None:
        super().__init__(episode_length, discount, init_noise)
        self.fail_angle = fail_angle
        self.fail_position = fail_position
        if init not in ("hanging", "upright"):
            raise ValueError(f"init must be 'hanging' or 'upright', got {init!r}")
        self.init = init
        p = _CartPoleParams(**params)
        for k, v in dataclasses.asdict(p).items():
            setattr(self, k, v)
        self.action_low = np.array([-self.force_mag])
        self.action_high = np.array([self.force_mag])

    def _extra_kwargs(self) -> dict:
        return {"init": self.init, "fail_angle": self.fail_angle, "fail_position": self.fail_position}

    def failed(self, x) -> np.ndarray:
        x = np.asarray(x)
        out = np.zeros(x.shape[:-1], dtype=bool)
        if self.fail_angle is not None:
            out |= np.abs(self.angle(x)) > self.fail_angle
        if self.fail_position is not None:
            out |= np.abs(x[..., 0]) > self.fail_position
        return out

    @staticmethod
    def angle(x) -> np.ndarray:
        x = np.asarray(x)
        return np.arctan2(x[..., 3], x[..., 2])

    def _dynamics(self, x, u):
        pos, vel, w = x[..., 0], x[..., 1], x[..., 4]
        cos_th, sin_th = x[..., 2], x[..., 3]
        total_mass = self.masscart + self.masspole
        pml = self.masspole * self.length
        force = u[..., 0]
        temp = (force + pml * w * w * sin_th) / total_mass
        th_acc = (self.gravity * sin_th - cos_th * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * cos_th * cos_th / total_mass)
        )
        x_acc = temp - pml * th_acc * cos_th / total_mass
        vel = vel + self.dt * x_acc
        pos = pos + self.dt * vel
        w = w + self.dt * th_acc
        th = np.arctan2(sin_th, cos_th) + self.dt * w
        return np.stack([pos, vel, np.cos(th), np.sin(th), w], axis=-1)

    def reward(self, x, u):
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        upright = 0.5 * (1.0 + x[..., 2])
        centered = 0.5 * (1.0 + 10.0 ** (-((x[..., 0] / 2.0) ** 2)))
        gentle = (5.0 - (u[..., 0] / self.force_mag) ** 2) / 5.0
        slow = 0.5 * (1.0 + 10.0 ** (-((x[..., 4] / 5.0) ** 2)))
        return upright * centered * gentle * slow

    def _initial(self, rng):
        a = self.init_noise
        th0 = np.pi if self.init == "hanging" else 0.0
        pos, vel, th, w = rng.uniform(-a, a, size=4)
        th = th0 + th
        return np.array([pos, vel, np.cos(th), np.sin(th), w])


@dataclass
class _PointMassParams:
    mass: float = 1.0
    drag: float = 0.5
    goal_x: float = 1.0
    goal_y: float = 1.0
    dt: float = 0.05


class PointMass(Env):
    name = "pointmass"
    state_dim = 4
    action_dim = 2
    _Params = _PointMassParams

    def __init__(self, episode_length: int = 200, discount: float = 0.99, init_noise: float = 0.05, **params) -> None:
        super().__init__(episode_length, discount, init_noise)
        p = _PointMassParams(**params)
        for k, v in dataclasses.asdict(p).items():
            setattr(self, k, v)
        self.action_low = -np.ones(2)
        self.action_high = np.ones(2)

    @property
    def goal(self) -> np.ndarray:
        return np.array([self.goal_x, self.goal_y])

    def _dynamics(self, x, u):
        p, v = x[..., :2], x[..., 2:]
        v = v + self.dt * (u - self.drag * v) / self.mass
        p = p + self.dt * v
        return np.concatenate([p, v], axis=-1)

    def reward(self, x, u):
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        d = x[..., :2] - self.goal
        return -np.sum(d * d, axis=-1) - 0.01 * np.sum(u * u, axis=-1)

    def _initial(self, rng):
        a = self.init_noise
        return rng.uniform(-a, a, size=4)


def CartPoleBalance(**kwargs) -> CartPoleSwingUp:
    """Balance task: upright starts, episode ends once the pole passes 12 degrees
    or the cart leaves ``[-2.4, 2.4]``."""
    kwargs.setdefault("init", "upright")
    kwargs.setdefault("fail_angle", 12.0 * math.pi / 180.0)
    kwargs.setdefault("fail_position", 2.4)
    return CartPoleSwingUp(**kwargs)


ENVS = {"pendulum": Pendulum, "cartpole": CartPoleSwingUp, "cartpole_balance": CartPoleBalance, "pointmass": PointMass}


def make_env(name: str, **kwargs) -> Env:
    try:
        cls = ENVS[name]
    except KeyError:
        raise KeyError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None
    return cls(**kwargs)


class EnvModel:
    """Exact (or parameter-biased) analytic dynamics exposed as a planning model."""

    def __init__(self, env: Env) -> None:
        self.env = env

    def step(self, x, u, rng=None) -> np.ndarray:
        return self.env.dynamics(x, u)
