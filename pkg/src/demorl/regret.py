"""Regret instrumentation of dynamic mirror descent on convex tracking toys.

The decision is the mean ``mu`` of a Gaussian control with fixed diagonal
covariance ``Sigma`` (a scalar times identity), restricted to the box
``[-R, R]^d``. Round ``t`` scores

    J_t(mu) = E_{u ~ N(mu, Sigma)} [a/2 ||u - c_t||^2] = a/2 ||mu - c_t||^2 + a d Sigma / 2.

The mirror map is ``psi(mu) = ||mu||^2 / (2 Sigma)``. Its Bregman divergence
is the KL between the two Gaussians and its strong-convexity modulus is
``1 / Sigma``. A mirror step is therefore
``clip(mu - alpha * Sigma * grad J, -R, R)``, followed by the shift ``Phi_t``.

The comparator ``eta_t`` is the per-round minimizer ``clip(c_t)``. The
recorded drift is ``||eta_{t+1} - Phi_t(eta_t)||``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mpc import kl_gaussian

CSV_COLUMNS = ("t", "J_tilde", "J_star", "drift", "regret", "bound")


@dataclass
class ToySpec:
    dim: int = 1
    radius: float = 2.0
    sigma: float = 1.0  # control variance Sigma
    curvature: float = 1.0
    target: str = "static"  # static | drift
    drift: float = 0.0
    step_scale: float = 0.5
    grid: int = 200

    def __post_init__(self) -> None:
        if self.dim not in (1, 2):
            raise ValueError("toys are 1-D or 2-D")
        if self.radius <= 0 or self.sigma <= 0 or self.curvature <= 0:
            raise ValueError("radius, sigma and curvature must be positive")
        if self.target not in ("static", "drift"):
            raise ValueError(f"unknown target mode {self.target!r}")
        if self.grid < 2:
            raise ValueError("grid needs at least two points")

    def objective(self, mu: np.ndarray, c: np.ndarray) -> float:
        d = np.asarray(mu) - c
        return 0.5 * self.curvature * (float(d @ d) + self.dim * self.sigma)

    def gradient(self, mu: np.ndarray, c: np.ndarray) -> np.ndarray:
        return self.curvature * (np.asarray(mu) - c)

    def project(self, mu: np.ndarray) -> np.ndarray:
        return np.clip(mu, -self.radius, self.radius)

    def shift(self, mu: np.ndarray) -> np.ndarray:
        # the toy's shift operator; it has no knowledge of the target motion
        return np.asarray(mu, dtype=np.float64).copy()

    def alpha(self, t: int) -> float:
        return self.step_scale / math.sqrt(t)


@dataclass
class BoundConstants:
    G_J: float
    M: float
    D_max: float
    sigma: float  # strong-convexity modulus of psi
    radius: float
    delta_phi: list[float] = field(default_factory=list)


@dataclass
class RegretRecord:
    t: int
    J_tilde: float
    J_star: float
    drift: float
    alpha: float
    regret: float
    bound: float
    eta_tilde: np.ndarray
    eta_star: np.ndarray


def divergence(a, b, spec: ToySpec) -> float:
    return kl_gaussian(a, b, spec.sigma)


def _axis(spec: ToySpec) -> np.ndarray:
    return np.linspace(-spec.radius, spec.radius, spec.grid)


def _box_grid(spec: ToySpec) -> np.ndarray:
    axes = np.meshgrid(*([_axis(spec)] * spec.dim), indexing="ij")
    return np.stack([a.ravel() for a in axes], axis=1)


def _pairwise_max(spec: ToySpec, fn) -> float:
    # both D and the shift act coordinatewise, so the box maximum splits per axis
    g = _axis(spec)
    one = ToySpec(1, spec.radius, spec.sigma, spec.curvature, grid=spec.grid)
    best = max(fn(np.array([a]), np.array([b]), one) for a in g for b in g)
    return spec.dim * best


def bound_constants(spec: ToySpec, targets: np.ndarray) -> BoundConstants:
    """Grid estimates of the constants over the decision box."""
    pts = _box_grid(spec)
    G = 0.0
    for c in np.unique(targets, axis=0):
        G = max(G, float(np.max(np.linalg.norm(spec.curvature * (pts - c), axis=1))))
    M = 0.5 * float(np.max(np.linalg.norm(pts / spec.sigma, axis=1)))
    D_max = _pairwise_max(spec, divergence)
    d_phi = _pairwise_max(spec, lambda a, b, s: divergence(s.shift(a), s.shift(b), s) - divergence(a, b, s))
    return BoundConstants(G, M, D_max, 1.0 / spec.sigma, spec.radius, [d_phi] * len(targets))


def make_targets(spec: ToySpec, rounds: int, rng: np.random.Generator) -> np.ndarray:
    """Targets ``c_1 .. c_{rounds+1}`` (one extra for the last comparator step)."""
    c0 = rng.uniform(-0.75 * spec.radius, 0.75 * spec.radius, size=spec.dim)
    if spec.target == "static" or spec.drift == 0.0:
        return np.tile(c0, (rounds + 1, 1))
    steps = spec.drift * rng.standard_normal((rounds, spec.dim))
    return np.vstack([c0, c0 + np.cumsum(steps, axis=0)])


def run_convex_tracking(
    rounds: int,
    spec: ToySpec,
    seed=None,
    init: np.ndarray | None = None,
    targets: np.ndarray | None = None,
) -> tuple[list[RegretRecord], BoundConstants]:
    """Run dynamic mirror descent for ``rounds`` rounds with ``alpha_t = step_scale / sqrt(t)``."""
    rng = np.random.default_rng(seed)
    if targets is None:
        targets = make_targets(spec, rounds, rng)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, spec.dim)
    if len(targets) < rounds + 1:
        raise ValueError("need rounds + 1 targets")
    mu = rng.uniform(-spec.radius, spec.radius, size=spec.dim) if init is None else np.asarray(init, dtype=np.float64)
    mu = spec.project(mu)
    const = bound_constants(spec, targets)

    records = []
    regret = 0.0
    drift_sum = 0.0
    alpha_sum = 0.0
    for t in range(1, rounds + 1):
        c, c_next = targets[t - 1], targets[t]
        star, star_next = spec.project(c), spec.project(c_next)
        a_t = spec.alpha(t)
        j_tilde = spec.objective(mu, c)
        j_star = spec.objective(star, c)
        # difference of squares directly, so tiny gaps do not cancel to noise
        gap = 0.5 * spec.curvature * (float((mu - c) @ (mu - c)) - float((star - c) @ (star - c)))
        drift = float(np.linalg.norm(star_next - spec.shift(star)))
        regret += gap
        drift_sum += drift
        alpha_sum += a_t
        bound = (
            const.D_max / spec.alpha(t + 1)
            + 4.0 * const.M / a_t * drift_sum
            + const.G_J**2 / (2.0 * const.sigma) * alpha_sum
        )
        records.append(RegretRecord(t, j_tilde, j_star, drift, a_t, regret, bound, mu.copy(), star.copy()))
        step = spec.project(mu - a_t * spec.sigma * spec.gradient(mu, c))
        mu = spec.shift(step)
    return records, const


def cumulative_bound(records: list[RegretRecord], const: BoundConstants, spec: ToySpec) -> np.ndarray:
    alphas = np.array([r.alpha for r in records])
    drifts = np.cumsum([r.drift for r in records])
    nxt = np.array([spec.alpha(r.t + 1) for r in records])
    return const.D_max / nxt + 4.0 * const.M / alphas * drifts + const.G_J**2 / (2.0 * const.sigma) * np.cumsum(alphas)


def check_bound(records: list[RegretRecord], const: BoundConstants, spec: ToySpec) -> dict:
    """Whether cumulative regret stays under the bound at every prefix."""
    bound = cumulative_bound(records, const, spec)
    regret = np.array([r.regret for r in records])
    holds = regret <= bound
    return {"holds": holds, "margin": bound - regret, "bound": bound, "all": bool(np.all(holds))}


def per_round_check(records: list[RegretRecord], const: BoundConstants, spec: ToySpec) -> np.ndarray:
    """Per-round inequality; each round needs the next round's iterate and comparator."""
    ok = np.zeros(len(records) - 1, dtype=bool)
    for i in range(len(records) - 1):
        r, nxt = records[i], records[i + 1]
        a = r.alpha
        lhs = r.J_tilde - r.J_star
        rhs = (
            (divergence(r.eta_star, r.eta_tilde, spec) - divergence(nxt.eta_star, nxt.eta_tilde, spec)) / a
            + const.delta_phi[i] / a
            + 4.0 * const.M / a * r.drift
            + a / (2.0 * const.sigma) * const.G_J**2
        )
        ok[i] = lhs <= rhs + 1e-12 * max(1.0, abs(rhs))
    return ok


def loglog_slope(records: list[RegretRecord]) -> float:
    """Least-squares slope of log cumulative regret against log t."""
    t = np.array([r.t for r in records], dtype=np.float64)
    reg = np.array([r.regret for r in records])
    keep = reg > 0
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(t[keep]), np.log(reg[keep]), 1)[0])


def write_regret_csv(records: list[RegretRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.t, repr(r.J_tilde), repr(r.J_star), repr(r.drift), repr(r.regret), repr(r.bound)])


def read_regret_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "t" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]
