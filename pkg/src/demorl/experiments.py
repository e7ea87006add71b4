"""DeMoRL training, the SAC baseline, the elite-fraction ablation and outputs.

Seeding: a run's master seed feeds ``np.random.SeedSequence(master)`` and
``spawn(len(SEED_STREAMS))``; stream ``i`` serves the component named
``SEED_STREAMS[i]``. Fixing the master seed fixes the whole run.

Budget accounting: ``env_steps`` in a :class:`RunLog` counts true
environment transitions only. Model rollouts never enter it.

Time-limit ends of episodes are stored with ``done = False``: the tasks have
no terminal states, so bootstrapping through the cut is correct.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .ensemble import EnsembleModel, select_members, train_ensemble
from .envs import Env, make_env
from .mpc import DmdMpc, MpcConfig
from .replay import ReplayBuffer, sample_union, sample_uniform
from .sac import SacAgent, SacConfig, actor_sample, sac_update, target_update, value_of

log = logging.getLogger(__name__)

SEED_STREAMS = ("env", "agent", "model", "explore", "model_train", "mpc", "sac", "eval")


def derive_seeds(master: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(master).spawn(len(SEED_STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(SEED_STREAMS, children)}


@dataclass
class LogRow:
    epoch: int
    env_steps: int
    mean_eval_return: float
    std_eval_return: float
    env_buffer: int
    mpc_buffer: int
    wall_time: float


@dataclass
class RunLog:
    algorithm: str
    seed: int
    rows: list[LogRow] = field(default_factory=list)

    def returns(self) -> np.ndarray:
        return np.array([r.mean_eval_return for r in self.rows])

    def epochs_to_threshold(self, threshold: float) -> int | None:
        """First (1-based) epoch whose mean evaluation return reaches ``threshold``."""
        for r in self.rows:
            if r.mean_eval_return >= threshold:
                return r.epoch
        return None

    def comparable(self) -> list[tuple]:
        # every column except wall time, which is not reproducible
        return [(r.epoch, r.env_steps, r.mean_eval_return, r.std_eval_return, r.env_buffer, r.mpc_buffer) for r in self.rows]


class ExperimentError(RuntimeError):
    """A run aborted; ``partial`` holds the rows logged before the failure."""

    def __init__(self, message: str, partial: "RunLog | None" = None) -> None:
        super().__init__(message)
        self.partial = partial


def evaluate(policy, env: Env, episodes: int, rng: np.random.Generator) -> np.ndarray:
    """Returns of ``episodes`` deterministic episodes, stepped as one batch."""
    states = np.stack([env.reset(int(rng.integers(2**31))).x for _ in range(episodes)])
    total = np.zeros(episodes)
    for _ in range(env.episode_length):
        u = env.clip_action(policy(states))
        total += env.reward(states, u)
        states = env.dynamics(states, u)
    return total


def build_agent(cfg: ExperimentConfig, env: Env, seed) -> SacAgent:
    s = cfg.sac
    sac_cfg = SacConfig(s.hidden, s.activation, s.learning_rate, s.entropy_weight, s.tau, s.discount, s.batch_size)
    return SacAgent(env.state_dim, env.action_low, env.action_high, sac_cfg, seed=seed)


def mpc_config(cfg: ExperimentConfig, elite_fraction: float | None = None) -> MpcConfig:
    m = cfg.mpc
    return MpcConfig(
        horizon=m.horizon,
        rollouts=m.rollouts,
        alpha=m.alpha,
        elite_fraction=m.elite_fraction if elite_fraction is None else elite_fraction,
        temperature=m.temperature,
        objective=m.objective,
        shift=m.shift,
        discount=cfg.sac.discount,
        sigma_scale=m.sigma_scale,
        weighting=m.weighting,
    )


def generate_model_data(
    planner: DmdMpc,
    agent: SacAgent,
    d_env: ReplayBuffer,
    d_mpc: ReplayBuffer,
    n_transitions: int,
    reward_fn,
    rng: np.random.Generator,
) -> int:
    """DMD-MPC block: plan from uniform ``d_env`` starts, roll the plans
    through the model and store every model transition in ``d_mpc``."""
    H = planner.config.horizon
    n_starts = math.ceil(n_transitions / H)
    starts = sample_uniform(d_env, n_starts, rng).x

    def shift_policy(x):
        return actor_sample(agent, x, rng)[0]

    means = planner.plan_batch(starts, shift_policy, rng)
    x = starts
    added = 0
    for h in range(H):
        u = means[:, h]
        x_next = planner.model.step(x, u, rng)
        ok = np.all(np.isfinite(x_next), axis=1) & np.all(np.abs(x_next) < planner.config.blowup, axis=1)
        if not np.any(ok):
            break
        x, u, x_next = x[ok], u[ok], x_next[ok]
        d_mpc.push_batch(x, u, reward_fn(x, u), x_next, np.zeros(len(x), dtype=bool))
        added += len(x)
        x = x_next
    return added


def _split(total: int, parts: int) -> list[int]:
    base, extra = divmod(int(total), parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def train(cfg: ExperimentConfig, seed: int, algorithm: str = "demorl", elite_fraction: float | None = None) -> RunLog:
    """One seeded run of DeMoRL (``algorithm="demorl"``) or plain SAC (``"sac"``)."""
    if algorithm not in ("demorl", "sac"):
        raise ValueError(f"unknown algorithm {algorithm!r}")
    e = cfg.experiment
    rngs = derive_seeds(seed)
    env = make_env(e.env, episode_length=e.episode_length)
    eval_env = make_env(e.env, episode_length=e.episode_length)
    agent = build_agent(cfg, env, int(rngs["agent"].integers(2**31)))
    d_env = ReplayBuffer(env.state_dim, env.action_dim, min(cfg.sac.env_capacity, max(1, e.epochs * e.env_steps_per_epoch)))
    d_mpc = ReplayBuffer(env.state_dim, env.action_dim, cfg.sac.mpc_capacity)
    model = None
    planner = None
    if algorithm == "demorl":
        mc = cfg.model
        model = EnsembleModel(
            env.state_dim, env.action_dim, mc.ensemble_size, mc.hidden, learning_rate=mc.learning_rate,
            seed=int(rngs["model"].integers(2**31)),
        )
    run = RunLog(algorithm, seed)
    start = time.perf_counter()
    state = env.reset(int(rngs["env"].integers(2**31)))
    env_steps = 0
    n_iter = max(1, e.iterations_per_epoch)
    steps_per_iter = _split(e.env_steps_per_epoch, n_iter)
    updates_per_iter = _split(cfg.sac.updates_per_epoch, n_iter)
    model_per_iter = _split(cfg.mpc.model_transitions_per_epoch, n_iter)
    for epoch in range(1, e.epochs + 1):
        try:
            for it in range(n_iter):
                for _ in range(steps_per_iter[it]):
                    if epoch <= e.random_epochs:
                        u = rngs["explore"].uniform(env.action_low, env.action_high)
                    else:
                        u, _ = actor_sample(agent, state.x, rngs["explore"])
                    nxt, r, done = env.step(state, u)
                    d_env.push_batch(state.x[None], env.clip_action(u)[None], [r], nxt.x[None], [False])
                    env_steps += 1
                    state = env.reset(int(rngs["env"].integers(2**31))) if done else nxt

                if model is not None and d_env.size >= cfg.model.min_data and model_per_iter[it]:
                    if it == 0 or planner is None:
                        train_ensemble(
                            model, d_env, cfg.model.epochs_per_round, rngs["model_train"], cfg.model.batch_size,
                            min_size=cfg.model.min_data,
                        )
                        members = select_members(model, cfg.model.select)
                        vf = (lambda x: value_of(agent, x)) if cfg.mpc.use_value else None
                        planner = DmdMpc(
                            model.planning_model(members), env.cost, mpc_config(cfg, elite_fraction),
                            env.action_low, env.action_high, terminal_value_fn=vf,
                        )
                    generate_model_data(planner, agent, d_env, d_mpc, model_per_iter[it], env.reward, rngs["mpc"])

                for _ in range(updates_per_iter[it]):
                    if d_mpc.size:
                        batch = sample_union(d_env, d_mpc, cfg.sac.batch_size, cfg.sac.union_ratio, rngs["sac"])
                    else:
                        batch = sample_uniform(d_env, cfg.sac.batch_size, rngs["sac"])
                    sac_update(agent, batch, rngs["sac"])
                    target_update(agent)

            rets = evaluate(agent, eval_env, e.eval_episodes, rngs["eval"]) if e.eval_episodes else np.zeros(1)
        except Exception as exc:
            raise ExperimentError(f"{algorithm} seed {seed} failed in epoch {epoch}: {exc}", run) from exc
        row = LogRow(epoch, env_steps, float(np.mean(rets)), float(np.std(rets)), d_env.size, d_mpc.size, time.perf_counter() - start)
        run.rows.append(row)
        log.info("%s seed=%d epoch=%d steps=%d return=%.1f", algorithm, seed, epoch, env_steps, row.mean_eval_return)
    return run


def train_demorl(cfg: ExperimentConfig, seed: int | None = None, elite_fraction: float | None = None) -> RunLog:
    return train(cfg, cfg.experiment.seeds[0] if seed is None else seed, "demorl", elite_fraction)


def train_sac(cfg: ExperimentConfig, seed: int | None = None) -> RunLog:
    return train(cfg, cfg.experiment.seeds[0] if seed is None else seed, "sac")


@dataclass
class AblationRow:
    elite_fraction: float
    epochs_to_threshold: list[int | None]

    @property
    def median(self) -> float:
        """Median epochs with censored runs counted as +inf."""
        vals = [math.inf if v is None else v for v in self.epochs_to_threshold]
        return float(np.median(vals))


def ablate_elite(cfg: ExperimentConfig, fractions=None, seeds=None) -> tuple[list[AblationRow], dict[float, list[RunLog]]]:
    fractions = cfg.ablation_fractions if fractions is None else fractions
    seeds = cfg.experiment.seeds if seeds is None else seeds
    rows, logs = [], {}
    for p in fractions:
        runs = [train_demorl(cfg, s, elite_fraction=p) for s in seeds]
        logs[p] = runs
        rows.append(AblationRow(p, [r.epochs_to_threshold(cfg.experiment.threshold) for r in runs]))
    return rows, logs


# -- outputs ------------------------------------------------------------------

CSV_COLUMNS = [f.name for f in fields(LogRow)]
_INT_COLUMNS = {f.name for f in fields(LogRow) if f.type in (int, "int")}


def _cell(value, column: str) -> str:
    # plain Python numbers so numpy scalars do not leak their repr
    return repr(int(value) if column in _INT_COLUMNS else float(value))


def write_runs_csv(campaign: dict[str, list[RunLog]], path: str | Path) -> None:
    """Long-format CSV: ``label, algorithm, seed`` then the ``LogRow`` columns."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "algorithm", "seed", *CSV_COLUMNS])
        for label, runs in campaign.items():
            for run in runs:
                for r in run.rows:
                    w.writerow([label, run.algorithm, run.seed, *(_cell(getattr(r, c), c) for c in CSV_COLUMNS)])


def read_runs_csv(path: str | Path) -> dict[str, list[RunLog]]:
    campaign: dict[str, dict[tuple, RunLog]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["algorithm"], int(row["seed"]))
            runs = campaign.setdefault(row["label"], {})
            run = runs.setdefault(key, RunLog(*key))
            run.rows.append(LogRow(**{c: (int if c in _INT_COLUMNS else float)(row[c]) for c in CSV_COLUMNS}))
    return {label: list(runs.values()) for label, runs in campaign.items()}


def curve_band(runs: list[RunLog]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-epoch mean and population std of mean eval return across runs."""
    n = min(len(r.rows) for r in runs)
    data = np.array([r.returns()[:n] for r in runs])
    return np.arange(1, n + 1), data.mean(axis=0), data.std(axis=0)


def plot_curves(campaign: dict[str, list[RunLog]], path: str | Path, threshold: float | None = None) -> None:
    """Learning curves (mean over seeds, +-1 std band when >1 seed) as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, runs in campaign.items():
        if not any(r.rows for r in runs):
            continue
        epochs, mean, std = curve_band(runs)
        ax.plot(epochs, mean, label=label)
        if len(runs) > 1:
            ax.fill_between(epochs, mean - std, mean + std, alpha=0.25)
    if threshold is not None:
        ax.axhline(threshold, color="k", lw=0.8, ls="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean evaluation return")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def emit_outputs(campaign: dict[str, list[RunLog]], out_dir: str | Path, threshold: float | None = None) -> list[Path]:
    """Write ``run.csv`` (every run of the campaign) and ``curve.svg``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExperimentError(f"cannot create output directory {out}: {exc}") from exc
    if not any(run.rows for runs in campaign.values() for run in runs):
        raise ValueError("no run logs to emit")
    csv_path = out / "run.csv"
    write_runs_csv(campaign, csv_path)
    svg_path = out / "curve.svg"
    plot_curves(campaign, svg_path, threshold)
    return [csv_path, svg_path]
