"""Command line entry point: ``demorl <command> --config FILE --out DIR [--seed S]``.

Every command writes ``config.snapshot`` (the resolved config plus a version
stamp), ``run.csv`` and ``curve.svg`` into ``--out``. ``--seed`` replaces
the config's seed list with a single seed.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ars import ArsConfig, LinearPolicy, evaluate_policy, train_ars
from .config import ExperimentConfig, dump_config, load_config
from .demo_layer import DemoLayerConfig, biased_model, run_guided_episode, swing_up_success
from .ensemble import EnsembleModel, select_members, train_ensemble
from .envs import make_env
from .experiments import ExperimentError, ablate_elite, emit_outputs, train
from .mpc import MpcConfig
from .regret import (
    ToySpec,
    check_bound,
    per_round_check,
    loglog_slope,
    run_convex_tracking,
    write_regret_csv,
)
from .replay import ReplayBuffer

log = logging.getLogger("demorl")

COMMANDS = {
    "train-demorl": "train SAC accelerated by DMD-MPC model data",
    "train-sac": "train the plain SAC baseline",
    "train-ars": "train a linear policy with augmented random search",
    "run-demolayer": "compare guided and unguided episodes of a linear policy",
    "regret-check": "run the convex tracking toy and check the regret bound",
    "ablate-elite": "sweep the DMD-MPC elite fraction",
}


def version_stamp() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_table(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            # plain Python scalars so numpy types do not leak their repr
            fh.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row) + "\n")


def _plot_lines(path: Path, series: dict[str, tuple], xlabel: str, ylabel: str, loglog: bool = False) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (x, y) in series.items():
        ax.plot(x, y, label=label)
    if loglog:
        ax.set_xscale("log")
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# -- config to module objects --------------------------------------------------


def ars_config(cfg: ExperimentConfig) -> ArsConfig:
    a = cfg.ars
    return ArsConfig(a.step_size, a.noise, a.directions, a.top, a.accelerated, a.beta, a.mix)


def demo_layer_config(cfg: ExperimentConfig) -> DemoLayerConfig:
    d = cfg.demolayer
    mpc = MpcConfig(
        horizon=d.horizon,
        rollouts=d.rollouts,
        elite_fraction=d.elite_fraction,
        temperature=d.temperature,
        sigma_scale=d.sigma_scale,
        shift="policy_shift",
        discount=cfg.sac.discount,
    )
    return DemoLayerConfig(d.mix, mpc, d.model_source)


def toy_spec(cfg: ExperimentConfig) -> ToySpec:
    r = cfg.regret
    return ToySpec(r.dim, r.radius, r.sigma, r.curvature, r.target, r.drift, r.step_scale, r.grid)


def train_linear_policy(cfg: ExperimentConfig, env_name: str, seed: int) -> tuple[LinearPolicy, list[dict], list[float]]:
    env = make_env(env_name, episode_length=cfg.experiment.episode_length)
    policy = LinearPolicy.zeros(env.state_dim, env.action_low, env.action_high, cfg.ars.normalize)
    evals: list[float] = []
    eval_seed = np.random.SeedSequence([seed, 1])

    def record(i, p, report):
        evals.append(float(evaluate_policy(p, env, max(1, cfg.experiment.eval_episodes), eval_seed).mean()))

    policy, reports = train_ars(policy, env, ars_config(cfg), cfg.ars.iterations, seed, record)
    return policy, reports, evals


def learned_model(env, cfg: ExperimentConfig, seed: int):
    """Ensemble fit on random-action transitions of ``env``."""
    rng = np.random.default_rng(seed)
    n = cfg.demolayer.model_data
    buf = ReplayBuffer(env.state_dim, env.action_dim, n)
    state = env.reset(int(rng.integers(2**31)))
    for _ in range(n):
        u = rng.uniform(env.action_low, env.action_high)
        nxt, r, done = env.step(state, u)
        buf.push_batch(state.x[None], u[None], [r], nxt.x[None], [False])
        state = env.reset(int(rng.integers(2**31))) if done else nxt
    m = cfg.model
    model = EnsembleModel(env.state_dim, env.action_dim, m.ensemble_size, m.hidden, learning_rate=m.learning_rate, seed=seed)
    train_ensemble(model, buf, 10 * m.epochs_per_round, rng, m.batch_size, min_size=m.min_data)
    return model.planning_model(select_members(model, m.select))


# -- commands ---------------------------------------------------------------------


def _train(algorithm: str, cfg: ExperimentConfig, seeds, out: Path) -> list[str]:
    runs = []
    try:
        for s in seeds:
            runs.append(train(cfg, s, algorithm))
    except ExperimentError as exc:
        if exc.partial is not None and exc.partial.rows:
            runs.append(exc.partial)
        if any(r.rows for r in runs):
            emit_outputs({algorithm: runs}, out, cfg.experiment.threshold)
        raise
    emit_outputs({algorithm: runs}, out, cfg.experiment.threshold)
    thr = cfg.experiment.threshold
    return [
        f"{algorithm} seed {r.seed}: final return {r.rows[-1].mean_eval_return:.1f}, "
        f"epochs to {thr:g}: {r.epochs_to_threshold(thr) or 'not reached'}"
        for r in runs
        if r.rows
    ]


def cmd_train_demorl(cfg, seeds, out):
    return _train("demorl", cfg, seeds, out)


def cmd_train_sac(cfg, seeds, out):
    return _train("sac", cfg, seeds, out)


def cmd_train_ars(cfg, seeds, out):
    rows, series, lines = [], {}, []
    for s in seeds:
        policy, reports, evals = train_linear_policy(cfg, cfg.experiment.env, s)
        policy.save(out / f"policy_seed{s}.txt")
        for i, (rep, ev) in enumerate(zip(reports, evals), start=1):
            rows.append([s, i, rep["mean_return"], rep["max_return"], ev])
        series[f"seed {s}"] = (np.arange(1, len(evals) + 1), evals)
        lines.append(f"ars seed {s}: final evaluation return {evals[-1]:.1f}")
    _write_table(out / "run.csv", ["seed", "iteration", "mean_return", "max_return", "eval_return"], rows)
    _plot_lines(out / "curve.svg", series, "iteration", "evaluation return")
    return lines


def cmd_run_demolayer(cfg, seeds, out):
    d = cfg.demolayer
    env = make_env(cfg.experiment.env, episode_length=cfg.experiment.episode_length)
    if d.policy:
        policy = LinearPolicy.load(d.policy)
    else:
        policy, _, _ = train_linear_policy(cfg, d.policy_env, d.policy_seed)
        policy.save(out / "policy.txt")
    layer = demo_layer_config(cfg)
    plain = DemoLayerConfig(0.0, layer.mpc, layer.model_source)
    if d.model_source == "analytic_biased":
        model = biased_model(env, d.length_bias)
    else:
        model = learned_model(env, cfg, d.policy_seed)
    rows, series, lines = [], {}, []
    for s in seeds:
        base = run_guided_episode(policy, env, model, plain, s)
        guided = run_guided_episode(policy, env, model, layer, s)
        fallbacks = sum(st.fallback for st in guided.steps)
        ok_base, ok_guided = swing_up_success(env, base.states), swing_up_success(env, guided.states)
        rows.append([s, base.total_return, guided.total_return, int(ok_base), int(ok_guided), fallbacks])
        with open(out / f"steps_seed{s}.csv", "w") as fh:
            fh.write("t,u_rl,g,u\n")
            for t, st in enumerate(guided.steps):
                fh.write(f"{t},{' '.join(map(repr, st.u_rl.tolist()))},{' '.join(map(repr, st.g.tolist()))},{' '.join(map(repr, st.u.tolist()))}\n")
        if hasattr(env, "angle"):
            series[f"policy, seed {s}"] = (np.arange(len(base.states)), np.abs(env.angle(base.states)))
            series[f"guided, seed {s}"] = (np.arange(len(guided.states)), np.abs(env.angle(guided.states)))
        lines.append(
            f"seed {s}: policy return {base.total_return:.1f} (swing-up {ok_base}), "
            f"guided return {guided.total_return:.1f} (swing-up {ok_guided})"
        )
    _write_table(out / "run.csv", ["seed", "policy_return", "guided_return", "policy_success", "guided_success", "fallbacks"], rows)
    _plot_lines(out / "curve.svg", series, "step", "|angle from upright| (rad)")
    return lines


def cmd_regret_check(cfg, seeds, out):
    spec = toy_spec(cfg)
    rows, series, lines = [], {}, []
    for s in seeds:
        records, const = run_convex_tracking(cfg.regret.rounds, spec, s)
        write_regret_csv(records, out / f"regret_seed{s}.csv")
        report = check_bound(records, const, spec)
        per_round = per_round_check(records, const, spec)
        slope = loglog_slope(records)
        rows.append([s, len(records), records[-1].regret, records[-1].bound, int(report["all"]), int(per_round.all()), slope])
        t = np.array([r.t for r in records])
        series[f"regret, seed {s}"] = (t, np.array([r.regret for r in records]))
        series[f"bound, seed {s}"] = (t, report["bound"])
        lines.append(
            f"seed {s}: regret {records[-1].regret:.4g} <= bound {records[-1].bound:.4g} at every T: {report['all']}; "
            f"per-round inequality holds: {bool(per_round.all())}; log-log slope {slope:.3f}"
        )
    _write_table(out / "run.csv", ["seed", "rounds", "final_regret", "final_bound", "bound_holds", "per_round_holds", "slope"], rows)
    _plot_lines(out / "curve.svg", series, "round", "cumulative value", loglog=True)
    return lines


def cmd_ablate_elite(cfg, seeds, out):
    rows, logs = ablate_elite(cfg, seeds=list(seeds))
    emit_outputs({f"p={p:g}": runs for p, runs in logs.items()}, out, cfg.experiment.threshold)
    table = [[r.elite_fraction, *("censored" if v is None else v for v in r.epochs_to_threshold), r.median] for r in rows]
    _write_table(out / "ablation.csv", ["elite_fraction", *(f"seed{s}" for s in seeds), "median"], table)
    return [f"p={r.elite_fraction:g}: epochs to threshold {r.epochs_to_threshold}, median {r.median}" for r in rows]


HANDLERS = {
    "train-demorl": cmd_train_demorl,
    "train-sac": cmd_train_sac,
    "train-ars": cmd_train_ars,
    "run-demolayer": cmd_run_demolayer,
    "regret-check": cmd_regret_check,
    "ablate-elite": cmd_ablate_elite,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="demorl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=True, type=Path, help="INI experiment config")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, help="run only this seed")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        seeds = (args.seed,) if args.seed is not None else cfg.experiment.seeds
        args.out.mkdir(parents=True, exist_ok=True)
        meta = {"version": version_stamp(), "command": args.command, "seeds": ", ".join(map(str, seeds))}
        (args.out / "config.snapshot").write_text(dump_config(cfg, meta))
        for line in HANDLERS[args.command](cfg, seeds, args.out):
            print(line)
    except (OSError, ValueError, KeyError, configparser.Error, ExperimentError, FloatingPointError, RuntimeError) as exc:
        print(f"demorl {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
