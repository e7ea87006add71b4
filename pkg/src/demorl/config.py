"""Experiment configuration: nested dataclasses read from INI-style files.

Each dataclass below is one ``[section]`` of the file; keys are the field
names. Lists are comma separated. Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ExperimentSection:
    command: str = "train-demorl"
    env: str = "pendulum"
    seeds: tuple[int, ...] = (0,)
    epochs: int = 40
    env_steps_per_epoch: int = 400
    iterations_per_epoch: int = 8
    eval_episodes: int = 5
    threshold: float = -1000.0
    random_epochs: int = 1
    episode_length: int = 500


@dataclass
class ModelSection:
    ensemble_size: int = 5
    select: int = 3
    hidden: tuple[int, ...] = (64, 64)
    learning_rate: float = 1e-3
    epochs_per_round: int = 5
    batch_size: int = 256
    min_data: int = 250


@dataclass
class MpcSection:
    horizon: int = 30
    rollouts: int = 100
    alpha: float = 1.0
    elite_fraction: float = 0.1
    temperature: float = 1.0
    objective: str = "cem"
    shift: str = "policy_shift"
    sigma_scale: float = 0.3
    weighting: str = "exp"
    model_transitions_per_epoch: int = 4000
    use_value: bool = True


@dataclass
class SacSection:
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    learning_rate: float = 1e-3
    entropy_weight: float = 0.2
    tau: float = 0.005
    discount: float = 0.99
    batch_size: int = 256
    updates_per_epoch: int = 400
    union_ratio: float = 0.5
    env_capacity: int = 1_000_000
    mpc_capacity: int = 8_000


@dataclass
class ArsSection:
    step_size: float = 0.02
    noise: float = 0.03
    directions: int = 8
    top: int = 4
    iterations: int = 100
    normalize: bool = True
    accelerated: bool = False
    beta: float = 0.5
    mix: float = 0.7


@dataclass
class DemoLayerSection:
    mix: float = 0.5
    horizon: int = 120
    rollouts: int = 90
    elite_fraction: float = 0.1
    temperature: float = 1.0
    sigma_scale: float = 0.3
    model_source: str = "analytic_biased"
    length_bias: float = 1.2
    model_data: int = 5000  # random-action transitions for the learned model source
    policy: str = ""  # saved linear policy; empty trains one with [ars] on policy_env
    policy_env: str = "cartpole"
    policy_seed: int = 0


@dataclass
class RegretSection:
    dim: int = 1
    rounds: int = 1000
    step_scale: float = 0.5
    radius: float = 2.0
    sigma: float = 1.0
    curvature: float = 1.0
    target: str = "static"
    drift: float = 0.0
    grid: int = 200


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    model: ModelSection = field(default_factory=ModelSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    sac: SacSection = field(default_factory=SacSection)
    ars: ArsSection = field(default_factory=ArsSection)
    demolayer: DemoLayerSection = field(default_factory=DemoLayerSection)
    regret: RegretSection = field(default_factory=RegretSection)
    ablation_fractions: tuple[float, ...] = (0.01, 0.05, 0.1, 0.2, 0.5, 1.0)

    def validate(self) -> None:
        from .envs import ENVS

        e = self.experiment
        if e.env not in ENVS:
            raise ValueError(f"unknown env {e.env!r}; choose from {sorted(ENVS)}")
        for name in ("epochs", "env_steps_per_epoch", "eval_episodes"):
            if getattr(e, name) < 0:
                raise ValueError(f"experiment.{name} must be non-negative")
        if not e.seeds:
            raise ValueError("experiment.seeds must not be empty")
        if not 1 <= self.model.select <= self.model.ensemble_size:
            raise ValueError("model.select must lie in [1, ensemble_size]")
        for p in self.ablation_fractions:
            if not 0.0 < p <= 1.0:
                raise ValueError(f"elite fraction {p} outside (0, 1]")


def _convert(raw: str, tp):
    origin = typing.get_origin(tp)
    if origin is tuple:
        (inner, _) = typing.get_args(tp)
        return tuple(_convert(v.strip(), inner) for v in raw.split(",") if v.strip())
    if tp is bool:
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return tp(raw.strip())


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _sections(cfg: ExperimentConfig):
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            yield f.name, value


def load_config(path: str | Path | None = None, text: str | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    if path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    elif text is not None:
        parser.read_string(text)
    cfg = ExperimentConfig()
    sections = dict(_sections(cfg))
    for name in parser.sections():
        if name == "ablation":
            for key, raw in parser.items(name):
                if key != "fractions":
                    raise KeyError(f"unknown key ablation.{key}")
                cfg.ablation_fractions = _convert(raw, tuple[float, ...])
            continue
        if name == "meta":
            continue
        if name not in sections:
            raise KeyError(f"unknown config section [{name}]")
        obj = sections[name]
        hints = typing.get_type_hints(type(obj))
        for key, raw in parser.items(name):
            if key not in hints:
                raise KeyError(f"unknown key {name}.{key}")
            setattr(obj, key, _convert(raw, hints[key]))
    cfg.validate()
    return cfg


def dump_config(cfg: ExperimentConfig, meta: dict | None = None) -> str:
    parser = configparser.ConfigParser()
    if meta:
        parser["meta"] = {k: str(v) for k, v in meta.items()}
    for name, obj in _sections(cfg):
        parser[name] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    parser["ablation"] = {"fractions": _format(cfg.ablation_fractions)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
