"""Experiment configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from otblab.baselines import BASELINE_KINDS
from otblab.estimators import ESTIMATOR_FORMS
from otblab.policy import POLICY_KINDS, Policy
from otblab.rewards import REWARD_KINDS, RewardModel
from otblab.harness.rng import INSTANCE, derive_seed


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    kind: str = "tabular"
    vocab_size: int = 3
    t_max: int = 5
    feature_dim: int = 4
    init: str = "gaussian"
    sigma: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class RewardConfig:
    kind: str = "terminal_target"
    target: int = 2
    pattern: tuple = ()
    table: tuple = ()
    value: float = 1.0


@dataclass(frozen=True)
class EstimatorConfig:
    form: str = "causal"
    baseline: str = "otb"
    clip: float = 2.0
    exclude_self: bool = False


@dataclass(frozen=True)
class RunConfig:
    group_size: int = 8
    batch_groups: int = 1
    steps: int = 500
    learning_rate: float = 2.0
    seeds: tuple = (0, 1, 2, 3, 4)
    mc_batches: int = 2000
    n_sweep: tuple = (2, 4, 8, 16)
    compare_kinds: tuple = BASELINE_KINDS
    window: int = 0


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"
    format: str = "csv+svg"
    record: bool = False


@dataclass(frozen=True)
class DebugConfig:
    # negative control for `verify`: plug -B*_t into the stationarity check
    negate_otb: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    run: RunConfig = field(default_factory=RunConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    debug: DebugConfig = field(default_factory=DebugConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, seed: int | None = None, out: str | None = None,
                       fmt: str | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, run=replace(cfg.run, seeds=(int(seed),)))
        if out is not None:
            cfg = replace(cfg, output=replace(cfg.output, dir=str(out)))
        if fmt is not None:
            cfg = replace(cfg, output=replace(cfg.output, format=fmt))
        validate(cfg)
        return cfg


SECTIONS = {
    "policy": PolicyConfig,
    "reward": RewardConfig,
    "estimator": EstimatorConfig,
    "run": RunConfig,
    "output": OutputConfig,
    "debug": DebugConfig,
}


def _section(cls, data: dict, name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        default = known[key].default
        if isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{name}.{key} must be a list")
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{name}.{key} must be a boolean")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name}.{key} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{key} must be a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{name}.{key} must be a string")
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    cfg = ExperimentConfig(**{k: _section(SECTIONS[k], v, k) for k, v in data.items()})
    validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
        validate(cfg)
        return cfg
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return config_from_dict(data)


def validate(cfg: ExperimentConfig) -> None:
    p, r, e, run, out = cfg.policy, cfg.reward, cfg.estimator, cfg.run, cfg.output
    if p.kind not in POLICY_KINDS:
        raise ConfigError(f"policy.kind must be one of {POLICY_KINDS}")
    if p.init not in ("zeros", "gaussian"):
        raise ConfigError("policy.init must be 'zeros' or 'gaussian'")
    if p.vocab_size < 2 or p.t_max < 1 or p.feature_dim < 1 or p.sigma < 0:
        raise ConfigError("policy sizes must be positive (vocab_size >= 2)")
    if r.kind not in REWARD_KINDS:
        raise ConfigError(f"reward.kind must be one of {REWARD_KINDS}")
    if e.form not in ESTIMATOR_FORMS:
        raise ConfigError(f"estimator.form must be one of {ESTIMATOR_FORMS}")
    if e.baseline not in BASELINE_KINDS:
        raise ConfigError(f"estimator.baseline must be one of {BASELINE_KINDS}")
    bad = [k for k in run.compare_kinds if k not in BASELINE_KINDS]
    if bad:
        raise ConfigError(f"run.compare_kinds has unknown kinds: {bad}")
    if e.clip <= 0:
        raise ConfigError("estimator.clip must be positive")
    if run.group_size < 2 or any(n < 2 for n in run.n_sweep):
        raise ConfigError("group sizes must be >= 2")
    if run.learning_rate < 0:
        raise ConfigError("run.learning_rate must be >= 0")
    if run.batch_groups < 1 or run.steps < 0 or run.mc_batches < 1 or not run.seeds:
        raise ConfigError("run.batch_groups, run.mc_batches and run.seeds must be positive")
    if any(s < 0 for s in run.seeds):
        raise ConfigError("seeds must be nonnegative")
    if out.format not in ("csv", "csv+svg"):
        raise ConfigError("output.format must be 'csv' or 'csv+svg'")
    try:
        reward_model(cfg)
    except ValueError as exc:
        raise ConfigError(f"reward: {exc}") from None


def reward_model(cfg: ExperimentConfig) -> RewardModel:
    r = cfg.reward
    if r.kind == "terminal_target":
        return RewardModel.terminal_target(r.target, r.value)
    if r.kind == "terminal_pattern":
        return RewardModel.terminal_pattern(r.pattern, r.value)
    return RewardModel.dense(r.table)


def instance_policy(cfg: ExperimentConfig, seed: int) -> Policy:
    """Policy for one run seed; gaussian inits draw from a per-seed stream."""
    p = cfg.policy
    return Policy.create(
        p.kind, p.vocab_size, p.t_max,
        feature_dim=p.feature_dim, init=p.init, sigma=p.sigma,
        seed=derive_seed(p.seed, INSTANCE, seed),
    )
