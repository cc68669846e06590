"""Experiment configuration: a flat key = value text format with typed keys,
a validating parser, and deterministic seed expansion.

One nondimensional model time unit corresponds to two months (60 days), so
run lengths given in days convert via days / 60.  All randomness derives from
one master seed through named, counter-keyed streams, independent of ensemble
size and execution order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import model

DAYS_PER_TIME_UNIT = 60.0

# stage codes for the seed-splitting rule (recorded in run manifests)
STREAMS = {
    "truth_init": 0,
    "truth": 1,
    "observe": 2,
    "ensemble_init": 3,
    "forecast": 4,
    "analysis": 5,
    "agent_init": 6,
    "agent_epoch": 7,
}


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    # model
    gamma: float = 1.66
    q_tilde: float = 0.9
    h_bar: float = 0.22
    a_bar: float = 0.1
    n_grid: int = 64
    domain_length: float = 8.0 / 3.0
    dt: float = 0.001
    forcing: str = "homogeneous"
    # run lengths (days; one time unit = 60 days)
    spinup_days: float = 100.0
    run_days: float = 300.0
    # observations
    obs_variance: float = 0.0063
    obs_interval_steps: int = 20
    # ensemble filters
    ensemble_size: int = 50
    loc_cutoff: float = 6.0
    inflation: float = 1.0
    # constraints
    energy_min: float = 0.015
    energy_max: float = 0.08
    a_floor: float = 1e-6
    solver_tol: float = 1e-8
    solver_max_iters: int = 200
    # agents
    n_agents: int = 0  # 0: one agent per ensemble member
    epochs: int = 40
    rollout_epochs: int = 0
    batch_times: int = 8
    learning_rate: float = 1e-3
    lr_decay_epochs: float = 60.0
    feature_noise: float = 0.03
    amplitude_noise: float = 0.0
    predict_increment: bool = True
    hidden: tuple[int, ...] = (64, 64)
    spread_weight: float = 0.1
    lambda_init: float = 1.0
    alpha_lambda: float = 0.01
    beta: float = 0.001
    # evaluation-table day marks
    eval_days: tuple[float, ...] = (150.0, 210.0, 270.0, 300.0)
    # reproducibility
    seed: int = 20240601

    def __post_init__(self):
        if self.forcing not in ("homogeneous", "warm_pool", "warm-pool"):
            raise ConfigError(f"unknown forcing {self.forcing!r}")
        if self.ensemble_size < 2:
            raise ConfigError("ensemble_size must be >= 2")
        if self.obs_interval_steps < 1:
            raise ConfigError("obs_interval_steps must be >= 1")
        if self.run_days <= 0 or self.spinup_days < 0:
            raise ConfigError("run lengths must be positive")
        if not 0 < self.energy_min < self.energy_max:
            raise ConfigError("energy band must satisfy 0 < min < max")
        try:
            self.model_params()
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def model_params(self) -> model.ModelParams:
        return model.default_params(
            forcing=self.forcing.replace("-", "_"),
            n_grid=self.n_grid,
            dt=self.dt,
            gamma=self.gamma,
            q_tilde=self.q_tilde,
            h_bar=self.h_bar,
            a_bar=self.a_bar,
            domain_length=self.domain_length,
        )

    @property
    def assim_interval(self) -> float:
        return self.dt * self.obs_interval_steps

    @property
    def n_assim_steps(self) -> int:
        return int(round(self.run_days / DAYS_PER_TIME_UNIT / self.assim_interval))

    @property
    def spinup_steps(self) -> int:
        return int(round(self.spinup_days / DAYS_PER_TIME_UNIT / self.dt))

    @property
    def agent_count(self) -> int:
        return self.n_agents if self.n_agents > 0 else self.ensemble_size

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = list(val) if isinstance(val, tuple) else val
        return out


def _parse_value(name: str, text: str, example):
    text = text.strip()
    try:
        if isinstance(example, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(example, int):
            return int(text)
        if isinstance(example, float):
            return float(text)
        if isinstance(example, tuple):
            items = [t for t in text.replace(",", " ").split() if t]
            kind = type(example[0]) if example else float
            return tuple(kind(t) for t in items)
        return text
    except ValueError as err:
        raise ConfigError(f"key {name!r}: cannot parse {text!r}") from err


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse the flat key = value format; '#' starts a comment.  Unknown keys
    are rejected.  overrides (already typed) win over file values."""
    defaults = ExperimentConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(defaults)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, val, known[key])
    if overrides:
        for key, val in overrides.items():
            if val is not None:
                values[key] = val
    try:
        return ExperimentConfig(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from err


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_config(text, overrides)


def config_text(config: ExperimentConfig) -> str:
    lines = ["# experiment configuration (key = value)"]
    for key, val in config.as_dict().items():
        if isinstance(val, list):
            val = ", ".join(str(v) for v in val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def rng_for(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """Named deterministic stream from the master seed.

    Streams are keyed by (stream code, index), so per-member streams do not
    depend on the ensemble size or on execution order.
    """
    code = STREAMS[stream]
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(code, index))
    )
