"""
Run configuration for OptiStop.

Values are resolved in this order, later sources winning:
built-in defaults (the corrosion study), a KEY=value config file read with
python-dotenv, OPTISTOP_<KEY> environment variables, command-line flags.
The resolved configuration is hashed so every artifact records what it was
built from.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from enum import IntEnum
from pathlib import Path

import numpy as np
from dotenv import dotenv_values

from modules.corrosion_model import (
    PUBLISHED_FAILURE_THRESHOLD,
    PUBLISHED_RATE_RANGES,
    PUBLISHED_SOJOURNS,
    PUBLISHED_TRANSITION_PERIODS,
    PUBLISHED_WEIBULL_SCALE,
    PUBLISHED_WEIBULL_SHAPE,
    CorrosionModel,
    CorrosionParams,
    ParameterUnits,
    RewardFunction,
    ThicknessReward,
    TransientMode,
)
from modules.errors import ConfigurationError, InputError
from modules.quantizer import StepSchedule
from modules.solver import TimeStepRule
from utils.logger import setup_logger

logger = setup_logger("config")

# --- CONFIGURATION ---
ENV_PREFIX = "OPTISTOP_"
SMALL_BUDGET = 100_000
LARGE_BUDGET = 1_000_000
LARGE_GRID = 1000


class Stage(IntEnum):
    """Spawn-key ids of the random streams."""

    SIMULATE = 0
    SCALES = 1
    TRAIN = 2
    EVALUATE = 3


@dataclass(frozen=True)
class RunConfig:
    # Horizon and grids
    horizon: int = 25
    grid_size: int = 1000
    k_ladder: tuple[int, ...] = (10, 50, 100, 200, 500, 1000)
    time_grid_points: int = 50
    time_step_rule: str = TimeStepRule.ADAPTIVE.value
    # Budgets (train_samples = 0 picks 10^5, or 10^6 from K = 1000 on)
    pilot_samples: int = 10_000
    train_samples: int = 0
    step_a: float = 1.0
    step_b: float = 0.0
    simulate_runs: int = 10_000
    sample_paths: int = 20
    evaluate_runs: int = 100_000
    report_paths: int = 5
    replicates: int = 1
    seed: int = 20240917
    output_dir: str = "runs"
    # Reports
    histogram_bin_hours: float = 8760.0
    exceedance_years: tuple[float, ...] = (5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 40.0)
    alpha: float = 0.05
    # Corrosion model, as printed; see param_units
    param_units: str = ParameterUnits.MEAN_HOURS.value
    transient: str = TransientMode.CONTINUOUS.value
    mean_sojourn_1: float = PUBLISHED_SOJOURNS[0]
    mean_sojourn_2: float = PUBLISHED_SOJOURNS[1]
    mean_sojourn_3: float = PUBLISHED_SOJOURNS[2]
    transition_period_1: float = PUBLISHED_TRANSITION_PERIODS[0]
    transition_period_2: float = PUBLISHED_TRANSITION_PERIODS[1]
    transition_period_3: float = PUBLISHED_TRANSITION_PERIODS[2]
    rate_low_1: float = PUBLISHED_RATE_RANGES[0][0]
    rate_high_1: float = PUBLISHED_RATE_RANGES[0][1]
    rate_low_2: float = PUBLISHED_RATE_RANGES[1][0]
    rate_high_2: float = PUBLISHED_RATE_RANGES[1][1]
    rate_low_3: float = PUBLISHED_RATE_RANGES[2][0]
    rate_high_3: float = PUBLISHED_RATE_RANGES[2][1]
    weibull_shape: float = PUBLISHED_WEIBULL_SHAPE
    weibull_scale: float = PUBLISHED_WEIBULL_SCALE
    failure_threshold: float = PUBLISHED_FAILURE_THRESHOLD
    reward_knots: str = "0:0;0.15:1;0.18:4;0.2:1;0.25:0"
    reward_beyond: float = 0.0

    # --- DERIVED OBJECTS ---
    def params(self) -> CorrosionParams:
        return CorrosionParams.from_published(
            units=ParameterUnits(self.param_units),
            sojourns=(self.mean_sojourn_1, self.mean_sojourn_2, self.mean_sojourn_3),
            transition_periods=(self.transition_period_1, self.transition_period_2, self.transition_period_3),
            rate_ranges=(
                (self.rate_low_1, self.rate_high_1),
                (self.rate_low_2, self.rate_high_2),
                (self.rate_low_3, self.rate_high_3),
            ),
            weibull_shape=self.weibull_shape,
            weibull_scale=self.weibull_scale,
            failure_threshold=self.failure_threshold,
            transient=TransientMode(self.transient),
        )

    def model(self) -> CorrosionModel:
        return CorrosionModel(self.params())

    def reward(self) -> RewardFunction:
        return RewardFunction.from_text(self.reward_knots, self.reward_beyond)

    def state_reward(self) -> ThicknessReward:
        return ThicknessReward(self.reward())

    def schedule(self) -> StepSchedule:
        return StepSchedule(self.step_a, self.step_b if self.step_b > 0 else None)

    def train_budget(self, K: int) -> int:
        if self.train_samples > 0:
            return self.train_samples
        return LARGE_BUDGET if K >= LARGE_GRID else SMALL_BUDGET

    # --- HASHES AND SEEDS ---
    def model_hash(self) -> str:
        return self.model().fingerprint()

    def grid_hash(self, K: int) -> str:
        return _digest({
            "model": self.model_hash(),
            "horizon": self.horizon,
            "K": K,
            "pilot_samples": self.pilot_samples,
            "train_samples": self.train_budget(K),
            "step_a": self.step_a,
            "step_b": self.step_b,
            "seed": self.seed,
        })

    def solve_hash(self, K: int) -> str:
        return _digest({
            "grids": self.grid_hash(K),
            "reward_knots": self.reward().to_text(),
            "reward_beyond": self.reward_beyond,
            "time_grid_points": self.time_grid_points,
            "time_step_rule": self.time_step_rule,
        })

    def stage_seed(self, stage: Stage, K: int = 0) -> np.random.SeedSequence:
        """Stream of a stage: SeedSequence(seed, spawn_key=(stage id, K))."""
        return np.random.SeedSequence(self.seed, spawn_key=(int(stage), int(K)))

    def rng(self, stage: Stage, K: int = 0) -> np.random.Generator:
        return np.random.default_rng(self.stage_seed(stage, K))

    # --- VALIDATION ---
    def problems(self) -> list[str]:
        """Human-readable problems; empty when the configuration is usable."""
        found = []
        for name in ("horizon", "grid_size", "time_grid_points", "pilot_samples", "simulate_runs",
                     "evaluate_runs", "replicates"):
            if getattr(self, name) < 1:
                found.append(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("train_samples", "sample_paths", "report_paths", "seed"):
            if getattr(self, name) < 0:
                found.append(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not self.k_ladder or any(k < 1 for k in self.k_ladder):
            found.append(f"k_ladder must list grid sizes of at least 1, got {self.k_ladder}")
        if self.time_step_rule not in {rule.value for rule in TimeStepRule}:
            found.append(f"time_step_rule must be 'adaptive' or 'global', got '{self.time_step_rule}'")
        if self.param_units not in {units.value for units in ParameterUnits}:
            found.append(f"param_units must be 'mean_hours' or 'per_hour', got '{self.param_units}'")
        if self.transient not in {mode.value for mode in TransientMode}:
            found.append(f"transient must be 'continuous' or 'restart', got '{self.transient}'")
        if not (self.step_a > 0 and self.step_b >= 0):
            found.append(f"step_a must be positive and step_b nonnegative, got {self.step_a}, {self.step_b}")
        if not (self.histogram_bin_hours > 0 and math.isfinite(self.histogram_bin_hours)):
            found.append(f"histogram_bin_hours must be positive, got {self.histogram_bin_hours}")
        if any(year < 0 for year in self.exceedance_years):
            found.append(f"exceedance_years must be nonnegative, got {self.exceedance_years}")
        if not 0 < self.alpha < 1:
            found.append(f"alpha must lie in (0, 1), got {self.alpha}")
        if not found:
            found.extend(self.params().problems())
        try:
            self.reward()
        except InputError as e:
            found.append(f"reward_knots: {e}")
        return found

    def validate(self) -> RunConfig:
        problems = self.problems()
        if problems:
            for problem in problems:
                logger.error(f"Config problem: {problem}")
            raise ConfigurationError("Invalid configuration: " + "; ".join(problems))
        return self

    # --- SERIALIZATION ---
    def to_dict(self) -> dict:
        return asdict(self)

    def to_env_text(self) -> str:
        """The configuration as a KEY=value file that load_config reads back."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            lines.append(f"{f.name.upper()}={value}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, **overrides) -> RunConfig:
        return replace(self, **{key: value for key, value in overrides.items() if value is not None})


def _digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse(name: str, text) -> object:
    kind = _FIELDS[name].type
    if text is None:
        raise ConfigurationError(f"Configuration key '{name}' has no value")
    if not isinstance(text, str):
        return text
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple[int, ...]":
            return tuple(int(item) for item in text.split(",") if item.strip())
        if kind == "tuple[float, ...]":
            return tuple(float(item) for item in text.split(",") if item.strip())
    except ValueError as e:
        raise ConfigurationError(f"Cannot read {name}={text!r} as {kind}") from e
    return text


def _from_mapping(values: dict, source: str) -> dict:
    parsed = {}
    for key, text in values.items():
        name = key.lower()
        if name not in _FIELDS:
            raise ConfigurationError(f"Unknown configuration key '{key}' in {source}")
        parsed[name] = _parse(name, text)
    return parsed


def load_config(
    path: str | Path | None = None,
    overrides: dict | None = None,
    environ: dict | None = None,
) -> RunConfig:
    """
    Resolves and validates a RunConfig.

    Args:
        path: optional KEY=value file.
        overrides: values from command-line flags; None entries are ignored.
        environ: environment mapping, os.environ by default.

    Returns:
        The validated configuration.
    """
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"Config file {path} does not exist")
        values.update(_from_mapping(dotenv_values(path), str(path)))

    environ = os.environ if environ is None else environ
    from_env = {
        key[len(ENV_PREFIX):]: value
        for key, value in environ.items()
        if key.startswith(ENV_PREFIX) and key[len(ENV_PREFIX):].lower() in _FIELDS
    }
    values.update(_from_mapping(from_env, "the environment"))

    for key, value in (overrides or {}).items():
        if value is not None:
            values.update(_from_mapping({key: value}, "the command line"))

    config = RunConfig(**values).validate()
    logger.debug(f"Resolved configuration {config.to_dict()}")
    return config
