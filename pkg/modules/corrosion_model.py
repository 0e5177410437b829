"""
Corrosion of a small metallic structure stored in three successive environments.

The structure cycles workshop (mode 1) -> submarine in operation (mode 2) ->
dry-dock (mode 3) -> workshop, staying an exponential time in each. Thickness
loss starts once the initial anti-corrosion protection (Weibull distributed)
is gone, then follows a transient law whose transition period depends on the
environment; a fresh corrosion rate is drawn at every change of environment.

State rows are ``[mode, thickness d (mm), protection clock c (h), rate rho (mm/h)]``.
The clock is positive while protection remains and counts the hours of active
corrosion (negatively) afterwards, which makes the flow an exact semigroup.
By default the kernel carries the clock across jumps, so the corrosion transient
keeps its progress in the next environment; with ``TransientMode.RESTART`` the
kernel clips it at zero and the transient starts over at every change of
environment. Reaching the failure threshold is a deterministic jump into the
absorbing failed mode.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np
from scipy.special import lambertw

from modules.errors import ConfigurationError, DomainError, InputError
from modules.pdmp_core import INFINITE_DURATION, HybridState, PdmpModel
from utils.logger import setup_logger

logger = setup_logger("corrosion_model")

# --- CONFIGURATION ---
FAILED_MODE = 0
WORKING_MODES = (1, 2, 3)
BOUNDARY_TOLERANCE_MM = 1e-9
NEWTON_STEPS = 4

# Published values. Sojourn parameters and the Weibull scale are printed as
# rates but only make sense as durations in hours; see ParameterUnits.
PUBLISHED_SOJOURNS = (17520.0, 131400.0, 8760.0)
PUBLISHED_TRANSITION_PERIODS = (30000.0, 200000.0, 40000.0)
PUBLISHED_RATE_RANGES = ((1e-6, 1e-5), (1e-7, 1e-6), (1e-6, 1e-5))
PUBLISHED_WEIBULL_SHAPE = 2.5
PUBLISHED_WEIBULL_SCALE = 11800.0
PUBLISHED_FAILURE_THRESHOLD = 0.2


class ParameterUnits(str, Enum):
    MEAN_HOURS = "mean_hours"
    PER_HOUR = "per_hour"


class TransientMode(str, Enum):
    CONTINUOUS = "continuous"
    RESTART = "restart"


@dataclass(frozen=True)
class EnvironmentParams:
    mean_sojourn: float
    transition_period: float
    rate_low: float
    rate_high: float

    @property
    def intensity(self) -> float:
        return 1.0 / self.mean_sojourn

    def problems(self, label: str) -> list[str]:
        found = []
        for name in ("mean_sojourn", "transition_period", "rate_low", "rate_high"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                found.append(f"{label}: {name} must be positive and finite, got {value}")
        if self.rate_low >= self.rate_high:
            found.append(f"{label}: rate_low ({self.rate_low}) must be below rate_high ({self.rate_high})")
        return found


@dataclass(frozen=True)
class CorrosionParams:
    envs: tuple[EnvironmentParams, EnvironmentParams, EnvironmentParams]
    weibull_shape: float = PUBLISHED_WEIBULL_SHAPE
    weibull_scale: float = PUBLISHED_WEIBULL_SCALE
    failure_threshold: float = PUBLISHED_FAILURE_THRESHOLD
    transient: str = TransientMode.CONTINUOUS.value

    def env(self, mode: int) -> EnvironmentParams:
        if mode not in WORKING_MODES:
            raise DomainError(f"Mode {mode} has no environment parameters")
        return self.envs[mode - 1]

    def problems(self) -> list[str]:
        found = []
        if len(self.envs) != len(WORKING_MODES):
            found.append(f"Expected {len(WORKING_MODES)} environments, got {len(self.envs)}")
        for mode, env in zip(WORKING_MODES, self.envs):
            found.extend(env.problems(f"environment {mode}"))
        for name in ("weibull_shape", "weibull_scale", "failure_threshold"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                found.append(f"{name} must be positive and finite, got {value}")
        if self.transient not in {mode.value for mode in TransientMode}:
            found.append(f"transient must be 'continuous' or 'restart', got '{self.transient}'")
        return found

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_published(
        cls,
        units: ParameterUnits = ParameterUnits.MEAN_HOURS,
        sojourns: tuple[float, float, float] = PUBLISHED_SOJOURNS,
        transition_periods: tuple[float, float, float] = PUBLISHED_TRANSITION_PERIODS,
        rate_ranges: tuple[tuple[float, float], ...] = PUBLISHED_RATE_RANGES,
        weibull_shape: float = PUBLISHED_WEIBULL_SHAPE,
        weibull_scale: float = PUBLISHED_WEIBULL_SCALE,
        failure_threshold: float = PUBLISHED_FAILURE_THRESHOLD,
        transient: TransientMode = TransientMode.CONTINUOUS,
    ) -> CorrosionParams:
        """Builds parameters from values as printed, read either as hours or as rates per hour."""
        units = ParameterUnits(units)
        if units is ParameterUnits.PER_HOUR:
            sojourns = tuple(1.0 / value for value in sojourns)
            weibull_scale = 1.0 / weibull_scale
        envs = tuple(
            EnvironmentParams(float(mean), float(eta), float(low), float(high))
            for mean, eta, (low, high) in zip(sojourns, transition_periods, rate_ranges)
        )
        return cls(
            envs, float(weibull_shape), float(weibull_scale), float(failure_threshold), TransientMode(transient).value
        )


DEFAULT_PARAMS = CorrosionParams.from_published()


@dataclass(frozen=True)
class CorrosionState(HybridState):
    """Hybrid state ``(m, d, c, rho)`` of the corrosion process."""

    @classmethod
    def build(cls, mode: int, thickness: float, protection: float, rate: float) -> CorrosionState:
        return cls(mode=mode, position=(thickness, protection, rate))

    @property
    def thickness(self) -> float:
        return self.position[0]

    @property
    def protection_clock(self) -> float:
        return self.position[1]

    @property
    def protection_remaining(self) -> float:
        return max(0.0, self.position[1])

    @property
    def rate(self) -> float:
        return self.position[2]

    @property
    def failed(self) -> bool:
        return self.mode == FAILED_MODE


# --- REWARD ---
@dataclass(frozen=True)
class RewardFunction:
    """Piecewise-affine reward of the thickness loss, constant beyond the last knot."""

    knots: tuple[tuple[float, float], ...]
    beyond: float = 0.0

    def __post_init__(self):
        knots = tuple((float(x), float(y)) for x, y in self.knots)
        if not knots:
            raise InputError("A reward function needs at least one knot")
        xs = [x for x, _ in knots]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise InputError(f"Reward knot abscissae must be strictly increasing, got {xs}")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "beyond", float(self.beyond))

    def __call__(self, d):
        xs = np.array([x for x, _ in self.knots])
        ys = np.array([y for _, y in self.knots])
        values = np.interp(d, xs, ys, left=ys[0], right=self.beyond)
        return float(values) if np.ndim(values) == 0 else values

    @property
    def maximum(self) -> float:
        return max(max(y for _, y in self.knots), self.beyond)

    @property
    def minimum(self) -> float:
        return min(min(y for _, y in self.knots), self.beyond)

    def to_text(self) -> str:
        return ";".join(f"{x!r}:{y!r}" for x, y in self.knots)

    @classmethod
    def from_text(cls, text: str, beyond: float = 0.0) -> RewardFunction:
        """Parses ``"d:g;d:g;..."``."""
        knots = []
        for item in text.split(";"):
            item = item.strip()
            if not item:
                continue
            try:
                x, y = item.split(":")
                knots.append((float(x), float(y)))
            except ValueError as e:
                raise InputError(f"Malformed reward knot '{item}' (expected 'thickness:value')") from e
        return cls(tuple(knots), beyond)


DEFAULT_REWARD = RewardFunction(((0.0, 0.0), (0.15, 1.0), (0.18, 4.0), (0.20, 1.0), (0.25, 0.0)), 0.0)


def reward(g: RewardFunction, d: float) -> float:
    if d < 0:
        raise DomainError(f"Thickness loss must be nonnegative, got {d}")
    return g(d)


class ThicknessReward:
    """Evaluates a thickness reward on state rows ``[..., mode, d, c, rho]``."""

    def __init__(self, g: RewardFunction, column: int = 1):
        self.g = g
        self.column = column

    def __call__(self, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=float)
        return np.asarray(self.g(rows[..., self.column]), dtype=float)


# --- FLOW ---
def thickness_increment(rho: float, gamma: float, eta: float, t: float) -> float:
    """Thickness lost after ``t`` hours from a fresh start with ``gamma`` hours of protection left."""
    if min(rho, gamma, eta, t) < 0:
        raise DomainError(f"Arguments must be nonnegative: rho={rho}, gamma={gamma}, eta={eta}, t={t}")
    if rho == 0 or eta == 0:
        raise DomainError(f"rho and eta must be positive: rho={rho}, eta={eta}")
    if t <= gamma:
        return 0.0
    active = t - gamma
    return rho * (active + eta * math.expm1(-active / eta))


def _active_loss(rate, clock, eta, duration):
    """Vectorized thickness lost over ``duration`` from protection clock ``clock``."""
    start = np.maximum(clock, 0.0)
    active = np.maximum(duration - start, 0.0)
    lag = (start - clock) / eta
    loss = rate * (active + eta * np.exp(-lag) * np.expm1(-active / eta))
    return np.where(active > 0.0, loss, 0.0)


def _time_to_threshold(thickness, clock, rate, eta, threshold):
    """
    Vectorized hitting time of ``threshold`` along the flow.

    With x = (t - c)/eta the condition reads x + expm1(-x) = excess, whose root on
    the increasing branch is 1 + excess + W0(-exp(-1 - excess)). W0 loses accuracy
    next to -1/e (small excess), so the root starts no lower than the bound
    max(lag, excess, sqrt(2 excess)) and is polished by Newton steps.
    """
    thickness, clock, rate, eta = np.broadcast_arrays(
        np.asarray(thickness, float), np.asarray(clock, float), np.asarray(rate, float), np.asarray(eta, float)
    )
    gap = np.maximum(threshold - thickness, 0.0)
    start = np.maximum(clock, 0.0)
    lag = (start - clock) / eta
    excess = np.maximum(gap / (rate * eta) + lag + np.expm1(-lag), 0.0)
    with np.errstate(invalid="ignore", over="ignore"):
        root = 1.0 + excess + np.real(lambertw(-np.exp(-1.0 - excess), k=0))
    floor = np.maximum(lag, np.maximum(excess, np.sqrt(2.0 * excess)))
    root = np.where(np.isfinite(root), np.maximum(root, floor), floor)
    for _ in range(NEWTON_STEPS):
        slope = -np.expm1(-root)
        residual = root + np.expm1(-root) - excess
        root = root - np.where(slope > 0.0, residual / np.where(slope > 0.0, slope, 1.0), 0.0)
    hours = np.maximum(clock + eta * np.maximum(root, floor), start)
    return np.where(threshold - thickness <= BOUNDARY_TOLERANCE_MM, 0.0, hours)


def corrosion_flow(state: CorrosionState, t: float, params: CorrosionParams = DEFAULT_PARAMS) -> CorrosionState:
    if t < 0:
        raise DomainError(f"Flow duration must be nonnegative, got {t}")
    if state.mode == FAILED_MODE:
        return state
    eta = params.env(state.mode).transition_period
    loss = float(_active_loss(state.rate, state.protection_clock, eta, t))
    return CorrosionState.build(state.mode, state.thickness + loss, state.protection_clock - t, state.rate)


def boundary_time(state: CorrosionState, params: CorrosionParams = DEFAULT_PARAMS) -> float:
    """Hours until the thickness loss reaches the failure threshold (infinite once failed)."""
    if state.mode == FAILED_MODE:
        return INFINITE_DURATION
    eta = params.env(state.mode).transition_period
    return float(_time_to_threshold(state.thickness, state.protection_clock, state.rate, eta, params.failure_threshold))


def sojourn_intensity(state: CorrosionState, params: CorrosionParams = DEFAULT_PARAMS) -> float:
    if state.mode == FAILED_MODE:
        return 0.0
    return params.env(state.mode).intensity


# --- RANDOMNESS ---
def sample_initial(params: CorrosionParams, rng: np.random.Generator) -> CorrosionState:
    """New structure in the workshop: Weibull protection by inverse transform, uniform rate."""
    protection = params.weibull_scale * (-math.log1p(-rng.random())) ** (1.0 / params.weibull_shape)
    env = params.env(1)
    rate = float(rng.uniform(env.rate_low, env.rate_high))
    return CorrosionState.build(1, 0.0, protection, rate)


def post_jump_kernel(
    state: CorrosionState, rng: np.random.Generator, params: CorrosionParams = DEFAULT_PARAMS
) -> CorrosionState:
    """Next environment with a fresh rate, or the failed mode once the threshold is reached.

    The protection clock carries over; the restart reading clips it at zero.
    """
    if state.mode == FAILED_MODE:
        return state
    clock = state.protection_clock
    if params.transient == TransientMode.RESTART.value:
        clock = max(clock, 0.0)
    if state.thickness >= params.failure_threshold - BOUNDARY_TOLERANCE_MM:
        return CorrosionState.build(FAILED_MODE, params.failure_threshold, clock, state.rate)
    mode = state.mode % len(WORKING_MODES) + 1
    env = params.env(mode)
    return CorrosionState.build(mode, state.thickness, clock, float(rng.uniform(env.rate_low, env.rate_high)))


class CorrosionModel(PdmpModel):
    """The corrosion process as a PDMP with piecewise-constant intensity."""

    dimension = 3
    state_class = CorrosionState
    constant_intensity = True

    def __init__(self, params: CorrosionParams = DEFAULT_PARAMS):
        problems = params.problems()
        if problems:
            raise ConfigurationError("Invalid corrosion parameters: " + "; ".join(problems))
        self.params = params
        # Lookup tables indexed by mode; index 0 is the failed mode.
        self._intensity = np.array([0.0, *(env.intensity for env in params.envs)])
        self._eta = np.array([1.0, *(env.transition_period for env in params.envs)])
        self._rate_low = np.array([0.0, *(env.rate_low for env in params.envs)])
        self._rate_high = np.array([0.0, *(env.rate_high for env in params.envs)])

    def flow(self, state, t):
        return corrosion_flow(state, t, self.params)

    def intensity(self, state):
        return sojourn_intensity(state, self.params)

    def kernel(self, state, rng):
        return post_jump_kernel(state, rng, self.params)

    def boundary_time(self, state):
        return boundary_time(state, self.params)

    def is_absorbing(self, state):
        return state.mode == FAILED_MODE

    def sample_initial(self, rng: np.random.Generator) -> CorrosionState:
        return sample_initial(self.params, rng)

    def fingerprint(self) -> str:
        payload = json.dumps({"model": "corrosion", "params": self.params.to_dict()}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    # --- VECTORIZED HELPERS ---
    def _modes(self, rows) -> np.ndarray:
        return np.clip(np.rint(rows[:, 0]).astype(int), FAILED_MODE, len(WORKING_MODES))

    def flow_points(self, rows, times):
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        times = np.asarray(times, dtype=float)
        if times.ndim == 1:
            times = np.broadcast_to(times, (rows.shape[0], times.size))
        modes = self._modes(rows)
        failed = (modes == FAILED_MODE)[:, None]
        thickness, clock, rate = (rows[:, k][:, None] for k in (1, 2, 3))
        loss = _active_loss(rate, clock, self._eta[modes][:, None], times)
        out = np.empty((rows.shape[0], times.shape[1], 4))
        out[..., 0] = modes[:, None]
        out[..., 1] = np.where(failed, thickness, thickness + loss)
        out[..., 2] = np.where(failed, clock, clock - times)
        out[..., 3] = rate
        return out

    def boundary_times(self, rows):
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        modes = self._modes(rows)
        hours = _time_to_threshold(rows[:, 1], rows[:, 2], rows[:, 3], self._eta[modes], self.params.failure_threshold)
        return np.where(modes == FAILED_MODE, INFINITE_DURATION, hours)

    def absorbing_mask(self, rows):
        return self._modes(np.atleast_2d(np.asarray(rows, dtype=float))) == FAILED_MODE

    def sample_chains(self, runs: int, horizon: int, rng: np.random.Generator) -> np.ndarray:
        """
        Draws ``runs`` independent embedded chains at once.

        Returns an array ``(runs, horizon + 1, 5)`` of rows ``[m, d, c, rho, S]``;
        absorbed chains are padded with ``(Z_failed, 0)``.
        """
        p = self.params
        restart = p.transient == TransientMode.RESTART.value
        chains = np.empty((runs, horizon + 1, 5))
        mode = np.ones(runs, dtype=int)
        thickness = np.zeros(runs)
        clock = p.weibull_scale * (-np.log1p(-rng.random(runs))) ** (1.0 / p.weibull_shape)
        rate = rng.uniform(self._rate_low[1], self._rate_high[1], size=runs)
        chains[:, 0] = np.column_stack([mode, thickness, clock, rate, np.zeros(runs)])

        for n in range(1, horizon + 1):
            failed = mode == FAILED_MODE
            eta = self._eta[mode]
            t_star = np.where(
                failed, INFINITE_DURATION, _time_to_threshold(thickness, clock, rate, eta, p.failure_threshold)
            )
            unit = rng.standard_exponential(runs)
            intensity = self._intensity[mode]
            with np.errstate(divide="ignore", invalid="ignore"):
                boundary = ~failed & ~(unit < intensity * t_star)
                random_time = np.minimum(unit / np.where(failed, 1.0, intensity), np.nextafter(t_star, 0.0))
            sojourn = np.where(failed, 0.0, np.where(boundary, t_star, random_time))

            thickness_pre = thickness + _active_loss(rate, clock, eta, sojourn)
            fails = ~failed & (boundary | (thickness_pre >= p.failure_threshold - BOUNDARY_TOLERANCE_MM))
            next_mode = np.where(failed | fails, FAILED_MODE, mode % len(WORKING_MODES) + 1)
            fresh_rate = rng.uniform(self._rate_low[next_mode], self._rate_high[next_mode])

            thickness = np.where(failed, thickness, np.where(fails, p.failure_threshold, thickness_pre))
            clock = np.where(failed, clock, clock - sojourn)
            if restart:
                clock = np.maximum(clock, 0.0)
            rate = np.where(next_mode == FAILED_MODE, rate, fresh_rate)
            mode = next_mode
            chains[:, n] = np.column_stack([mode, thickness, clock, rate, sojourn])
        return chains
