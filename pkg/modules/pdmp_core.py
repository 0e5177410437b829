"""
Generic piecewise-deterministic Markov process (PDMP) machinery.

A model supplies its local characteristics (flow, jump intensity, post-jump
kernel and boundary time). This module integrates the intensity along the
flow, draws inter-jump times and builds trajectories together with their
embedded chain (Z_n, S_n), the only source of randomness of the process.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.integrate import quad
from scipy.optimize import bisect

from modules.errors import DomainError, NumericalError, RangeError
from utils.logger import setup_logger

logger = setup_logger("pdmp_core")

# --- CONFIGURATION ---
INFINITE_DURATION = math.inf
QUADRATURE_RTOL = 1e-8
INVERSION_RTOL = 1e-6
MAX_BRACKET_HOURS = 2.0 ** 80


class JumpCause(str, Enum):
    RANDOM = "random-jump"
    BOUNDARY = "boundary-jump"


@dataclass(frozen=True)
class HybridState:
    """Discrete mode plus Euclidean position."""

    mode: int
    position: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "mode", int(self.mode))
        object.__setattr__(self, "position", tuple(float(x) for x in self.position))

    def is_finite(self) -> bool:
        return all(math.isfinite(x) for x in self.position)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "position": list(self.position)}

    @classmethod
    def from_dict(cls, data: dict) -> HybridState:
        return cls(mode=data["mode"], position=tuple(data["position"]))


class PdmpModel(ABC):
    """
    Local characteristics (flow, intensity, kernel, boundary time) of a PDMP.

    Models are immutable after construction and can be shared between
    concurrent simulations; all randomness comes from the generator passed in.

    Array helpers work on "state rows" ``[mode, *position]``; the quantizer
    appends the inter-jump time to form chain vectors of length ``dimension + 2``.
    Subclasses override the array helpers when a vectorized form exists.
    """

    dimension: int = 1
    state_class: type[HybridState] = HybridState
    # Declares that lambda is constant along every flow line (closed-form Lambda).
    constant_intensity: bool = False

    @abstractmethod
    def flow(self, state: HybridState, t: float) -> HybridState:
        """Deterministic motion for a duration ``t >= 0``."""

    @abstractmethod
    def intensity(self, state: HybridState) -> float:
        """Jump rate at ``state``."""

    @abstractmethod
    def kernel(self, state: HybridState, rng: np.random.Generator) -> HybridState:
        """Draws the post-jump state from the pre-jump flow endpoint."""

    def boundary_time(self, state: HybridState) -> float:
        return INFINITE_DURATION

    def is_absorbing(self, state: HybridState) -> bool:
        return self.intensity(state) == 0.0 and math.isinf(self.boundary_time(state))

    def fingerprint(self) -> str:
        return type(self).__name__

    # --- ARRAY HELPERS ---
    def encode(self, state: HybridState, inter_jump: float = 0.0) -> np.ndarray:
        return np.array([state.mode, *state.position, inter_jump], dtype=float)

    def decode(self, row) -> HybridState:
        row = np.asarray(row, dtype=float)
        return self.state_class(mode=int(round(row[0])), position=tuple(row[1:1 + self.dimension]))

    def flow_points(self, rows, times) -> np.ndarray:
        """Flows state rows ``(k, 1+d)`` by ``times`` ``(k, T)``; returns ``(k, T, 1+d)``."""
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        times = np.asarray(times, dtype=float)
        if times.ndim == 1:
            times = np.broadcast_to(times, (rows.shape[0], times.size))
        out = np.empty((rows.shape[0], times.shape[1], 1 + self.dimension))
        for i, row in enumerate(rows):
            state = self.decode(row)
            for j, t in enumerate(times[i]):
                moved = self.flow(state, float(t))
                out[i, j, 0] = moved.mode
                out[i, j, 1:] = moved.position
        return out

    def boundary_times(self, rows) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        return np.array([self.boundary_time(self.decode(row)) for row in rows])

    def absorbing_mask(self, rows) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        return np.array([self.is_absorbing(self.decode(row)) for row in rows], dtype=bool)


@dataclass(frozen=True)
class JumpRecord:
    index: int
    jump_time: float
    post_jump_state: HybridState
    inter_jump: float
    cause: JumpCause

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "jump_time": self.jump_time,
            "post_jump_state": self.post_jump_state.to_dict(),
            "inter_jump": self.inter_jump,
            "cause": self.cause.value,
        }


@dataclass(frozen=True)
class Trajectory:
    """A simulated path, stored as its initial state and jump records."""

    initial: HybridState
    jumps: tuple[JumpRecord, ...]
    horizon: int
    model: PdmpModel | None = field(default=None, compare=False, repr=False)

    @property
    def jump_times(self) -> list[float]:
        return [jump.jump_time for jump in self.jumps]

    @property
    def last_time(self) -> float:
        return self.jumps[-1].jump_time if self.jumps else 0.0

    @property
    def absorbed(self) -> bool:
        return len(self.jumps) < self.horizon

    def embedded_chain(self) -> list[tuple[HybridState, float]]:
        """The list [(Z_n, S_n)] for n = 0..len(jumps), with S_0 = 0."""
        chain = [(self.initial, 0.0)]
        chain.extend((jump.post_jump_state, jump.inter_jump) for jump in self.jumps)
        return chain

    def chain_array(self, pad_to: int | None = None) -> np.ndarray:
        """
        Embedded chain as rows ``[mode, *position, S_n]``.

        Absorbed paths are padded with ``(Z_last, 0)`` up to ``pad_to`` jumps so
        every realization has the same number of stages.
        """
        model = self.model
        rows = [
            np.array([state.mode, *state.position, s]) if model is None else model.encode(state, s)
            for state, s in self.embedded_chain()
        ]
        if pad_to is not None:
            last_state = self.jumps[-1].post_jump_state if self.jumps else self.initial
            while len(rows) < pad_to + 1:
                rows.append(np.array([last_state.mode, *last_state.position, 0.0]))
        return np.vstack(rows)

    def to_dict(self) -> dict:
        return {
            "initial": self.initial.to_dict(),
            "horizon": self.horizon,
            "jumps": [jump.to_dict() for jump in self.jumps],
        }

    @classmethod
    def from_dict(cls, data: dict, model: PdmpModel | None = None) -> Trajectory:
        make = model.state_class.from_dict if model is not None else HybridState.from_dict
        jumps = tuple(
            JumpRecord(
                index=int(item["index"]),
                jump_time=float(item["jump_time"]),
                post_jump_state=make(item["post_jump_state"]),
                inter_jump=float(item["inter_jump"]),
                cause=JumpCause(item["cause"]),
            )
            for item in data["jumps"]
        )
        return cls(make(data["initial"]), jumps, int(data["horizon"]), model)


# --- OPERATIONS ---
def cumulative_intensity(model: PdmpModel, z: HybridState, t: float) -> float:
    """
    Lambda(z, t): the jump intensity integrated along the flow from ``z``.

    Exact when the model declares a constant intensity, adaptive quadrature
    otherwise.
    """
    t_star = model.boundary_time(z)
    if math.isnan(t) or t < 0 or t > t_star:
        raise DomainError(f"Cumulative intensity needs 0 <= t <= t*(z) = {t_star}, got t = {t}")
    if t == 0:
        return 0.0
    if model.constant_intensity:
        rate = model.intensity(z)
        return 0.0 if rate == 0.0 else rate * t
    value, _ = quad(
        lambda s: model.intensity(model.flow(z, s)),
        0.0,
        t,
        epsrel=QUADRATURE_RTOL,
        limit=200,
    )
    return float(value)


def sample_inter_jump_time(model: PdmpModel, z: HybridState, rng: np.random.Generator) -> tuple[float, JumpCause]:
    """
    Draws S with P(S > t) = exp(-Lambda(z, t)) for t < t*(z) and S = t*(z) otherwise.

    One standard exponential variate E is compared with Lambda(z, t*(z));
    below it, Lambda(z, S) = E is inverted.
    """
    if not z.is_finite():
        raise DomainError(f"State {z} is not finite")
    t_star = model.boundary_time(z)
    if math.isnan(t_star) or t_star < 0:
        raise DomainError(f"Boundary time {t_star} is invalid for state {z}")
    unit = float(rng.standard_exponential())

    if model.constant_intensity:
        rate = model.intensity(z)
        if rate > 0.0 and unit < rate * t_star:
            return _strictly_before(unit / rate, t_star), JumpCause.RANDOM
        return t_star, JumpCause.BOUNDARY

    if math.isfinite(t_star):
        total = cumulative_intensity(model, z, t_star)
        if unit >= total:
            return t_star, JumpCause.BOUNDARY
        upper = t_star
    else:
        upper = 1.0
        while (level := cumulative_intensity(model, z, upper)) < unit:
            upper *= 2.0
            if upper > MAX_BRACKET_HOURS:
                # The intensity dies out along the flow: no jump ever happens.
                return INFINITE_DURATION, JumpCause.BOUNDARY
        if level == unit:
            return upper, JumpCause.RANDOM

    s = bisect(
        lambda t: cumulative_intensity(model, z, t) - unit,
        0.0,
        upper,
        xtol=INVERSION_RTOL * upper,
    )
    return _strictly_before(float(s), t_star), JumpCause.RANDOM


def _strictly_before(s: float, t_star: float) -> float:
    # A random jump must land strictly before the boundary.
    return s if s < t_star else float(np.nextafter(t_star, 0.0))


def simulate(model: PdmpModel, z0: HybridState, N: int, rng: np.random.Generator) -> Trajectory:
    """Simulates up to ``N`` jumps; stops early only in an absorbing state."""
    if N < 1:
        raise DomainError(f"Horizon must be at least 1, got {N}")
    if not z0.is_finite():
        raise DomainError(f"Initial state {z0} is not finite")

    jumps: list[JumpRecord] = []
    z = z0
    clock = 0.0
    for n in range(1, N + 1):
        if model.is_absorbing(z):
            logger.debug(f"Trajectory absorbed after {n - 1} jumps")
            break
        s, cause = sample_inter_jump_time(model, z, rng)
        if not math.isfinite(s):
            raise NumericalError("Non-finite inter-jump time in a non-absorbing state", index=n)
        pre_jump = model.flow(z, s)
        z_next = model.kernel(pre_jump, rng)
        clock += s
        if not (math.isfinite(clock) and z_next.is_finite()):
            raise NumericalError("Non-finite state encountered during simulation", index=n)
        jumps.append(JumpRecord(n, clock, z_next, s, cause))
        z = z_next
    return Trajectory(z0, tuple(jumps), N, model)


def state_at(trajectory: Trajectory, t: float) -> HybridState:
    """Reconstructs the (right-continuous) state at time ``t`` from the jump records."""
    if math.isnan(t) or t < 0 or t > trajectory.last_time:
        raise RangeError(f"Time {t} is outside the simulated range [0, {trajectory.last_time}]")
    times = np.array([0.0, *trajectory.jump_times])
    index = int(np.searchsorted(times, t, side="right")) - 1
    base = trajectory.initial if index == 0 else trajectory.jumps[index - 1].post_jump_state
    elapsed = t - times[index]
    if elapsed == 0:
        return base
    if trajectory.model is None:
        raise RangeError("Trajectory carries no model; only jump instants can be reconstructed")
    return trajectory.model.flow(base, elapsed)
