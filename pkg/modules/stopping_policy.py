"""
Quasi-optimal stopping rule driven by a solved quantized chain.

At every jump n < N the observed (Z_n, S_n) is projected on Gamma_n and the
stage-(n+1) maximizer at that point gives the plan: intervene R hours later
unless another jump comes first, or keep waiting. Plans reset at each jump and
intervention is forced at the N-th jump. The decision only ever looks at
(n, Z_n, S_n), so the rule is a stopping time.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from modules.errors import ArtifactMismatchError, InputError, RangeError
from modules.pdmp_core import HybridState, PdmpModel, Trajectory, sample_inter_jump_time
from modules.quantizer import QuantizedChain
from modules.solver import Branch, SolveResult, StateReward
from utils.logger import setup_logger

logger = setup_logger("stopping_policy")

# --- CONFIGURATION ---
HOURS_PER_YEAR = 8760.0
DEFAULT_BIN_HOURS = HOURS_PER_YEAR
QUANTILE_LEVELS = (0.01, 0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95, 0.99)


class StopReason(str, Enum):
    PLANNED = "planned"
    FORCED = "forced-at-N"
    BOUNDARY = "boundary"


@dataclass(frozen=True)
class InterventionPlan:
    """``delay`` is None when the plan is to wait for the next jump."""

    issued_at_jump: int
    delay: float | None
    basis: int
    branch: Branch

    @property
    def defers(self) -> bool:
        return self.delay is None


@dataclass(frozen=True)
class PathEvent:
    time: float
    state: HybridState
    event: str


@dataclass(frozen=True)
class PolicyOutcome:
    stop_time: float
    stop_reason: StopReason
    stop_state: HybridState
    reward: float
    jumps: int
    seed: int | None = None
    path: tuple[PathEvent, ...] = field(default=(), compare=False, repr=False)

    @property
    def thickness_at_stop(self) -> float:
        return self.stop_state.position[0]

    def to_row(self) -> dict:
        return {
            "seed": self.seed,
            "stop_time_h": self.stop_time,
            "stop_reason": self.stop_reason.value,
            "thickness_mm": self.thickness_at_stop,
            "reward": self.reward,
            "jumps": self.jumps,
        }


@dataclass
class PolicySummary:
    runs: int
    mean_reward: float
    std_error: float
    quantiles: dict[float, float]
    histogram_edges: np.ndarray
    histogram_counts: np.ndarray
    exceedance: list[tuple[float, float]]
    reasons: dict[str, int]
    bin_hours: float


# --- OPERATIONS ---
def check_artifacts(model: PdmpModel, N: int, solve_result: SolveResult, chain: QuantizedChain) -> None:
    """Refuses grids or values built for another horizon, grid size or model."""
    if chain.horizon != N or solve_result.horizon != N:
        raise ArtifactMismatchError(
            f"Horizon mismatch: policy N={N}, grids N={chain.horizon}, values N={solve_result.horizon}"
        )
    if solve_result.size != chain.size:
        raise ArtifactMismatchError(f"Grid size mismatch: grids K={chain.size}, values K={solve_result.size}")
    expected = model.fingerprint()
    for name, labels in (("grids", chain.labels), ("values", solve_result.labels)):
        found = labels.get("model_hash")
        if found is not None and found != expected:
            raise ArtifactMismatchError(f"The {name} were built for another model ({found[:12]} != {expected[:12]})")
    if chain.labels.get("grid_hash") and solve_result.labels.get("grid_hash"):
        if chain.labels["grid_hash"] != solve_result.labels["grid_hash"]:
            raise ArtifactMismatchError("The values were solved on different grids")


def plan(n: int, observed, solve_result: SolveResult, chain: QuantizedChain) -> InterventionPlan:
    """Plan issued at jump ``n`` from the observed vector ``(Z_n, S_n)``."""
    if not 0 <= n < solve_result.horizon:
        raise RangeError(f"Plans exist for jumps 0..{solve_result.horizon - 1}, got {n}")
    basis = chain.project(n, observed)
    record = solve_result.stage(n + 1).record(basis)
    return InterventionPlan(n, record.best_time, basis, record.branch)


def plans_along(
    model: PdmpModel,
    trajectory: Trajectory,
    solve_result: SolveResult,
    chain: QuantizedChain,
) -> list[InterventionPlan]:
    """Plans that would be issued at each recorded jump of a trajectory."""
    plans = []
    for n, (state, s) in enumerate(trajectory.embedded_chain()):
        if n >= solve_result.horizon:
            break
        plans.append(plan(n, model.encode(state, s), solve_result, chain))
    return plans


def _state_reward(g: StateReward, state: HybridState) -> float:
    return float(np.asarray(g(np.array([state.mode, *state.position], dtype=float))))


def run_policy(
    model: PdmpModel,
    z0: HybridState,
    N: int,
    solve_result: SolveResult,
    chain: QuantizedChain,
    rng: np.random.Generator,
    g: StateReward,
    seed: int | None = None,
    record_path: bool = False,
) -> PolicyOutcome:
    """Simulates one trajectory under the quasi-optimal rule."""
    check_artifacts(model, N, solve_result, chain)
    state = z0
    clock = 0.0
    s_prev = 0.0
    path = [PathEvent(0.0, z0, "start")] if record_path else []

    def finish(stop_time, reason, stop_state, jumps):
        if record_path:
            path.append(PathEvent(stop_time, stop_state, "stop"))
        return PolicyOutcome(
            stop_time, reason, stop_state, _state_reward(g, stop_state), jumps, seed, tuple(path)
        )

    for n in range(N):
        if model.is_absorbing(state):
            return finish(clock, StopReason.BOUNDARY, state, n)
        current = plan(n, model.encode(state, s_prev), solve_result, chain)
        s, _ = sample_inter_jump_time(model, state, rng)
        if current.delay is not None and current.delay < s:
            return finish(clock + current.delay, StopReason.PLANNED, model.flow(state, current.delay), n)
        state = model.kernel(model.flow(state, s), rng)
        clock += s
        s_prev = s
        if record_path:
            path.append(PathEvent(clock, state, "jump"))

    reason = StopReason.BOUNDARY if model.is_absorbing(state) else StopReason.FORCED
    return finish(clock, reason, state, N)


def stop_time_distribution(outcomes: Sequence[PolicyOutcome]) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF of the stop times: sorted times and P(tau <= t)."""
    ordered = np.sort(np.array([o.stop_time for o in outcomes], dtype=float))
    return ordered, np.arange(1, ordered.size + 1) / ordered.size


def summarize_outcomes(
    outcomes: Sequence[PolicyOutcome],
    bin_hours: float = DEFAULT_BIN_HOURS,
    dates: Sequence[float] = (),
    levels: Sequence[float] = QUANTILE_LEVELS,
) -> PolicySummary:
    """
    Mean reward with its standard error and the law of the stop time.

    Args:
        outcomes: evaluated runs.
        bin_hours: histogram bin width.
        dates: hours at which P(tau <= t) is reported.
        levels: quantile levels.
    """
    if not outcomes:
        raise InputError("No outcomes to summarize")
    if not bin_hours > 0:
        raise InputError(f"Histogram bin width must be positive, got {bin_hours}")
    rewards = np.array([o.reward for o in outcomes])
    times = np.array([o.stop_time for o in outcomes])
    runs = rewards.size
    std_error = float(rewards.std(ddof=1) / math.sqrt(runs)) if runs > 1 else 0.0

    top = max(bin_hours, math.ceil(times.max() / bin_hours) * bin_hours)
    edges = np.arange(0.0, top + bin_hours / 2, bin_hours)
    counts, _ = np.histogram(times, bins=edges)
    ordered = np.sort(times)
    exceedance = [(float(t), float(np.searchsorted(ordered, t, side="right") / runs)) for t in dates]
    reasons: dict[str, int] = {}
    for outcome in outcomes:
        reasons[outcome.stop_reason.value] = reasons.get(outcome.stop_reason.value, 0) + 1

    return PolicySummary(
        runs=runs,
        mean_reward=float(rewards.mean()),
        std_error=std_error,
        quantiles={float(q): float(np.quantile(times, q)) for q in levels},
        histogram_edges=edges,
        histogram_counts=counts,
        exceedance=exceedance,
        reasons=reasons,
        bin_hours=float(bin_hours),
    )


def evaluate_policy(
    model: PdmpModel,
    initial: HybridState | Callable[[np.random.Generator], HybridState],
    N: int,
    solve_result: SolveResult,
    chain: QuantizedChain,
    g: StateReward,
    runs: int,
    rng: np.random.Generator,
    bin_hours: float = DEFAULT_BIN_HOURS,
    dates: Sequence[float] = (),
    record_paths: int = 0,
) -> tuple[PolicySummary, list[PolicyOutcome]]:
    """
    Monte Carlo evaluation of the rule over ``runs`` independent trajectories.

    Each run draws its own seed from ``rng``, so any single run can be replayed.
    A callable ``initial`` draws the starting state from the run's generator.
    """
    if runs < 1:
        raise InputError(f"runs must be at least 1, got {runs}")
    check_artifacts(model, N, solve_result, chain)
    seeds = rng.integers(0, 2**63 - 1, size=runs, dtype=np.int64)
    outcomes = []
    for k, seed in enumerate(seeds):
        run_rng = np.random.default_rng(int(seed))
        z0 = initial(run_rng) if callable(initial) else initial
        outcomes.append(
            run_policy(model, z0, N, solve_result, chain, run_rng, g, seed=int(seed), record_path=k < record_paths)
        )
    summary = summarize_outcomes(outcomes, bin_hours, dates)
    logger.info(f"Policy evaluated on {runs} runs: mean reward {summary.mean_reward:.6g} +/- {summary.std_error:.2g}")
    return summary, outcomes
