"""
Backward dynamic programming on the quantized chain.

Stage n maps values w on Gamma_n to values on Gamma_{n-1} through the
discretized operator

    L(w, g)(z) = max_u E[w(Z_n) 1{S_n < u} + g(flow(z, u)) 1{S_n >= u}]  v  E[w(Z_n)]

where u runs over a time grid adapted to the boundary time t*(z) and the
expectations are finite sums over the transition rows. Starting from
v_N = g on Gamma_N, the recursion yields the value at time zero together
with the maximizer (u*, branch) of every grid point, which is all the
stopping policy needs at run time.
"""

from __future__ import annotations

import math
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from modules.errors import ConfigurationError, InputError, NumericalError, RangeError
from modules.pdmp_core import PdmpModel
from modules.quantizer import QuantizedChain, nearest
from utils.logger import setup_logger

logger = setup_logger("solver")

# --- CONFIGURATION ---
DEFAULT_TARGET_POINTS = 50
# Stopping must beat continuing by more than this (relative) margin.
TIE_TOLERANCE = 1e-12
# Bounds the (points x times) block evaluated at once.
EVALUATION_CELLS = 500_000

# Reward on state rows [..., mode, *position] -> values [...]
StateReward = Callable[[np.ndarray], np.ndarray]


class Branch(str, Enum):
    STOP = "stop-at-u*"
    CONTINUE = "continue"


class TimeStepRule(str, Enum):
    GLOBAL = "global"
    ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class TimeGrid:
    """Points i * step for 1 <= i <= count, all strictly below t* - step."""

    step: float
    count: int

    @classmethod
    def for_boundary(cls, t_star: float, step: float) -> TimeGrid:
        if not step > 0:
            raise InputError(f"Time step must be positive, got {step}")
        if not math.isfinite(t_star):
            raise ConfigurationError("A time grid needs a finite boundary time; use a model with a bounded domain")
        count = max(math.floor(t_star / step) - 1, 0)
        while count > 0 and count * step >= t_star - step:
            count -= 1
        return cls(step, count)

    @property
    def points(self) -> np.ndarray:
        return self.step * np.arange(1, self.count + 1, dtype=float)


@dataclass(frozen=True)
class OperatorResult:
    value: float
    best_time: float | None
    branch: Branch
    continue_value: float


@dataclass(eq=False)
class ValueStage:
    """Values and maximizers on Gamma_{n-1} produced by stage n."""

    stage: int
    values: np.ndarray
    best_time: np.ndarray
    stop: np.ndarray
    continue_values: np.ndarray
    steps: np.ndarray
    boundary_times: np.ndarray

    def branch(self, i: int) -> Branch:
        return Branch.STOP if self.stop[i] else Branch.CONTINUE

    def record(self, i: int) -> OperatorResult:
        stop = bool(self.stop[i])
        return OperatorResult(
            float(self.values[i]),
            float(self.best_time[i]) if stop else None,
            Branch.STOP if stop else Branch.CONTINUE,
            float(self.continue_values[i]),
        )


@dataclass
class SolveDiagnostics:
    rule: str
    target_points: int
    min_step: float
    max_step: float
    min_boundary_time: float
    absorbing_points: int
    evaluated_times: int
    flagged_rows: list[tuple[int, int]] = field(default_factory=list)
    solve_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "rule": self.rule,
            "target_points": self.target_points,
            "min_step": self.min_step,
            "max_step": self.max_step,
            "min_boundary_time": self.min_boundary_time,
            "absorbing_points": self.absorbing_points,
            "evaluated_times": self.evaluated_times,
            "flagged_rows": [list(item) for item in self.flagged_rows],
            "solve_seconds": self.solve_seconds,
        }

    @classmethod
    def from_dict(cls, data: dict) -> SolveDiagnostics:
        values = dict(data)
        values["flagged_rows"] = [tuple(item) for item in data.get("flagged_rows", [])]
        return cls(**values)


@dataclass(eq=False)
class SolveResult:
    """
    Output of the backward recursion.

    ``stages[n - 1]`` is stage n (values on Gamma_{n-1}); ``terminal`` holds
    g on Gamma_N. ``initial_weights`` are the stage-0 grid weights used for v0.
    """

    stages: list[ValueStage]
    terminal: np.ndarray
    initial_points: np.ndarray
    initial_weights: np.ndarray
    diagnostics: SolveDiagnostics
    labels: dict[str, str] = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return len(self.stages)

    @property
    def size(self) -> int:
        return max([stage.values.shape[0] for stage in self.stages] + [self.terminal.shape[0]])

    @property
    def v0(self) -> float:
        return float(np.dot(self.initial_weights, self.stages[0].values))

    def stage(self, n: int) -> ValueStage:
        if not 1 <= n <= self.horizon:
            raise RangeError(f"Stage {n} outside 1..{self.horizon}")
        return self.stages[n - 1]

    def value_at(self, point, chain: QuantizedChain) -> float:
        """Value at an explicit start (Z_0, S_0), read at its projection on Gamma_0."""
        index = nearest(self.initial_points, point, chain.norm)
        return float(self.stages[0].values[index])


# --- TIME STEPS ---
def _state_rows(model: PdmpModel, points: np.ndarray) -> np.ndarray:
    return points[:, :1 + model.dimension]


def _check_boundary_times(t_star: np.ndarray, absorbing: np.ndarray, stage: int, offset: int = 0) -> None:
    """Refuses NaN or negative t* (numerical failure) and infinite t* (unbounded domain) on live points."""
    broken = np.flatnonzero(~absorbing & (np.isnan(t_star) | (t_star < 0)))
    if broken.size:
        i = int(broken[0])
        raise NumericalError(f"Boundary time {t_star[i]} on grid {stage}, point {offset + i}", index=offset + i)
    if np.any(~absorbing & np.isinf(t_star)):
        raise ConfigurationError(
            f"Grid {stage} has points with infinite boundary time; "
            "the solver needs a model whose domain is bounded"
        )


def _usable_boundary_times(model: PdmpModel, chain: QuantizedChain) -> list[np.ndarray]:
    """t* of the non-absorbing points of each grid, NaN elsewhere; broken or infinite t* is refused."""
    usable = []
    for grid in chain.grids:
        rows = _state_rows(model, grid.points)
        t_star = model.boundary_times(rows)
        live = ~model.absorbing_mask(rows)
        _check_boundary_times(t_star, ~live, grid.stage)
        usable.append(np.where(live & (t_star > 0), t_star, np.nan))
    return usable


def choose_time_step(chain: QuantizedChain, model: PdmpModel, target_points: int = DEFAULT_TARGET_POINTS) -> float:
    """Global step: the smallest positive t* over all grids divided by target_points + 2."""
    if target_points < 1:
        raise InputError(f"target_points must be at least 1, got {target_points}")
    usable = np.concatenate(_usable_boundary_times(model, chain))
    # NaN marks absorbing points and points already on the boundary.
    positive = usable[np.isfinite(usable)]
    if positive.size == 0:
        raise ConfigurationError("No grid point has a positive finite boundary time")
    return float(positive.min()) / (target_points + 2)


def choose_point_steps(
    chain: QuantizedChain,
    model: PdmpModel,
    target_points: int = DEFAULT_TARGET_POINTS,
    rule: TimeStepRule = TimeStepRule.ADAPTIVE,
) -> list[np.ndarray]:
    """
    Step of every point of Gamma_{n-1}, for n = 1..N.

    The adaptive rule divides min(t*(z), largest S of Gamma_n) by target_points + 2,
    so every point gets about target_points useful evaluation times.
    """
    rule = TimeStepRule(rule)
    if rule is TimeStepRule.GLOBAL:
        step = choose_time_step(chain, model, target_points)
        return [np.full(chain.grids[n - 1].size, step) for n in range(1, chain.horizon + 1)]

    usable = _usable_boundary_times(model, chain)
    steps = []
    for n in range(1, chain.horizon + 1):
        s_max = float(chain.grids[n].points[:, -1].max())
        span = np.minimum(usable[n - 1], s_max) if s_max > 0 else usable[n - 1]
        steps.append(np.where(span > 0, span / (target_points + 2), np.nan))
    return steps


# --- OPERATOR ---
def quantized_expectation(chain: QuantizedChain, n: int, values_next, i: int) -> float:
    """Sum_j P_n[i, j] values_next[j]."""
    row = chain.transition(n)[i]
    values_next = np.asarray(values_next, dtype=float)
    if values_next.shape != row.shape:
        raise InputError(f"Expected {row.shape[0]} values on grid {n}, got {values_next.shape[0]}")
    if n - 1 < len(chain.metadata.flagged_rows) and i in chain.metadata.flagged_rows[n - 1]:
        logger.debug(f"Expectation from never-visited row {i} of stage {n - 1}")
    return float(row @ values_next)


def _stage_operator(
    model: PdmpModel,
    points: np.ndarray,
    s_next: np.ndarray,
    transition: np.ndarray,
    w: np.ndarray,
    g: StateReward,
    steps: np.ndarray,
    stage: int = 0,
    offset: int = 0,
) -> tuple[np.ndarray, ...]:
    """
    Applies the operator to every row of ``points`` at once.

    Returns (values, best_time, stop, continue_values, boundary_times, evaluated).
    """
    rows = _state_rows(model, points)
    k = rows.shape[0]
    order = np.argsort(s_next, kind="stable")
    s_sorted = s_next[order]
    weighted = transition[:, order] * w[order]
    # head[:, m] = sum of P w over the m smallest S; tail[:, m] = P mass of the others.
    head = np.concatenate([np.zeros((k, 1)), np.cumsum(weighted, axis=1)], axis=1)
    tail = np.concatenate([np.cumsum(transition[:, order][:, ::-1], axis=1)[:, ::-1], np.zeros((k, 1))], axis=1)
    continue_values = head[:, -1]

    values = continue_values.copy()
    best_time = np.full(k, np.nan)
    stop = np.zeros(k, dtype=bool)
    t_star = model.boundary_times(rows)
    absorbing = model.absorbing_mask(rows)
    _check_boundary_times(t_star, absorbing, stage, offset)

    # Absorbing points: stop now is worth g(z).
    if absorbing.any():
        now = np.asarray(g(rows[absorbing]), dtype=float)
        wins = now > continue_values[absorbing] + TIE_TOLERANCE * np.maximum(1.0, np.abs(continue_values[absorbing]))
        idx = np.flatnonzero(absorbing)
        values[idx[wins]] = now[wins]
        best_time[idx[wins]] = 0.0
        stop[idx[wins]] = True

    s_max = float(s_sorted[-1])
    live = np.flatnonzero(~absorbing & np.isfinite(steps) & (t_star > 0))
    counts = np.zeros(k, dtype=np.int64)
    for i in live:
        grid = TimeGrid.for_boundary(float(t_star[i]), float(steps[i]))
        # Beyond the largest S every J(u) equals the continue value.
        counts[i] = min(grid.count, math.floor(s_max / grid.step) + 1) if s_max >= 0 else 1
    live = live[counts[live] > 0]

    evaluated = 0
    start = 0
    while start < live.size:
        width = max(int(counts[live[start]]), 1)
        take = 1
        while start + take < live.size and (take + 1) * max(width, counts[live[start + take]]) <= EVALUATION_CELLS:
            width = max(width, int(counts[live[start + take]]))
            take += 1
        block = live[start:start + take]
        start += take

        index = np.arange(1, width + 1, dtype=float)
        times = steps[block][:, None] * index[None, :]
        valid = index[None, :] <= counts[block][:, None]
        moved = model.flow_points(rows[block], np.where(valid, times, 0.0))
        rewards = np.asarray(g(moved), dtype=float)
        below = np.searchsorted(s_sorted, times, side="left")
        J = np.take_along_axis(head[block], below, axis=1) + rewards * np.take_along_axis(tail[block], below, axis=1)
        J = np.where(valid, J, -np.inf)
        if not np.all(np.isfinite(J[valid])):
            raise NumericalError("Non-finite operator value", index=int(block[0]))
        best = np.argmax(J, axis=1)
        best_value = J[np.arange(block.size), best]
        cont = continue_values[block]
        wins = best_value > cont + TIE_TOLERANCE * np.maximum(1.0, np.abs(cont))
        values[block[wins]] = best_value[wins]
        best_time[block[wins]] = times[np.arange(block.size), best][wins]
        stop[block[wins]] = True
        evaluated += int(valid.sum())

    return values, best_time, stop, continue_values, t_star, evaluated


def apply_operator(
    chain: QuantizedChain,
    model: PdmpModel,
    n: int,
    w,
    g: StateReward,
    i: int,
    step: float,
) -> OperatorResult:
    """Single-point version of the stage operator at point ``i`` of Gamma_{n-1}."""
    if not 1 <= n <= chain.horizon:
        raise RangeError(f"Stage {n} outside 1..{chain.horizon}")
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)):
        raise NumericalError("Values on the next grid must be finite", index=n)
    point = chain.grids[n - 1].points[i:i + 1]
    values, best_time, stop, cont, _, _ = _stage_operator(
        model,
        point,
        chain.grids[n].points[:, -1],
        chain.transition(n)[i:i + 1],
        w,
        g,
        np.array([step], dtype=float),
        stage=n - 1,
        offset=i,
    )
    return OperatorResult(
        float(values[0]),
        float(best_time[0]) if stop[0] else None,
        Branch.STOP if stop[0] else Branch.CONTINUE,
        float(cont[0]),
    )


def backward_solve(
    chain: QuantizedChain,
    model: PdmpModel,
    g: StateReward,
    target_points: int = DEFAULT_TARGET_POINTS,
    rule: TimeStepRule = TimeStepRule.ADAPTIVE,
    steps: list[np.ndarray] | float | None = None,
) -> SolveResult:
    """
    Runs v_N = g, v_{n-1} = L_n(v_n, g) down to stage 1.

    Args:
        chain: trained grids and transitions.
        model: supplies flow, boundary times and absorbing points.
        g: reward on state rows.
        target_points: time-grid resolution.
        rule: how steps are chosen when ``steps`` is not given.
        steps: an explicit global step, or per-stage arrays of per-point steps.

    Returns:
        SolveResult with every stage's maximizer records.
    """
    started = time.perf_counter()
    rule = TimeStepRule(rule)
    if steps is None:
        steps = choose_point_steps(chain, model, target_points, rule)
    elif np.isscalar(steps):
        _usable_boundary_times(model, chain)
        steps = [np.full(chain.grids[n - 1].size, float(steps)) for n in range(1, chain.horizon + 1)]
    if len(steps) != chain.horizon:
        raise InputError(f"Expected steps for {chain.horizon} stages, got {len(steps)}")

    terminal = np.asarray(g(_state_rows(model, chain.grids[-1].points)), dtype=float)
    w = terminal
    stages: list[ValueStage] = []
    evaluated = 0
    absorbing = 0
    flagged: list[tuple[int, int]] = []
    for n in range(chain.horizon, 0, -1):
        points = chain.grids[n - 1].points
        values, best_time, stop, cont, t_star, count = _stage_operator(
            model,
            points,
            chain.grids[n].points[:, -1],
            chain.transition(n),
            w,
            g,
            np.asarray(steps[n - 1], float),
            stage=n - 1,
        )
        if not np.all(np.isfinite(values)):
            raise NumericalError("Non-finite stage values", index=n)
        if np.any(values < cont):
            raise NumericalError("Stage value below its continue expectation", index=n)
        if n - 1 < len(chain.metadata.flagged_rows):
            flagged.extend((n, int(i)) for i in chain.metadata.flagged_rows[n - 1])
        evaluated += count
        absorbing += int(model.absorbing_mask(_state_rows(model, points)).sum())
        stages.append(ValueStage(n, values, best_time, stop, cont, np.asarray(steps[n - 1], float), t_star))
        logger.debug(f"Stage {n}: {int(stop.sum())} of {stop.size} points stop, mean value {values.mean():.6g}")
        w = values
    stages.reverse()

    all_steps = np.concatenate([np.asarray(s, float) for s in steps])
    all_steps = all_steps[np.isfinite(all_steps)]
    t_star_all = np.concatenate([stage.boundary_times for stage in stages])
    t_star_all = t_star_all[np.isfinite(t_star_all) & (t_star_all > 0)]
    if flagged:
        logger.warning(f"{len(flagged)} never-visited transition rows were used in the recursion")
    diagnostics = SolveDiagnostics(
        rule=rule.value,
        target_points=target_points,
        min_step=float(all_steps.min()) if all_steps.size else math.nan,
        max_step=float(all_steps.max()) if all_steps.size else math.nan,
        min_boundary_time=float(t_star_all.min()) if t_star_all.size else math.nan,
        absorbing_points=absorbing,
        evaluated_times=evaluated,
        flagged_rows=flagged,
        solve_seconds=time.perf_counter() - started,
    )
    result = SolveResult(stages, terminal, chain.grids[0].points, chain.grids[0].weights, diagnostics)
    logger.info(f"Backward recursion done: v0 = {result.v0:.6g} ({evaluated} time points evaluated)")
    return result
