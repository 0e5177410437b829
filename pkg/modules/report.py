"""
Builds plot-ready tables from simulation and evaluation results.

Nothing is drawn here: every function returns a pandas DataFrame (times in
years) that matches a schema from modules.schemas.
"""

from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np
import pandas as pd

from modules.errors import InputError
from modules.pdmp_core import HybridState, PdmpModel, Trajectory
from modules.schemas import (
    CONVERGENCE_COLUMNS,
    CONVERGENCE_TABLE_TEMPLATE,
    EXCEEDANCE_COLUMNS,
    HISTOGRAM_COLUMNS,
    OUTCOME_COLUMNS,
    QUANTILE_COLUMNS,
    STOPPED_PATH_COLUMNS,
    TRAJECTORY_COLUMNS,
    frame_problems,
)
from modules.stopping_policy import HOURS_PER_YEAR, QUANTILE_LEVELS, PathEvent, PolicyOutcome, PolicySummary
from utils.logger import setup_logger

logger = setup_logger("report")

# --- CONFIGURATION ---
FLOW_POINTS_PER_SEGMENT = 20


def write_frame(frame: pd.DataFrame, path: Path, columns: list[str]) -> None:
    problems = frame_problems(frame, columns)
    if problems:
        raise InputError(f"Refusing to write {path}: " + "; ".join(problems))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} rows to {path}")


def outcomes_frame(outcomes: Iterable[PolicyOutcome]) -> pd.DataFrame:
    return pd.DataFrame([o.to_row() for o in outcomes], columns=OUTCOME_COLUMNS)


def summary_payload(summary: PolicySummary, v0_direct: float, grid_hash: str, solve_hash: str) -> dict:
    return {
        "runs": summary.runs,
        "mean_reward": summary.mean_reward,
        "std_error": summary.std_error,
        "quantiles_h": {str(level): value for level, value in summary.quantiles.items()},
        "exceedance": [{"date_years": t / HOURS_PER_YEAR, "probability": p} for t, p in summary.exceedance],
        "histogram": {
            "bin_hours": summary.bin_hours,
            "edges_h": summary.histogram_edges.tolist(),
            "counts": summary.histogram_counts.tolist(),
        },
        "reasons": summary.reasons,
        "v0_direct": v0_direct,
        "grid_hash": grid_hash,
        "solve_hash": solve_hash,
    }


# --- STOP-TIME LAW ---
def histogram_frame(stop_times_h, bin_hours: float) -> pd.DataFrame:
    """Histogram of the stop times; counts sum to the number of runs."""
    times = np.asarray(stop_times_h, dtype=float)
    top = max(bin_hours, np.ceil(times.max() / bin_hours) * bin_hours)
    edges = np.arange(0.0, top + bin_hours / 2, bin_hours)
    counts, _ = np.histogram(times, bins=edges)
    return pd.DataFrame({
        "left_years": edges[:-1] / HOURS_PER_YEAR,
        "right_years": edges[1:] / HOURS_PER_YEAR,
        "count": counts,
    }, columns=HISTOGRAM_COLUMNS)


def quantile_frame(stop_times_h, levels: Sequence[float] = QUANTILE_LEVELS) -> pd.DataFrame:
    times = np.asarray(stop_times_h, dtype=float)
    return pd.DataFrame({
        "level": list(levels),
        "stop_time_years": np.quantile(times, list(levels)) / HOURS_PER_YEAR,
    }, columns=QUANTILE_COLUMNS)


def exceedance_frame(stop_times_h, dates_years: Sequence[float]) -> pd.DataFrame:
    """P(tau <= t) and its complement, the probability that no maintenance is due before t."""
    ordered = np.sort(np.asarray(stop_times_h, dtype=float))
    dates = np.asarray(dates_years, dtype=float)
    exceedance = np.searchsorted(ordered, dates * HOURS_PER_YEAR, side="right") / ordered.size
    return pd.DataFrame({
        "date_years": dates,
        "exceedance": exceedance,
        "no_maintenance_probability": 1.0 - exceedance,
    }, columns=EXCEEDANCE_COLUMNS)


def design_margin(stop_times_h, alpha: float) -> float:
    """
    Largest date (years) before which maintenance is needed with probability at most ``alpha``.

    Returns the order statistic tau_(m+1) with m = floor(alpha * runs), so that
    the empirical P(tau < date) is at most alpha.
    """
    if not 0 < alpha < 1:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")
    ordered = np.sort(np.asarray(stop_times_h, dtype=float))
    index = min(int(np.floor(alpha * ordered.size)), ordered.size - 1)
    return float(ordered[index] / HOURS_PER_YEAR)


# --- PATHS ---
def _segment_rows(model: PdmpModel, run: int, start: PathEvent, end_time: float, points: int) -> list[dict]:
    rows = []
    span = end_time - start.time
    for k in range(1, points):
        elapsed = span * k / points
        state = model.flow(start.state, elapsed)
        rows.append({"run": run, "time": start.time + elapsed, "state": state, "event": "flow"})
    return rows


def _path_rows(model: PdmpModel, run: int, events: Sequence[PathEvent], points: int) -> list[dict]:
    rows = []
    for current, following in zip(events, events[1:]):
        rows.append({"run": run, "time": current.time, "state": current.state, "event": current.event})
        rows.extend(_segment_rows(model, run, current, following.time, points))
    if events:
        last = events[-1]
        rows.append({"run": run, "time": last.time, "state": last.state, "event": last.event})
    return rows


def stopped_path_frame(
    model: PdmpModel,
    paths: Sequence[Sequence[PathEvent]],
    points_per_segment: int = FLOW_POINTS_PER_SEGMENT,
) -> pd.DataFrame:
    """Thickness along stopped trajectories with jump and stop markers."""
    rows = []
    for run, events in enumerate(paths):
        rows.extend(_path_rows(model, run, events, points_per_segment))
    return pd.DataFrame(
        [{
            "run": row["run"],
            "time_years": row["time"] / HOURS_PER_YEAR,
            "thickness_mm": row["state"].position[0],
            "event": row["event"],
        } for row in rows],
        columns=STOPPED_PATH_COLUMNS,
    )


def trajectory_events(trajectory: Trajectory) -> list[PathEvent]:
    events = [PathEvent(0.0, trajectory.initial, "start")]
    events.extend(PathEvent(jump.jump_time, jump.post_jump_state, "jump") for jump in trajectory.jumps)
    return events


def trajectory_frame(
    model: PdmpModel,
    trajectories: Sequence[Trajectory],
    points_per_segment: int = FLOW_POINTS_PER_SEGMENT,
) -> pd.DataFrame:
    """Simulated thickness-loss paths, one run per trajectory."""
    rows = []
    for run, trajectory in enumerate(trajectories):
        rows.extend(_path_rows(model, run, trajectory_events(trajectory), points_per_segment))
    return pd.DataFrame(
        [{
            "run": row["run"],
            "time_years": row["time"] / HOURS_PER_YEAR,
            "thickness_mm": row["state"].position[0],
            "mode": row["state"].mode,
            "event": row["event"],
        } for row in rows],
        columns=TRAJECTORY_COLUMNS,
    )


def paths_to_json(outcomes: Iterable[PolicyOutcome]) -> list[list[dict]]:
    return [
        [{"time": e.time, "state": e.state.to_dict(), "event": e.event} for e in outcome.path]
        for outcome in outcomes
        if outcome.path
    ]


def paths_from_json(data: list[list[dict]], model: PdmpModel) -> list[list[PathEvent]]:
    make = model.state_class.from_dict if model is not None else HybridState.from_dict
    return [[PathEvent(float(e["time"]), make(e["state"]), e["event"]) for e in path] for path in data]


# --- CONVERGENCE ---
def convergence_frame(rows: Iterable[dict]) -> pd.DataFrame:
    frame = pd.DataFrame(list(rows), columns=CONVERGENCE_COLUMNS)
    return frame.sort_values("K", kind="stable").reset_index(drop=True)


def convergence_text(frame: pd.DataFrame, horizon: int, runs: int) -> str:
    table = frame.to_string(index=False, float_format=lambda x: f"{x:.4f}")
    return CONVERGENCE_TABLE_TEMPLATE.format(horizon=horizon, runs=runs, table=table).strip() + "\n"
