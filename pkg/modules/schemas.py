"""
Central repository for the output file schemas and report text templates.
"""

import pandas as pd

# Per-run policy outcomes
OUTCOME_COLUMNS = ["seed", "stop_time_h", "stop_reason", "thickness_mm", "reward", "jumps"]

# One row per grid size of the ladder
CONVERGENCE_COLUMNS = ["K", "v0_direct", "mc_mean", "mc_std_error", "train_s", "solve_s", "evaluate_s"]

# Figure data, times in years
HISTOGRAM_COLUMNS = ["left_years", "right_years", "count"]
QUANTILE_COLUMNS = ["level", "stop_time_years"]
EXCEEDANCE_COLUMNS = ["date_years", "exceedance", "no_maintenance_probability"]
STOPPED_PATH_COLUMNS = ["run", "time_years", "thickness_mm", "event"]
TRAJECTORY_COLUMNS = ["run", "time_years", "thickness_mm", "mode", "event"]
PATH_EVENTS = ("start", "jump", "stop", "flow")

SUMMARY_KEYS = [
    "runs",
    "mean_reward",
    "std_error",
    "quantiles_h",
    "exceedance",
    "histogram",
    "reasons",
    "v0_direct",
    "grid_hash",
    "solve_hash",
]

CONVERGENCE_TABLE_TEMPLATE = """
Value function approximation (horizon N = {horizon}, {runs} Monte Carlo runs per K)
{table}
"""

SIMULATE_SUMMARY_TEMPLATE = (
    "{reached} of {runs} trajectories ({fraction:.2%}) reach {threshold} mm within {horizon} jumps"
)

DESIGN_MARGIN_TEMPLATE = (
    "Maintenance is needed before {date_years:.2f} years with probability at most {alpha:.0%}"
)


def frame_problems(frame: pd.DataFrame, columns: list[str]) -> list[str]:
    """
    Checks a table against its schema.

    Returns:
        A list of problems; empty when the columns match exactly and in order.
    """
    problems = []
    found = list(frame.columns)
    if found != columns:
        problems.append(f"Expected columns {columns}, found {found}")
    if "event" in found and not frame["event"].isin(PATH_EVENTS).all():
        problems.append(f"Unknown path events: {sorted(set(frame['event']) - set(PATH_EVENTS))}")
    return problems


def summary_problems(summary: dict) -> list[str]:
    missing = [key for key in SUMMARY_KEYS if key not in summary]
    return [f"Summary is missing {', '.join(missing)}"] if missing else []
