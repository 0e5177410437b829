import numpy as np
import pandas as pd
import pytest

from modules.errors import InputError
from modules.pdmp_core import HybridState, simulate
from modules.report import (
    convergence_frame,
    convergence_text,
    design_margin,
    exceedance_frame,
    histogram_frame,
    outcomes_frame,
    paths_from_json,
    paths_to_json,
    quantile_frame,
    stopped_path_frame,
    trajectory_frame,
    write_frame,
)
from modules.schemas import (
    CONVERGENCE_COLUMNS,
    EXCEEDANCE_COLUMNS,
    HISTOGRAM_COLUMNS,
    OUTCOME_COLUMNS,
    SUMMARY_KEYS,
    frame_problems,
    summary_problems,
)
from modules.stopping_policy import HOURS_PER_YEAR, PathEvent, PolicyOutcome, StopReason

YEAR = HOURS_PER_YEAR


@pytest.fixture
def stop_times():
    return np.random.default_rng(0).uniform(0.0, 30 * YEAR, 1000)


def test_histogram_counts_every_run(stop_times):
    frame = histogram_frame(stop_times, YEAR)
    assert list(frame.columns) == HISTOGRAM_COLUMNS
    assert frame["count"].sum() == 1000
    assert frame["left_years"].iloc[0] == 0.0
    assert np.allclose(frame["right_years"] - frame["left_years"], 1.0)
    assert frame["right_years"].iloc[-1] >= stop_times.max() / YEAR


def test_quantiles_are_monotone(stop_times):
    frame = quantile_frame(stop_times)
    assert frame["stop_time_years"].is_monotonic_increasing
    assert frame["stop_time_years"].iloc[4] == pytest.approx(15.0, rel=0.1)


def test_exceedance_and_its_complement(stop_times):
    frame = exceedance_frame(stop_times, [0.0, 5.0, 15.0, 40.0])
    assert list(frame.columns) == EXCEEDANCE_COLUMNS
    assert frame["exceedance"].is_monotonic_increasing
    assert frame["exceedance"].iloc[-1] == 1.0
    assert (frame["exceedance"] + frame["no_maintenance_probability"]).tolist() == pytest.approx([1.0] * 4)
    assert frame["exceedance"].iloc[2] == pytest.approx(0.5, abs=0.05)


def test_design_margin_is_an_order_statistic():
    times = np.arange(1, 101) * YEAR
    assert design_margin(times, 0.05) == pytest.approx(6.0)
    assert np.mean(times < design_margin(times, 0.05) * YEAR) <= 0.05
    assert design_margin(times[:3], 0.5) == pytest.approx(2.0)
    for alpha in (0.0, 1.0):
        with pytest.raises(InputError):
            design_margin(times, alpha)


def test_write_frame_checks_schema(tmp_path):
    good = pd.DataFrame({"left_years": [0.0], "right_years": [1.0], "count": [3]})
    path = tmp_path / "report" / "histogram.csv"
    write_frame(good, path, HISTOGRAM_COLUMNS)
    assert pd.read_csv(path).equals(good)
    with pytest.raises(InputError):
        write_frame(good[["count", "left_years", "right_years"]], path, HISTOGRAM_COLUMNS)


def test_unknown_events_are_schema_problems():
    frame = pd.DataFrame({"run": [0], "time_years": [0.0], "thickness_mm": [0.0], "event": ["teleport"]})
    assert any("teleport" in problem for problem in frame_problems(frame, list(frame.columns)))


def test_outcomes_frame_columns():
    outcome = PolicyOutcome(100.0, StopReason.PLANNED, HybridState(1, (0.17, 0.0, 1e-6)), 3.0, 4, seed=12)
    frame = outcomes_frame([outcome])
    assert list(frame.columns) == OUTCOME_COLUMNS
    assert frame.iloc[0].to_dict() == {
        "seed": 12, "stop_time_h": 100.0, "stop_reason": "planned", "thickness_mm": 0.17, "reward": 3.0, "jumps": 4,
    }


def test_stopped_path_interpolates_flow(drift_model):
    events = [
        PathEvent(0.0, HybridState(1, (1.0,)), "start"),
        PathEvent(2.0, HybridState(1, (1.5,)), "jump"),
        PathEvent(3.0, HybridState(1, (2.5,)), "stop"),
    ]
    frame = stopped_path_frame(drift_model, [events], points_per_segment=4)
    assert frame["event"].tolist() == ["start", "flow", "flow", "flow", "jump", "flow", "flow", "flow", "stop"]
    assert frame["thickness_mm"].tolist()[:4] == pytest.approx([1.0, 1.5, 2.0, 2.5])
    assert frame["time_years"].is_monotonic_increasing
    assert not frame_problems(frame, list(frame.columns))


def test_trajectory_frame_follows_simulated_paths(drift_model):
    trajectories = [simulate(drift_model, HybridState(1, (1.0,)), 4, np.random.default_rng(k)) for k in range(3)]
    frame = trajectory_frame(drift_model, trajectories, points_per_segment=5)
    assert sorted(frame["run"].unique().tolist()) == [0, 1, 2]
    jumps = frame[frame["event"] == "jump"]
    assert len(jumps) == sum(len(t.jumps) for t in trajectories)
    assert set(frame["mode"]) <= {0, 1}


def test_paths_json_round_trip(drift_model):
    path = (PathEvent(0.0, HybridState(1, (1.0,)), "start"), PathEvent(2.5, HybridState(1, (3.5,)), "stop"))
    with_path = PolicyOutcome(2.5, StopReason.PLANNED, HybridState(1, (3.5,)), 3.5, 0, path=path)
    without = PolicyOutcome(1.0, StopReason.FORCED, HybridState(1, (1.0,)), 1.0, 1)
    data = paths_to_json([with_path, without])
    assert len(data) == 1
    assert paths_from_json(data, drift_model) == [list(path)]


def test_convergence_table_is_sorted_by_grid_size():
    rows = [
        dict(zip(CONVERGENCE_COLUMNS, [50, 2.1, 2.0, 0.01, 1.0, 0.5, 3.0])),
        dict(zip(CONVERGENCE_COLUMNS, [10, 1.9, 1.8, 0.01, 0.2, 0.1, 3.0])),
    ]
    frame = convergence_frame(rows)
    assert frame["K"].tolist() == [10, 50]
    text = convergence_text(frame, horizon=25, runs=1000)
    assert "horizon N = 25" in text and "1000 Monte Carlo runs" in text
    assert text.endswith("\n")


def test_summary_problems_name_missing_keys():
    assert summary_problems({key: None for key in SUMMARY_KEYS}) == []
    problems = summary_problems({"runs": 3})
    assert problems and "mean_reward" in problems[0]
