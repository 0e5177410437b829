"""
Stage controller for OptiStop runs.
This module coordinates the model (simulate), the quantizer (scales, train),
the solver (solve) and the stopping policy (evaluate, report), persisting
every intermediate artifact so stages can be rerun independently.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from modules.artifacts import (
    ArtifactPaths,
    check_label,
    export_chain_json,
    load_chain,
    load_solve,
    read_json,
    require,
    save_chain,
    save_solve,
    write_json,
)
from modules.config import RunConfig, Stage
from modules.corrosion_model import FAILED_MODE
from modules.errors import ArtifactFormatError, OptiStopError, StageError
from modules.pdmp_core import simulate
from modules.quantizer import WeightedNorm, estimate_scales, train
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
    summary_payload,
    trajectory_frame,
    write_frame,
)
from modules.schemas import (
    CONVERGENCE_COLUMNS,
    DESIGN_MARGIN_TEMPLATE,
    EXCEEDANCE_COLUMNS,
    HISTOGRAM_COLUMNS,
    OUTCOME_COLUMNS,
    QUANTILE_COLUMNS,
    SIMULATE_SUMMARY_TEMPLATE,
    STOPPED_PATH_COLUMNS,
    TRAJECTORY_COLUMNS,
    summary_problems,
)
from modules.solver import TimeStepRule, backward_solve
from modules.stopping_policy import HOURS_PER_YEAR, evaluate_policy
from utils.logger import setup_logger

logger = setup_logger("pipeline")


@dataclass
class ConvergenceReport:
    rows: list[dict] = field(default_factory=list)

    def frame(self) -> pd.DataFrame:
        return convergence_frame(self.rows)


@contextmanager
def stage(name: str):
    """Times a stage and re-raises any failure as a StageError naming it."""
    started = time.perf_counter()
    logger.info(f"Stage '{name}' started")
    try:
        yield
    except StageError:
        raise
    except OptiStopError as e:
        raise StageError(name, e) from e
    except OSError as e:
        raise StageError(name, e) from e
    logger.info(f"Stage '{name}' finished in {time.perf_counter() - started:.1f}s")


def _paths(config: RunConfig) -> ArtifactPaths:
    return ArtifactPaths(config.output_dir)


# --- STAGES ---
def run_simulate(config: RunConfig) -> dict:
    """Sample trajectories for illustration and the threshold exceedance statistic."""
    with stage("simulate"):
        model = config.model()
        paths = _paths(config)
        rng = config.rng(Stage.SIMULATE)

        # 1. Exceedance fraction from the vectorized chain sampler
        chains = model.sample_chains(config.simulate_runs, config.horizon, rng)
        failed = chains[:, :, 0] == FAILED_MODE
        reached = failed[:, -1]
        first = np.where(failed.any(axis=1), failed.argmax(axis=1), -1)
        hours = chains[:, :, -1].sum(axis=1)

        # 2. A few full trajectories for the path illustrations
        trajectories = [
            simulate(model, model.sample_initial(rng), config.horizon, rng) for _ in range(config.sample_paths)
        ]
        if trajectories:
            write_frame(
                trajectory_frame(model, trajectories), paths.simulate_dir / "trajectories.csv", TRAJECTORY_COLUMNS
            )
        write_json(paths.simulate_dir / "trajectories.json", {"trajectories": [t.to_dict() for t in trajectories]})

        result = {
            "runs": config.simulate_runs,
            "horizon": config.horizon,
            "threshold_mm": config.failure_threshold,
            "reached": int(reached.sum()),
            "exceedance_fraction": float(reached.mean()),
            "first_failure_jump_median": float(np.median(first[reached])) if reached.any() else None,
            "failure_hours_median": float(np.median(hours[reached])) if reached.any() else None,
            "model_hash": config.model_hash(),
        }
        write_json(paths.simulate_dir / "exceedance.json", result)
        logger.info(SIMULATE_SUMMARY_TEMPLATE.format(
            reached=result["reached"],
            runs=result["runs"],
            fraction=result["exceedance_fraction"],
            threshold=config.failure_threshold,
            horizon=config.horizon,
        ))
    return result


def run_scales(config: RunConfig) -> WeightedNorm:
    with stage("scales"):
        model = config.model()
        pilot = model.sample_chains(config.pilot_samples, config.horizon, config.rng(Stage.SCALES))
        norm = estimate_scales(pilot, discrete_columns=(0,))
        write_json(_paths(config).scales, {
            "scale": list(norm.scale),
            "labels": {"model_hash": config.model_hash(), "pilot_samples": str(config.pilot_samples)},
        })
    return norm


def _load_scales(config: RunConfig) -> WeightedNorm:
    data = read_json(_paths(config).scales, "scales")
    check_label(data["labels"], "model_hash", config.model_hash(), "scales.json")
    check_label(data["labels"], "pilot_samples", str(config.pilot_samples), "scales.json")
    return WeightedNorm(tuple(data["scale"]))


def run_train(config: RunConfig, K: int) -> float:
    with stage("train"):
        started = time.perf_counter()
        model = config.model()
        norm = _load_scales(config)
        chain = train(
            lambda runs, rng: model.sample_chains(runs, config.horizon, rng),
            K,
            config.horizon,
            schedule=config.schedule(),
            norm=norm,
            rng=config.rng(Stage.TRAIN, K),
            n_samples=config.train_budget(K),
            seed=config.seed,
        )
        chain.labels = {"model_hash": config.model_hash(), "grid_hash": config.grid_hash(K)}
        paths = _paths(config)
        save_chain(chain, paths.grids(K))
        export_chain_json(chain, paths.grids_json(K))
    return time.perf_counter() - started


def run_solve(config: RunConfig, K: int) -> tuple[float, float]:
    """Returns (v0, seconds)."""
    with stage("solve"):
        started = time.perf_counter()
        paths = _paths(config)
        chain = load_chain(paths.grids(K))
        check_label(chain.labels, "grid_hash", config.grid_hash(K), "grids.bin")
        result = backward_solve(
            chain,
            config.model(),
            config.state_reward(),
            target_points=config.time_grid_points,
            rule=TimeStepRule(config.time_step_rule),
        )
        result.labels = {
            "model_hash": config.model_hash(),
            "grid_hash": config.grid_hash(K),
            "solve_hash": config.solve_hash(K),
        }
        save_solve(result, paths.solve(K))
    return result.v0, time.perf_counter() - started


def run_evaluate(config: RunConfig, K: int) -> tuple[dict, float]:
    """Returns (summary payload, seconds)."""
    with stage("evaluate"):
        started = time.perf_counter()
        paths = _paths(config)
        model = config.model()
        chain = load_chain(paths.grids(K))
        result = load_solve(paths.solve(K))
        check_label(chain.labels, "grid_hash", config.grid_hash(K), "grids.bin")
        check_label(result.labels, "solve_hash", config.solve_hash(K), "solve.bin")

        summary, outcomes = evaluate_policy(
            model,
            model.sample_initial,
            config.horizon,
            result,
            chain,
            config.state_reward(),
            config.evaluate_runs,
            config.rng(Stage.EVALUATE, K),
            bin_hours=config.histogram_bin_hours,
            dates=[year * HOURS_PER_YEAR for year in config.exceedance_years],
            record_paths=config.report_paths,
        )
        payload = summary_payload(summary, result.v0, config.grid_hash(K), config.solve_hash(K))
        write_frame(outcomes_frame(outcomes), paths.outcomes(K), OUTCOME_COLUMNS)
        write_json(paths.summary(K), payload)
        write_json(paths.paths(K), {"paths": paths_to_json(outcomes)})
    return payload, time.perf_counter() - started


def run_report(config: RunConfig, K: int, alpha: float | None = None) -> dict:
    """Figure data from the evaluation outputs of grid size K."""
    with stage("report"):
        paths = _paths(config)
        alpha = config.alpha if alpha is None else alpha
        summary = read_json(paths.summary(K), "evaluate")
        problems = summary_problems(summary)
        if problems:
            raise ArtifactFormatError("summary.json: " + "; ".join(problems))
        check_label(summary, "solve_hash", config.solve_hash(K), "summary.json")
        outcomes = pd.read_csv(require(paths.outcomes(K), "evaluate"))
        times = outcomes["stop_time_h"].to_numpy(dtype=float)
        out = paths.report_dir(K)

        write_frame(histogram_frame(times, config.histogram_bin_hours), out / "histogram.csv", HISTOGRAM_COLUMNS)
        write_frame(quantile_frame(times), out / "quantiles.csv", QUANTILE_COLUMNS)
        write_frame(exceedance_frame(times, config.exceedance_years), out / "exceedance.csv", EXCEEDANCE_COLUMNS)
        stopped = paths_from_json(read_json(paths.paths(K), "evaluate")["paths"], config.model())
        write_frame(stopped_path_frame(config.model(), stopped), out / "stopped_paths.csv", STOPPED_PATH_COLUMNS)

        margin = {"alpha": alpha, "date_years": design_margin(times, alpha)}
        write_json(out / "design_margin.json", margin)
        logger.info(DESIGN_MARGIN_TEMPLATE.format(**margin))
    return margin


def _run_ladder(config: RunConfig, ks: list[int]) -> ConvergenceReport:
    """
    Executes the full ladder:
    1. Simulates trajectories and estimates the norm scales once.
    2. For each K: trains, solves, evaluates and reports.
    3. Writes the convergence table, keeping the rows done so far if a stage fails.
    """
    paths = _paths(config)
    report = ConvergenceReport()
    logger.info(f"Running pipeline for K in {ks}")

    def flush():
        frame = report.frame()
        write_frame(frame, paths.convergence, CONVERGENCE_COLUMNS)
        paths.convergence_table.write_text(convergence_text(frame, config.horizon, config.evaluate_runs))

    try:
        run_simulate(config)
        run_scales(config)
        for K in ks:
            train_s = run_train(config, K)
            v0, solve_s = run_solve(config, K)
            payload, evaluate_s = run_evaluate(config, K)
            run_report(config, K)
            report.rows.append({
                "K": K,
                "v0_direct": v0,
                "mc_mean": payload["mean_reward"],
                "mc_std_error": payload["std_error"],
                "train_s": train_s,
                "solve_s": solve_s,
                "evaluate_s": evaluate_s,
            })
            logger.info(f"K={K}: direct {v0:.4f}, Monte Carlo {payload['mean_reward']:.4f}")
    finally:
        if report.rows:
            flush()
    logger.info("\n" + convergence_text(report.frame(), config.horizon, config.evaluate_runs))
    return report


def run_pipeline(config: RunConfig, ks: list[int] | None = None) -> ConvergenceReport:
    """
    Runs the ladder once, or ``replicates`` times with seeds seed, seed + 1, ...
    in ``rep<r>/`` subdirectories; replicated runs also get a median table.
    """
    ks = sorted(ks or config.k_ladder)
    if config.replicates == 1:
        return _run_ladder(config, ks)

    frames = []
    for r in range(config.replicates):
        replicate = config.with_overrides(seed=config.seed + r, output_dir=str(_paths(config).root / f"rep{r}"))
        logger.info(f"Replicate {r + 1}/{config.replicates} (seed {replicate.seed})")
        frames.append(_run_ladder(replicate, ks).frame())
    median = pd.concat(frames).groupby("K", as_index=False).median()[CONVERGENCE_COLUMNS]
    paths = _paths(config)
    write_frame(median, paths.convergence, CONVERGENCE_COLUMNS)
    paths.convergence_table.write_text(convergence_text(median, config.horizon, config.evaluate_runs))
    return ConvergenceReport(median.to_dict("records"))
