"""
Command-line entry point for OptiStop.
Runs the maintenance-optimization pipeline stage by stage:
simulate -> scales -> train -> solve -> evaluate -> report, or all at once with `pipeline`.
"""
import argparse
import sys

# Import local modules
from modules.config import load_config
from modules.errors import OptiStopError
from modules.pipeline import (
    run_evaluate, run_pipeline, run_report, run_scales, run_simulate, run_solve, run_train,
)
from utils.logger import set_quiet, setup_logger

# Initialize main application logger
logger = setup_logger("app")

COMMANDS = ("simulate", "scales", "train", "solve", "evaluate", "report", "pipeline")


# --- HELPER FUNCTIONS ---
def parse_k_list(text: str) -> list[int]:
    """Parses "10,100,1000" into grid sizes."""
    try:
        values = [int(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated integers, got '{text}'")
    if not values or any(k < 1 for k in values):
        raise argparse.ArgumentTypeError(f"Grid sizes must be positive integers, got '{text}'")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="optistop",
        description="Quasi-optimal maintenance of a corroding structure by quantization of a PDMP.",
    )
    parser.add_argument("command", choices=COMMANDS, help="Pipeline stage to run")
    parser.add_argument("--config", help="KEY=value configuration file")
    parser.add_argument("--seed", type=int, help="Master seed")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--k", type=parse_k_list, help="Grid size, or a comma-separated ladder for `pipeline`")
    parser.add_argument("--runs", type=int, help="Monte Carlo runs for `simulate` or `evaluate`")
    parser.add_argument("--alpha", type=float, help="Early-maintenance probability for the design margin")
    parser.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    return parser


def resolve_overrides(args: argparse.Namespace) -> dict:
    overrides = {"seed": args.seed, "output_dir": args.out, "alpha": args.alpha}
    if args.runs is not None:
        overrides["simulate_runs" if args.command == "simulate" else "evaluate_runs"] = args.runs
    if args.k is not None:
        if args.command == "pipeline":
            overrides["k_ladder"] = ",".join(str(k) for k in args.k)
        else:
            overrides["grid_size"] = args.k[0]
    return overrides


def dispatch(command: str, config) -> None:
    K = config.grid_size
    if command == "simulate":
        run_simulate(config)
    elif command == "scales":
        run_scales(config)
    elif command == "train":
        run_train(config, K)
    elif command == "solve":
        run_solve(config, K)
    elif command == "evaluate":
        run_evaluate(config, K)
    elif command == "report":
        run_report(config, K)
    else:
        run_pipeline(config)


# --- MAIN ---
def main(argv: list[str] | None = None) -> int:
    """
    Runs one command.

    Returns:
        0 on success, otherwise the exit code of the failure
        (2 configuration, 3 artifacts, 4 numerical, 1 unexpected).
    """
    args = build_parser().parse_args(argv)
    set_quiet(args.quiet)
    try:
        config = load_config(args.config, resolve_overrides(args))
        logger.info(f"OptiStop '{args.command}' starting (seed {config.seed}, output {config.output_dir})")
        dispatch(args.command, config)
    except OptiStopError as e:
        logger.error(str(e))
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return 1
    logger.info(f"OptiStop '{args.command}' finished")
    return 0


if __name__ == "__main__":
    sys.exit(main())
