"""
Command line entry point. Runs the simulation, recovery and estimation
pipelines on an experiment config document:

    python -m carma_levy.main experiment consistency --config sweep.json --threads 4
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import sentry_sdk
from pydantic import ValidationError

from carma_levy import storage
from carma_levy.carma import (
    SampledSeries,
    build_state_space,
    sample,
    sample_driver,
    simulate,
)
from carma_levy.config import config as settings
from carma_levy.exceptions import (
    AcceptanceGateError,
    CarmaLevyError,
    ConfigError,
    NumericalError,
)
from carma_levy.gmm import estimate_from_increments
from carma_levy.logging_conf import configure_logging
from carma_levy.models.experiment import ExperimentConfig
from carma_levy.recovery import recover_increments
from carma_levy.tasks import (
    check_clt,
    check_consistency,
    moment_function,
    replication_rng,
    run_clt,
    run_consistency,
    run_single,
)


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_GATE = 4

# Only enable Sentry if DSN is present in env/config
if settings.SENTRY_DSN:
    sentry_sdk.init(dsn=settings.SENTRY_DSN, traces_sample_rate=1.0)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="Experiment JSON")
    common.add_argument("--seed", type=int, help="Override the master seed")
    common.add_argument("--out", type=Path, help="Output directory")
    common.add_argument("--threads", type=int, default=settings.THREADS)
    common.add_argument("--h", type=float, help="Override h_list with a single h")
    common.add_argument(
        "--check", action="store_true", help="Fail with exit code 4 on a failed gate"
    )

    parser = argparse.ArgumentParser(
        prog="carma_levy",
        description="Simulate CARMA processes, recover the driving Levy "
        "increments and estimate the driver.",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("simulate", parents=[common], help="Simulate and sample a path")
    for name in ("recover", "estimate"):
        command = commands.add_parser(
            name, parents=[common], help=f"{name.capitalize()} from a path"
        )
        command.add_argument("--input", type=Path, help="Observations CSV to use")

    experiment = commands.add_parser("experiment", help="Monte Carlo experiments")
    kinds = experiment.add_subparsers(dest="kind", required=True)
    for kind in ("consistency", "clt"):
        kinds.add_parser(kind, parents=[common])

    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Reads the config document and applies the command line overrides."""

    try:
        document = args.config.read_text(encoding="utf8")
    except OSError as err:
        raise ConfigError(f"Cannot read config {args.config}: {err}") from err

    experiment = ExperimentConfig.model_validate_json(document)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.h is not None:
        updates["h_list"] = [args.h]
    if updates:
        # Re-validate so that overrides go through the grid checks
        experiment = ExperimentConfig.model_validate(
            experiment.model_dump() | updates
        )

    return experiment


def output_dir(args: argparse.Namespace, experiment: ExperimentConfig) -> Path:
    return Path(args.out or experiment.output_dir or settings.OUTPUT_DIR)


def _series_from_file(path: Path, experiment: ExperimentConfig, extra: int):
    h = experiment.h_list[0]
    values = storage.read_series_csv(path)
    if values.shape[1] != experiment.model.d:
        raise ConfigError(
            f"{path} has {values.shape[1]} observation columns, the model has "
            f"d={experiment.model.d}"
        )
    per_unit = int(round(1 / h))
    N, rest = divmod(values.shape[0] - extra - 1, per_unit)
    if N < 1 or rest:
        raise ConfigError(
            f"{values.shape[0]} observations do not fit the grid of h={h} with "
            f"{extra} trailing samples"
        )

    return SampledSeries(h=h, N=N, extra=extra, values=values)


def simulate_command(args, experiment: ExperimentConfig, out: Path) -> None:
    h = experiment.h_list[0]
    ssr = build_state_space(experiment.model)
    rng = replication_rng(experiment.seed, experiment.h_steps(h), 0)
    path = simulate(
        experiment.model,
        ssr,
        experiment.levy,
        T=experiment.horizon(h),
        dt=experiment.euler_dt,
        rng=rng,
        warmup=experiment.warmup,
    )
    series = sample(path, h, experiment.T, extra=ssr.extra_samples)
    driver = sample_driver(path, h, experiment.T, extra=ssr.extra_samples)
    storage.write_series(out, h, series.values, driver)


def recover_command(args, experiment: ExperimentConfig, out: Path) -> None:
    if args.input is None:
        run_single(experiment, out_dir=out, estimate=False)
        return

    ssr = build_state_space(experiment.model)
    series = _series_from_file(args.input, experiment, ssr.extra_samples)
    recovered = recover_increments(ssr, series)
    storage.write_increments(out, series.h, recovered.increments.values)


def estimate_command(args, experiment: ExperimentConfig, out: Path) -> None:
    if args.input is None:
        run_single(experiment, out_dir=out)
        return

    ssr = build_state_space(experiment.model)
    series = _series_from_file(args.input, experiment, ssr.extra_samples)
    recovered = recover_increments(ssr, series)
    result = estimate_from_increments(
        recovered.increments, moment_function(experiment.estimator), h=series.h
    )
    storage.write_increments(out, series.h, recovered.increments.values)
    storage.write_json(out / "result.json", result.to_out())


def experiment_command(args, experiment: ExperimentConfig, out: Path) -> None:
    if args.kind == "consistency":
        report = run_consistency(experiment, args.threads, out)
        if args.check:
            check_consistency(report)
    else:
        report = run_clt(experiment, args.threads, out)
        if args.check:
            check_clt(report)


COMMANDS = {
    "simulate": simulate_command,
    "recover": recover_command,
    "estimate": estimate_command,
    "experiment": experiment_command,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Runs a command and maps failures onto exit codes."""

    configure_logging()
    args = build_parser().parse_args(argv)

    try:
        experiment = load_config(args)
        out = output_dir(args, experiment)
        logger.info(f"Running {args.command} with seed {experiment.seed}, output {out}")
        COMMANDS[args.command](args, experiment, out)
    except (ValidationError, ConfigError) as err:
        logger.error(f"Invalid configuration: {err}")
        return EXIT_CONFIG
    except NumericalError as err:
        logger.error(f"Numerical failure: {err}")
        return EXIT_NUMERICAL
    except AcceptanceGateError as err:
        logger.error(f"Acceptance gate failed: {err}")
        return EXIT_GATE
    except CarmaLevyError as err:
        logger.error(f"{type(err).__name__}: {err}")
        return EXIT_NUMERICAL

    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
