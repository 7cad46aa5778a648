"""
Experiment pipelines: simulate a path, sample it, recover the increments and
estimate the driver, once or over many replications in a worker pool.
Replications get their own random streams keyed by (seed, h, replication),
so results do not depend on scheduling or on the order of h_list.
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.stats
from joblib import Parallel, delayed

from carma_levy import storage
from carma_levy.carma import (
    StateSpaceRealization,
    build_state_space,
    sample,
    simulate,
    true_unit_increments,
)
from carma_levy.exceptions import (
    AcceptanceGateError,
    ConfigError,
    NumericalError,
)
from carma_levy.gmm import (
    DEFAULT_U_POINTS,
    GmmResult,
    MomentFunction,
    asymptotic_covariance,
    cf_moment_covariance,
    estimate_from_increments,
    gamma_cf_moment_function,
    gamma_fisher_information,
    gamma_mle_moment_function,
)
from carma_levy.levy import gamma_cdf, gamma_char_exponent
from carma_levy.logging_conf import ensure_logging_configured, run_context
from carma_levy.models.experiment import (
    EstimatorSpec,
    ExperimentConfig,
    ExperimentReport,
    HSummary,
    ReplicationRow,
    Timing,
)
from carma_levy.models.levy import GammaSubordinator
from carma_levy.models.results import RecoverySummary
from carma_levy.recovery import (
    RecoveryOutput,
    ks_distance,
    recover_increments,
    recovery_error,
)


logger = logging.getLogger(__name__)

# Share of failed replications above which an experiment is aborted
MAX_FAILURE_SHARE = 0.05
CONSISTENCY_H = 0.01
CONSISTENCY_TOL = (0.15, 0.08)
CLT_MEAN_TOL = (0.07, 0.03)
CLT_COV_BAND = (0.5, 2.0)
AD_LEVEL = 1.0
AD_MIN_SAMPLES = 8


def seed_key(seed: int, h_steps: int, replication: int) -> str:
    return f"{seed}/{h_steps}/{replication}"


def replication_rng(seed: int, h_steps: int, replication: int) -> np.random.Generator:
    """Counter based stream for one (h, replication) cell of an experiment."""

    sequence = np.random.SeedSequence(seed, spawn_key=(h_steps, replication))
    return np.random.Generator(np.random.Philox(sequence))


def moment_function(spec: EstimatorSpec) -> MomentFunction:
    if spec.kind == "cf":
        return gamma_cf_moment_function(spec.u_points or DEFAULT_U_POINTS)

    return gamma_mle_moment_function()


@dataclass(frozen=True)
class PathRecovery:
    """Recovered and true increments of one simulated path."""

    h: float
    seed_key: str
    series_values: np.ndarray
    recovered: RecoveryOutput
    truth: np.ndarray
    mean_abs_error: float


def recover_path(
    config: ExperimentConfig,
    ssr: StateSpaceRealization,
    h: float,
    replication: int,
    seed: Optional[int] = None,
) -> PathRecovery:
    """Simulates one path over the horizon needed at h and recovers its
    unit increments."""

    seed = config.seed if seed is None else seed
    h_steps = config.h_steps(h)
    rng = replication_rng(seed, h_steps, replication)

    path = simulate(
        config.model,
        ssr,
        config.levy,
        T=config.horizon(h),
        dt=config.euler_dt,
        rng=rng,
        warmup=config.warmup,
    )
    series = sample(path, h, config.T, extra=ssr.extra_samples)
    recovered = recover_increments(ssr, series)
    truth = true_unit_increments(path, config.T)
    error = recovery_error(recovered, truth)

    return PathRecovery(
        h=h,
        seed_key=seed_key(seed, h_steps, replication),
        series_values=series.values,
        recovered=recovered,
        truth=truth,
        mean_abs_error=error.mean_abs,
    )


def _estimates(config: ExperimentConfig) -> bool:
    """Estimation applies to Gamma drivers only."""
    return isinstance(config.levy, GammaSubordinator)


def run_replication(
    config: ExperimentConfig, ssr: StateSpaceRealization, h: float, replication: int
) -> ReplicationRow:
    """One replication; numerical failures become a row naming the stage."""

    ensure_logging_configured()
    key = seed_key(config.seed, config.h_steps(h), replication)
    row = {"h": h, "replication": replication, "seed_key": key}

    with run_context(key):
        stage = "recover"
        try:
            recovery = recover_path(config, ssr, h, replication)
            row["mean_abs_error"] = recovery.mean_abs_error
            if _estimates(config):
                stage = "estimate"
                result = estimate_from_increments(
                    recovery.recovered.increments,
                    moment_function(config.estimator),
                    h=h,
                )
                row.update(
                    theta=result.theta_hat.tolist(),
                    criterion=result.criterion_value,
                    dropped=result.dropped,
                    converged=result.converged,
                )
        except NumericalError as err:
            logger.warning(f"Replication failed in stage {stage}: {err}")
            row.update(stage=stage, message=str(err))

    return ReplicationRow(**row)


def theoretical_covariance(config: ExperimentConfig) -> Optional[np.ndarray]:
    """Asymptotic covariance of the two-stage estimator at the true
    parameter divided by N = T."""

    if config.truth is None:
        return None

    b, a = config.truth
    if config.estimator.kind == "gamma_mle":
        sigma = np.linalg.inv(gamma_fisher_information(b, a))
    else:
        points = config.estimator.u_points or DEFAULT_U_POINTS
        omega = cf_moment_covariance(
            points, lambda u: np.exp(gamma_char_exponent(u, b, a))
        )
        mf = moment_function(config.estimator)
        G = mf.grad(np.zeros((1, 1)), np.array([b, a]))[0]
        sigma = asymptotic_covariance(G, omega, np.linalg.inv(omega))

    return sigma / config.T


def normality_checks(thetas: np.ndarray) -> list[bool]:
    """Anderson-Darling test of normality per coordinate at the 1% level."""

    passed = []
    for column in thetas.T:
        result = scipy.stats.anderson(column, dist="norm")
        level = list(result.significance_level).index(AD_LEVEL)
        passed.append(bool(result.statistic < result.critical_values[level]))

    return passed


def summarize(
    h: float,
    rows: list[ReplicationRow],
    truth: Optional[list[float]] = None,
    theoretical: Optional[np.ndarray] = None,
    normality: bool = False,
) -> HSummary:
    """Mean, marginal std and covariance of the estimates of the successful
    replications at h."""

    done = [row for row in rows if not row.failed and row.theta]
    thetas = np.array([row.theta for row in done], dtype=float)
    errors = [row.mean_abs_error for row in rows if row.mean_abs_error is not None]

    if thetas.size:
        mean = thetas.mean(axis=0)
        ddof = 1 if thetas.shape[0] > 1 else 0
        std = thetas.std(axis=0, ddof=ddof)
        cov = (
            np.atleast_2d(np.cov(thetas, rowvar=False))
            if thetas.shape[0] > 1
            else np.zeros((thetas.shape[1],) * 2)
        )
    else:
        mean, std, cov = np.array([]), np.array([]), np.zeros((0, 0))

    bias = None
    if truth is not None and thetas.size:
        bias = mean - np.asarray(truth, dtype=float)

    return HSummary(
        h=h,
        replications=len(rows),
        failures=sum(row.failed for row in rows),
        mean=mean.tolist(),
        std=std.tolist(),
        covariance=cov.tolist(),
        bias=None if bias is None else bias.tolist(),
        bias_norm=None if bias is None else float(np.linalg.norm(bias)),
        mean_abs_error=float(np.mean(errors)) if errors else None,
        theoretical_covariance=None if theoretical is None else theoretical.tolist(),
        normality=(
            normality_checks(thetas)
            if normality and thetas.shape[0] >= AD_MIN_SAMPLES
            else None
        ),
    )


def _run_replications(
    config: ExperimentConfig, threads: int
) -> tuple[list[ReplicationRow], float]:
    ssr = build_state_space(config.model)
    cells = [(h, rep) for h in config.h_list for rep in range(config.replications)]
    logger.info(
        f"Running {len(cells)} replications over h={config.h_list} on {threads} workers"
    )

    started = time.perf_counter()
    rows = Parallel(n_jobs=threads)(
        delayed(run_replication)(config, ssr, h, rep) for h, rep in cells
    )
    elapsed = time.perf_counter() - started

    failures = sum(row.failed for row in rows)
    if failures > MAX_FAILURE_SHARE * len(rows):
        raise NumericalError(
            f"{failures} of {len(rows)} replications failed, aborting the experiment"
        )

    return rows, elapsed


def _write_report(report: ExperimentReport, out_dir: Path, names) -> None:
    storage.write_replications(out_dir, report.rows, names)
    storage.write_json(out_dir / "summary.json", report)
    storage.write_json(out_dir / "timing.json", Timing(seconds=report.timing))


def run_consistency(
    config: ExperimentConfig, threads: int = 1, out_dir: Optional[Path] = None
) -> ExperimentReport:
    """Estimates over replications at every h of the sweep."""

    rows, elapsed = _run_replications(config, threads)
    summaries = [
        summarize(h, [row for row in rows if row.h == h], config.truth)
        for h in config.h_list
    ]
    report = ExperimentReport(
        kind="consistency",
        truth=config.truth,
        summaries=summaries,
        rows=rows,
        config=config,
        timing={"replications": elapsed},
    )

    if out_dir is not None:
        _write_report(report, out_dir, moment_function(config.estimator).names)

    return report


def run_clt(
    config: ExperimentConfig, threads: int = 1, out_dir: Optional[Path] = None
) -> ExperimentReport:
    """Distribution of the estimate over replications at a single h, next to
    the theoretical covariance Sigma / N."""

    if len(config.h_list) != 1:
        raise ConfigError(f"The CLT check needs a single h, got {config.h_list}")

    rows, elapsed = _run_replications(config, threads)
    h = config.h_list[0]
    report = ExperimentReport(
        kind="clt",
        truth=config.truth,
        summaries=[
            summarize(
                h, rows, config.truth, theoretical_covariance(config), normality=True
            )
        ],
        rows=rows,
        config=config,
        timing={"replications": elapsed},
    )

    if out_dir is not None:
        _write_report(report, out_dir, moment_function(config.estimator).names)

    return report


@dataclass(frozen=True)
class SingleRun:
    recovery: PathRecovery
    result: Optional[GmmResult]
    summary: RecoverySummary


def run_single(
    config: ExperimentConfig,
    seed: Optional[int] = None,
    out_dir: Optional[Path] = None,
    estimate: bool = True,
) -> SingleRun:
    """Simulate, sample, recover and estimate once at the first h of the
    config. Writes the increments, their empirical CDF and the result."""

    h = config.h_list[0]
    ssr = build_state_space(config.model)
    seed = config.seed if seed is None else seed

    with run_context(seed_key(seed, config.h_steps(h), 0)):
        recovery = recover_path(config, ssr, h, 0, seed=seed)
        values = recovery.recovered.increments.values

        ks = None
        if config.truth is not None:
            b, a = config.truth
            ks = ks_distance(values, lambda x: gamma_cdf(x, b, a))
        summary = RecoverySummary(
            h=h, N=config.T, mean_abs_error=recovery.mean_abs_error, ks_distance=ks
        )
        logger.info(f"Recovered {config.T} increments, mean abs error {summary.mean_abs_error:.4g}")

        result = None
        if estimate and _estimates(config):
            result = estimate_from_increments(
                recovery.recovered.increments, moment_function(config.estimator), h=h
            )

    if out_dir is not None:
        storage.write_increments(out_dir, h, values, recovery.truth)
        storage.write_json(out_dir / "recovery.json", summary)
        if config.truth is not None:
            b, a = config.truth
            storage.write_ecdf(out_dir, h, values, lambda x: gamma_cdf(x, b, a))
        if result is not None:
            storage.write_json(out_dir / "result.json", result.to_out())

    return SingleRun(recovery=recovery, result=result, summary=summary)


def check_consistency(report: ExperimentReport) -> None:
    """Bias shrinks from the largest to the smallest h and is small at
    h = 0.01."""

    if report.truth is None:
        raise AcceptanceGateError("No true parameter to check the estimates against")

    by_h = sorted(report.summaries, key=lambda summary: summary.h)
    coarse, fine = by_h[-1], by_h[0]
    if len(by_h) > 1 and not coarse.bias_norm > fine.bias_norm:
        raise AcceptanceGateError(
            f"Bias at h={coarse.h} ({coarse.bias_norm:.4g}) does not exceed bias at "
            f"h={fine.h} ({fine.bias_norm:.4g})"
        )

    for summary in by_h:
        if np.isclose(summary.h, CONSISTENCY_H):
            deviation = np.abs(np.asarray(summary.bias))
            if np.any(deviation > CONSISTENCY_TOL):
                raise AcceptanceGateError(
                    f"Mean estimate {summary.mean} at h={summary.h} is not within "
                    f"{CONSISTENCY_TOL} of {report.truth}"
                )


def check_clt(report: ExperimentReport) -> None:
    """Mean close to the truth and covariance within a factor band of
    Sigma / N with matching signs."""

    summary = report.summaries[0]
    if report.truth is None or summary.theoretical_covariance is None:
        raise AcceptanceGateError("No true parameter to check the estimates against")

    deviation = np.abs(np.asarray(summary.bias))
    if np.any(deviation > CLT_MEAN_TOL):
        raise AcceptanceGateError(
            f"Mean estimate {summary.mean} is not within {CLT_MEAN_TOL} of {report.truth}"
        )

    empirical = np.asarray(summary.covariance)
    theoretical = np.asarray(summary.theoretical_covariance)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = empirical / theoretical
    low, high = CLT_COV_BAND
    if not np.all((ratio >= low) & (ratio <= high)):
        raise AcceptanceGateError(
            f"Empirical covariance {empirical.tolist()} is not within a factor "
            f"{CLT_COV_BAND} of {theoretical.tolist()}"
        )

    if summary.normality is not None and not any(summary.normality):
        raise AcceptanceGateError(
            "No coordinate of the estimates passes the Anderson-Darling normality "
            f"test at the {AD_LEVEL}% level"
        )
