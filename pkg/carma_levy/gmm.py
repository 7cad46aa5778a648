"""
Generalized method of moments estimation of parametric Levy models from
increment samples, with the Gamma score and characteristic function moment
conditions.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.optimize

from carma_levy.carma import SampledSeries, StateSpaceRealization
from carma_levy.config import config
from carma_levy.exceptions import (
    DegenerateSampleError,
    GmmConvergenceError,
    RankDeficiencyError,
    SingularMatrixError,
)
from carma_levy.levy import (
    IncrementSample,
    gamma_char_exponent,
    gamma_char_exponent_grad,
    gamma_moment_start,
    gamma_score,
    gamma_score_jacobian,
    trigamma,
)
from carma_levy.models.carma import CarmaModel
from carma_levy.models.results import GmmResultOut
from carma_levy.recovery import RecoveryConfig, recover_increments


logger = logging.getLogger(__name__)

DEFAULT_U_POINTS = (0.5, 1.0)
# Share of dropped sample points above which a result is flagged
DROP_FLAG_SHARE = 0.01
EIGEN_FLOOR = 1e-10
INITIAL_STEP = 0.1


def _everywhere(x: np.ndarray) -> np.ndarray:
    return np.ones(x.shape[0], dtype=bool)


@dataclass(frozen=True)
class MomentFunction:
    """Moment condition g(x, theta) in R^q with E g(X, theta_0) = 0 and its
    Jacobian in theta. g maps an (N, m) sample to (N, q), grad to (N, q, r).
    Positive parameters are optimized on the log scale."""

    q_dim: int
    r_dim: int
    g: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray, np.ndarray], np.ndarray]
    start: Callable[[np.ndarray], np.ndarray]
    support: Callable[[np.ndarray], np.ndarray] = _everywhere
    positive: bool = True
    names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.q_dim < self.r_dim:
            raise ValueError(
                f"{self.q_dim} moment conditions cannot identify {self.r_dim} "
                "parameters"
            )


@dataclass(frozen=True)
class OptimizerConfig:
    """Nelder-Mead settings; each restart gets max_iter iterations."""

    max_iter: int = config.GMM_MAX_ITER
    restarts: int = config.GMM_RESTARTS
    xatol: float = config.GMM_XATOL
    fatol: float = config.GMM_FATOL
    start: Optional[np.ndarray] = None


@dataclass(frozen=True)
class GmmResult:
    theta_hat: np.ndarray
    weighting_used: np.ndarray
    Omega_hat: np.ndarray
    G_hat: np.ndarray
    Sigma_hat: np.ndarray
    criterion_value: float
    iterations: int
    restarts: int
    converged: bool
    n_used: int
    dropped: int = 0
    warnings: tuple[str, ...] = ()
    N: Optional[int] = None
    h: Optional[float] = None

    @property
    def flagged(self) -> bool:
        """More than 1% of the sample lay outside the model's support."""
        return self.dropped > DROP_FLAG_SHARE * (self.n_used + self.dropped)

    def to_out(self, N: Optional[int] = None, h: Optional[float] = None) -> GmmResultOut:
        return GmmResultOut(
            theta=self.theta_hat.tolist(),
            sigma=self.Sigma_hat.tolist(),
            criterion=self.criterion_value,
            N=self.N if N is None else N,
            h=self.h if h is None else h,
            dropped=self.dropped,
            converged=self.converged,
            flagged=self.flagged,
            weighting=self.weighting_used.tolist(),
            iterations=self.iterations,
            restarts=self.restarts,
            warnings=list(self.warnings),
        )


def asymptotic_covariance(G: np.ndarray, Omega: np.ndarray, W: np.ndarray) -> np.ndarray:
    """[G'WG]^-1 G'W Omega W G [G'WG]^-1, symmetrized."""

    G = np.atleast_2d(G)
    bread = G.T @ W @ G
    rank = int(np.linalg.matrix_rank(bread))
    if rank < G.shape[1]:
        raise RankDeficiencyError("G'WG is singular", rank, G.shape[1])

    bread_inv = np.linalg.inv(bread)
    sigma = bread_inv @ G.T @ W @ Omega @ W @ G @ bread_inv

    return 0.5 * (sigma + sigma.T)


def _admissible(sample: IncrementSample, mf: MomentFunction) -> tuple[np.ndarray, int]:
    """Points inside the model's support, in lexicographic order so that the
    criterion does not depend on the order of the sample."""

    values = sample.values
    mask = np.asarray(mf.support(values), dtype=bool)
    dropped = int((~mask).sum())
    values = values[mask]
    if values.shape[0] == 0:
        raise DegenerateSampleError(
            f"All {len(sample)} sample points lie outside the model's support"
        )
    if dropped:
        logger.warning(f"Dropped {dropped} of {len(sample)} points outside the support")

    order = np.lexsort(values.T[::-1])
    return values[order], dropped


def _to_theta(eta: np.ndarray, mf: MomentFunction) -> np.ndarray:
    return np.exp(eta) if mf.positive else eta


def _to_eta(theta: np.ndarray, mf: MomentFunction) -> np.ndarray:
    return np.log(theta) if mf.positive else theta


def _minimize(criterion: Callable, eta0: np.ndarray, opt: OptimizerConfig):
    """Nelder-Mead from eta0, restarted from perturbed copies of the best
    point until a run converges."""

    r = eta0.shape[0]
    best, iterations = None, 0
    for attempt in range(opt.restarts + 1):
        if best is None:
            start = eta0
        else:
            signs = (-1.0) ** (np.arange(r) + attempt)
            start = best.x + INITIAL_STEP * attempt * signs
        simplex = np.vstack([start, start + INITIAL_STEP * np.eye(r)])
        res = scipy.optimize.minimize(
            criterion,
            start,
            method="Nelder-Mead",
            options={
                "maxiter": opt.max_iter,
                "xatol": opt.xatol,
                "fatol": opt.fatol,
                "initial_simplex": simplex,
            },
        )
        iterations += int(res.nit)
        logger.debug(f"Nelder-Mead run {attempt}: f={res.fun:.6g}, success={res.success}")
        if best is None or res.fun <= best.fun:
            best = res
        if res.success:
            return best, iterations, attempt, True

    return best, iterations, opt.restarts, False


def gmm_estimate(
    sample: IncrementSample,
    mf: MomentFunction,
    W: np.ndarray,
    opt: Optional[OptimizerConfig] = None,
) -> GmmResult:
    """Minimizes m(theta)' W m(theta) with m the sample mean of g."""

    opt = opt or OptimizerConfig()
    W = np.asarray(W, dtype=float)
    if W.shape != (mf.q_dim, mf.q_dim):
        raise ValueError(f"W must be {mf.q_dim}x{mf.q_dim}, got shape {W.shape}")

    values, dropped = _admissible(sample, mf)

    def criterion(eta: np.ndarray) -> float:
        with np.errstate(all="ignore"):
            mean = mf.g(values, _to_theta(eta, mf)).mean(axis=0)
            value = float(mean @ W @ mean)
        return value if np.isfinite(value) else np.inf

    start = opt.start if opt.start is not None else mf.start(values)
    best, iterations, restarts, converged = _minimize(
        criterion, _to_eta(np.asarray(start, dtype=float), mf), opt
    )
    theta = _to_theta(best.x, mf)
    if not converged:
        raise GmmConvergenceError(
            f"Nelder-Mead did not converge after {restarts} restarts",
            {
                "theta": theta.tolist(),
                "criterion": float(best.fun),
                "iterations": iterations,
                "restarts": restarts,
            },
        )

    moments = mf.g(values, theta)
    G_hat = mf.grad(values, theta).mean(axis=0)
    Omega_hat = moments.T @ moments / values.shape[0]

    logger.debug(f"GMM estimate {theta} with criterion {best.fun:.3g}")

    return GmmResult(
        theta_hat=theta,
        weighting_used=W,
        Omega_hat=Omega_hat,
        G_hat=G_hat,
        Sigma_hat=asymptotic_covariance(G_hat, Omega_hat, W),
        criterion_value=float(best.fun),
        iterations=iterations,
        restarts=restarts,
        converged=converged,
        n_used=values.shape[0],
        dropped=dropped,
    )


def optimal_weighting(Omega: np.ndarray, r_dim: int) -> tuple[np.ndarray, list[str]]:
    """Inverse of Omega through its eigendecomposition. Eigenvalues below
    1e-10 trace / q are floored; more than q - r of them is an error."""

    q = Omega.shape[0]
    eigenvalues, vectors = np.linalg.eigh(0.5 * (Omega + Omega.T))
    floor = EIGEN_FLOOR * float(np.trace(Omega)) / q
    small = int((eigenvalues < floor).sum())
    if small > q - r_dim or floor <= 0:
        raise SingularMatrixError(
            "Estimated moment covariance is singular; use more data or fewer "
            "moment conditions"
        )

    warnings = []
    if small:
        warnings.append(f"{small} eigenvalues of Omega floored at {floor:.3g}")
        logger.warning(warnings[-1])

    eigenvalues = np.maximum(eigenvalues, floor)
    W = (vectors / eigenvalues) @ vectors.T

    return 0.5 * (W + W.T), warnings


def two_stage_estimate(
    sample: IncrementSample, mf: MomentFunction, opt: Optional[OptimizerConfig] = None
) -> GmmResult:
    """First stage with W = I, second stage with the inverse of the first
    stage moment covariance, started from the first stage estimate."""

    opt = opt or OptimizerConfig()
    first = gmm_estimate(sample, mf, np.eye(mf.q_dim), opt)
    W, warnings = optimal_weighting(first.Omega_hat, mf.r_dim)
    second = gmm_estimate(sample, mf, W, replace(opt, start=first.theta_hat))

    return replace(
        second,
        iterations=first.iterations + second.iterations,
        warnings=second.warnings + tuple(warnings),
    )


def gamma_mle_moment_function() -> MomentFunction:
    """Score of the Gamma log-density in (b, a); exactly identified."""

    return MomentFunction(
        q_dim=2,
        r_dim=2,
        g=lambda x, theta: gamma_score(x[:, 0], *theta),
        grad=lambda x, theta: gamma_score_jacobian(x[:, 0], *theta),
        start=lambda x: gamma_moment_start(x[:, 0]),
        support=lambda x: np.all(x > 0, axis=1),
        names=("b", "a"),
    )


def _check_u_points(u_points: Sequence) -> np.ndarray:
    points = np.asarray(u_points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if points.shape[0] == 0:
        raise ValueError("At least one u point is needed")
    if np.any(np.all(points == 0, axis=1)):
        raise ValueError("u = 0 gives an identically zero moment condition")
    if np.unique(points, axis=0).shape[0] != points.shape[0]:
        raise ValueError("u points must be pairwise distinct")

    return points


def cf_moment_function(
    u_points: Sequence,
    char_exponent: Callable[[np.ndarray, np.ndarray], complex],
    char_exponent_grad: Callable[[np.ndarray, np.ndarray], np.ndarray],
    r_dim: int,
    start: Callable[[np.ndarray], np.ndarray],
    positive: bool = True,
    names: tuple[str, ...] = (),
) -> MomentFunction:
    """Matches the empirical characteristic function at the u points:
    g stacks Re and Im of exp(i<u, x>) - exp(psi_theta(u)) per u point."""

    points = _check_u_points(u_points)

    def model_cf(theta):
        return np.array([np.exp(char_exponent(u, theta)) for u in points])

    def g(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        diff = np.exp(1j * x @ points.T) - model_cf(theta)
        return np.stack([diff.real, diff.imag], axis=-1).reshape(x.shape[0], -1)

    def grad(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        rows = np.stack(
            [
                -np.asarray(char_exponent_grad(u, theta)) * cf
                for u, cf in zip(points, model_cf(theta))
            ]
        )
        split = np.stack([rows.real, rows.imag], axis=1).reshape(-1, r_dim)
        return np.broadcast_to(split, (x.shape[0],) + split.shape)

    return MomentFunction(
        q_dim=2 * points.shape[0],
        r_dim=r_dim,
        g=g,
        grad=grad,
        start=start,
        positive=positive,
        names=names,
    )


def gamma_cf_moment_function(u_points: Sequence = DEFAULT_U_POINTS) -> MomentFunction:
    """Characteristic function matching for Gamma increments in (b, a)."""

    return cf_moment_function(
        u_points,
        lambda u, theta: complex(gamma_char_exponent(u[0], *theta)),
        lambda u, theta: gamma_char_exponent_grad(u[0], *theta),
        r_dim=2,
        start=lambda x: gamma_moment_start(x[:, 0]),
        names=("b", "a"),
    )


def estimate_from_increments(
    increments: IncrementSample,
    mf: MomentFunction,
    opt: Optional[OptimizerConfig] = None,
    h: Optional[float] = None,
) -> GmmResult:
    result = two_stage_estimate(increments, mf, opt)
    return replace(result, N=len(increments), h=h)


def estimate_from_observations(
    model: CarmaModel,
    ssr: StateSpaceRealization,
    series: SampledSeries,
    mf: MomentFunction,
    opt: Optional[OptimizerConfig] = None,
    cfg: Optional[RecoveryConfig] = None,
) -> GmmResult:
    """Recovers the unit increments from the series and estimates the Levy
    model from them by two-stage GMM."""

    if (ssr.p, ssr.q, ssr.m, ssr.d) != (model.p, model.q, model.m, model.d):
        raise ValueError("State space realization does not belong to the model")

    logger.info(f"Estimating from {series.N} unit intervals sampled at h={series.h}")
    recovered = recover_increments(ssr, series, cfg)

    return estimate_from_increments(recovered.increments, mf, opt, h=series.h)


def gamma_fisher_information(b: float, a: float) -> np.ndarray:
    """Minus the expected Hessian of the Gamma log-density in (b, a)."""

    return np.array([[a / b**2, 1.0 / b], [1.0 / b, float(trigamma(a))]])


def cf_moment_covariance(u_points: Sequence[float], cf: Callable) -> np.ndarray:
    """Covariance of the stacked (Re, Im) characteristic function moments of
    a univariate law, from the characteristic function at sums and
    differences of the u points."""

    points = _check_u_points(u_points)[:, 0]
    k = points.shape[0]
    omega = np.empty((2 * k, 2 * k))
    for i, u in enumerate(points):
        for j, v in enumerate(points):
            plus, minus = complex(cf(u + v)), complex(cf(u - v))
            cf_u, cf_v = complex(cf(u)), complex(cf(v))
            omega[2 * i, 2 * j] = 0.5 * (minus.real + plus.real) - cf_u.real * cf_v.real
            omega[2 * i + 1, 2 * j + 1] = (
                0.5 * (minus.real - plus.real) - cf_u.imag * cf_v.imag
            )
            omega[2 * i, 2 * j + 1] = (
                0.5 * (plus.imag - minus.imag) - cf_u.real * cf_v.imag
            )
            omega[2 * i + 1, 2 * j] = (
                0.5 * (plus.imag + minus.imag) - cf_u.imag * cf_v.real
            )

    return 0.5 * (omega + omega.T)
