"""
Driving Levy processes: characteristic triplets, increment samplers, moments
and the Gamma distribution analytics used by the estimators.
"""

import logging
from dataclasses import dataclass, field
from math import comb, factorial
from typing import Any, Callable

import numpy as np
import scipy.integrate
import scipy.special
import scipy.stats
from scipy.stats import qmc

from carma_levy.models.levy import (
    BrownianDrift,
    CompoundPoisson,
    DriftOnly,
    ExponentialJumps,
    GammaSubordinator,
    LevySpec,
    NormalJumps,
)


logger = logging.getLogger(__name__)

# Quasi Monte Carlo points for truncated moments of multivariate jump laws
QMC_POINTS = 2**14


@dataclass(frozen=True)
class LevyMeasure:
    """Symbolic Levy measure: a family tag plus its parameters. Moment
    integrals are dispatched on the family, so the descriptor serializes
    and never wraps a closure."""

    family: str
    dim: int
    params: dict[str, Any] = field(default_factory=dict)

    def _density(self) -> Callable[[float], float]:
        """Density of a univariate measure with respect to Lebesgue measure."""

        p = self.params
        if self.family == "gamma":
            return lambda x: p["a"] * np.exp(-x / p["b"]) / x if x > 0 else 0.0
        if self.family == "compound_poisson_exponential":
            return lambda x: p["rate"] * scipy.stats.expon.pdf(x, scale=p["scale"])
        if self.family == "compound_poisson_normal":
            sd = np.sqrt(p["cov"][0][0])
            return lambda x: p["rate"] * scipy.stats.norm.pdf(x, p["mean"][0], sd)

        raise ValueError(f"No density for Levy measure family {self.family}")

    def truncated_first_moment(self, inside: bool) -> np.ndarray:
        """Integral of x over {|x| < 1} (inside) or {|x| >= 1}."""

        if self.family == "zero":
            return np.zeros(self.dim)

        if self.family == "compound_poisson_normal" and self.dim > 1:
            p = self.params
            points = qmc.MultivariateNormalQMC(
                mean=p["mean"], cov=p["cov"], seed=0
            ).random(QMC_POINTS)
            mask = np.linalg.norm(points, axis=1) < 1
            if not inside:
                mask = ~mask
            return p["rate"] * (points * mask[:, None]).mean(axis=0)

        density = self._density()
        if inside:
            value = scipy.integrate.quad(lambda x: x * density(x), -1, 1, points=[0])[0]
        else:
            value = (
                scipy.integrate.quad(lambda x: x * density(x), 1, np.inf)[0]
                + scipy.integrate.quad(lambda x: x * density(x), -np.inf, -1)[0]
            )

        return np.array([value])

    def second_moment(self) -> np.ndarray:
        """Integral of x x^T over the whole space."""

        p = self.params
        if self.family == "zero":
            return np.zeros((self.dim, self.dim))
        if self.family == "gamma":
            return np.array([[p["a"] * p["b"] ** 2]])
        if self.family == "compound_poisson_exponential":
            return np.array([[2 * p["rate"] * p["scale"] ** 2]])
        if self.family == "compound_poisson_normal":
            mean = np.asarray(p["mean"], dtype=float)
            return p["rate"] * (np.asarray(p["cov"], dtype=float) + np.outer(mean, mean))

        raise ValueError(f"Unknown Levy measure family {self.family}")


@dataclass(frozen=True)
class CharacteristicTriplet:
    """(drift, Gaussian covariance, Levy measure) of the unit-time law, with
    drift relative to the truncation function of the unit ball."""

    drift: np.ndarray
    gaussian_cov: np.ndarray
    levy_measure: LevyMeasure

    @property
    def dim(self) -> int:
        return self.drift.shape[0]


@dataclass(frozen=True)
class IncrementSample:
    """N increments of an m-dimensional process over intervals of length
    spacing, one per row."""

    values: np.ndarray
    spacing: float = 1.0

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1:
            raise ValueError("An increment sample needs at least one row")
        if not np.all(np.isfinite(values)):
            raise ValueError("Increment sample contains non-finite values")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def _jump_measure(spec: CompoundPoisson) -> LevyMeasure:
    jumps = spec.jumps
    if isinstance(jumps, ExponentialJumps):
        return LevyMeasure(
            "compound_poisson_exponential",
            1,
            {"rate": spec.rate, "scale": jumps.scale},
        )

    return LevyMeasure(
        "compound_poisson_normal",
        jumps.dim,
        {"rate": spec.rate, "mean": list(jumps.mean), "cov": jumps.cov},
    )


def triplet_of(spec: LevySpec) -> CharacteristicTriplet:
    """Characteristic triplet of L(1)."""

    m = spec.dim
    zero_cov = np.zeros((m, m))

    if isinstance(spec, GammaSubordinator):
        measure = LevyMeasure("gamma", 1, {"b": spec.b, "a": spec.a})
        return CharacteristicTriplet(
            measure.truncated_first_moment(inside=True), zero_cov, measure
        )
    if isinstance(spec, BrownianDrift):
        return CharacteristicTriplet(
            np.asarray(spec.gamma, dtype=float),
            np.asarray(spec.sigma, dtype=float),
            LevyMeasure("zero", m),
        )
    if isinstance(spec, CompoundPoisson):
        measure = _jump_measure(spec)
        return CharacteristicTriplet(
            measure.truncated_first_moment(inside=True), zero_cov, measure
        )
    if isinstance(spec, DriftOnly):
        return CharacteristicTriplet(
            np.asarray(spec.gamma, dtype=float), zero_cov, LevyMeasure("zero", m)
        )

    raise TypeError(f"Unsupported Levy specification {type(spec).__name__}")


def unit_mean(spec: LevySpec) -> np.ndarray:
    """E L(1): drift plus the first moment of the big jumps; rate times the
    jump mean for compound Poisson drivers."""

    if isinstance(spec, CompoundPoisson):
        if isinstance(spec.jumps, NormalJumps):
            return spec.rate * np.asarray(spec.jumps.mean, dtype=float)
        return np.array([spec.rate * spec.jumps.scale])

    triplet = triplet_of(spec)
    return triplet.drift + triplet.levy_measure.truncated_first_moment(inside=False)


def unit_covariance(spec: LevySpec) -> np.ndarray:
    """Cov L(1) = gaussian covariance + second moment of the Levy measure."""

    triplet = triplet_of(spec)
    return triplet.gaussian_cov + triplet.levy_measure.second_moment()


def sample_increments(
    spec: LevySpec, dt: float, n: int, rng: np.random.Generator
) -> np.ndarray:
    """n independent draws from the law of L(dt), as an (n, m) array."""

    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")

    m = spec.dim
    if isinstance(spec, GammaSubordinator):
        # numpy uses Marsaglia-Tsang, boosted for shapes below one
        return rng.gamma(shape=spec.a * dt, scale=spec.b, size=(n, 1))
    if isinstance(spec, DriftOnly):
        return np.tile(np.asarray(spec.gamma, dtype=float) * dt, (n, 1))
    if isinstance(spec, BrownianDrift):
        return rng.multivariate_normal(
            np.asarray(spec.gamma, dtype=float) * dt,
            np.asarray(spec.sigma, dtype=float) * dt,
            size=n,
        )
    if isinstance(spec, CompoundPoisson):
        counts = rng.poisson(spec.rate * dt, size=n)
        total = int(counts.sum())
        if isinstance(spec.jumps, NormalJumps):
            jumps = rng.multivariate_normal(spec.jumps.mean, spec.jumps.cov, size=total)
        else:
            jumps = rng.exponential(spec.jumps.scale, size=(total, 1))
        out = np.zeros((n, m))
        np.add.at(out, np.repeat(np.arange(n), counts), jumps)
        return out

    raise TypeError(f"Unsupported Levy specification {type(spec).__name__}")


def sample_increment(spec: LevySpec, dt: float, rng: np.random.Generator) -> np.ndarray:
    """One draw from the law of L(dt)."""

    return sample_increments(spec, dt, 1, rng)[0]


def char_exponent(spec: LevySpec, u) -> complex:
    """Levy-Khintchine exponent psi(u), E exp(i<u, L(t)>) = exp(t psi(u))."""

    u = np.atleast_1d(np.asarray(u, dtype=float))

    if isinstance(spec, GammaSubordinator):
        return gamma_char_exponent(float(u[0]), spec.b, spec.a)
    if isinstance(spec, DriftOnly):
        return 1j * float(np.dot(spec.gamma, u))
    if isinstance(spec, BrownianDrift):
        sigma = np.asarray(spec.sigma, dtype=float)
        return 1j * float(np.dot(spec.gamma, u)) - 0.5 * float(u @ sigma @ u)
    if isinstance(spec, CompoundPoisson):
        jumps = spec.jumps
        if isinstance(jumps, NormalJumps):
            cov = np.asarray(jumps.cov, dtype=float)
            jump_cf = np.exp(1j * float(np.dot(jumps.mean, u)) - 0.5 * float(u @ cov @ u))
        else:
            jump_cf = 1.0 / (1.0 - 1j * jumps.scale * u[0])
        return complex(spec.rate * (jump_cf - 1.0))

    raise TypeError(f"Unsupported Levy specification {type(spec).__name__}")


def cumulant(spec: LevySpec, order: int, t: float = 1.0) -> float:
    """k-th cumulant of a univariate L(t); linear in t."""

    if spec.dim != 1:
        raise ValueError("Cumulants are only provided for univariate processes")
    if order < 1:
        raise ValueError("order must be at least 1")

    if isinstance(spec, GammaSubordinator):
        unit = spec.a * spec.b**order * factorial(order - 1)
    elif isinstance(spec, DriftOnly):
        unit = spec.gamma[0] if order == 1 else 0.0
    elif isinstance(spec, BrownianDrift):
        unit = {1: spec.gamma[0], 2: spec.sigma[0][0]}.get(order, 0.0)
    elif isinstance(spec, CompoundPoisson):
        if isinstance(spec.jumps, NormalJumps):
            law = scipy.stats.norm(spec.jumps.mean[0], np.sqrt(spec.jumps.cov[0][0]))
            jump_moment = law.moment(order)
        else:
            jump_moment = factorial(order) * spec.jumps.scale**order
        unit = spec.rate * jump_moment
    else:
        raise TypeError(f"Unsupported Levy specification {type(spec).__name__}")

    return float(unit) * t


def raw_moment(spec: LevySpec, order: int, t: float = 1.0) -> float:
    """E L(t)^k from the cumulants; a polynomial of degree k in t."""

    moments = [1.0]
    for n in range(1, order + 1):
        moments.append(
            sum(
                comb(n - 1, k - 1) * cumulant(spec, k, t) * moments[n - k]
                for k in range(1, n + 1)
            )
        )

    return moments[order]


def integrated_moments(
    spec: LevySpec,
    kernel: Callable[[float], np.ndarray],
    lower: float,
    upper: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the integral of kernel(s) dL(s) over
    [lower, upper] for a deterministic d x m kernel. The drift and the
    Gaussian part of the triplet are transported through the kernel and the
    jump part through its first two moments."""

    mean_l = unit_mean(spec)
    cov_l = unit_covariance(spec)

    mean = scipy.integrate.quad_vec(lambda s: kernel(s) @ mean_l, lower, upper)[0]
    cov = scipy.integrate.quad_vec(
        lambda s: kernel(s) @ cov_l @ kernel(s).T, lower, upper
    )[0]

    return np.atleast_1d(mean), np.atleast_2d(0.5 * (cov + cov.T))


def gamma_logpdf(x, b: float, a: float):
    """log f_{b,a}(x) of the Gamma law with scale b and shape a. Points
    x <= 0 have log-density -inf."""

    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = (
            -scipy.special.gammaln(a)
            - np.log(b)
            + (a - 1) * np.log(x / b)
            - x / b
        )

    return np.where(x > 0, value, -np.inf)


def gamma_cdf(x, b: float, a: float):
    """Regularized lower incomplete gamma function at x / b."""

    x = np.asarray(x, dtype=float)
    return scipy.special.gammainc(a, np.clip(x, 0, None) / b)


def gamma_score(x, b: float, a: float) -> np.ndarray:
    """Gradient of the log-density in (b, a); one row per point."""

    x = np.asarray(x, dtype=float)
    return np.stack(
        [(x / b - a) / b, np.log(x / b) - scipy.special.digamma(a)], axis=-1
    )


def gamma_score_jacobian(x, b: float, a: float) -> np.ndarray:
    """Hessian of the log-density in (b, a), shape (..., 2, 2)."""

    x = np.asarray(x, dtype=float)
    d_bb = a / b**2 - 2 * x / b**3
    d_ba = np.full_like(x, -1.0 / b)
    d_aa = np.full_like(x, -trigamma(a))

    return np.stack(
        [np.stack([d_bb, d_ba], axis=-1), np.stack([d_ba, d_aa], axis=-1)], axis=-2
    )


def trigamma(a):
    """Second derivative of log Gamma."""

    return scipy.special.polygamma(1, a)


def gamma_char_exponent(u, b: float, a: float):
    """-a log(1 - i b u) on the principal branch; 1 - i b u stays in the
    right half plane for real u."""

    return -a * np.log(1.0 - 1j * b * np.asarray(u, dtype=float))


def gamma_char_exponent_grad(u, b: float, a: float) -> np.ndarray:
    """Derivatives of gamma_char_exponent in (b, a)."""

    u = np.asarray(u, dtype=float)
    base = 1.0 - 1j * b * u

    return np.stack([1j * a * u / base, -np.log(base)], axis=-1)


def gamma_moment_start(values: np.ndarray) -> np.ndarray:
    """Method of moments (b, a) = (var / mean, mean^2 / var)."""

    mean = float(np.mean(values))
    var = float(np.var(values))
    if mean <= 0 or var <= 0:
        return np.array([1.0, 1.0])

    return np.array([var / mean, mean**2 / var])
