"""
Recovery of the unit increments of the driving Levy process from a CARMA
series observed on the grid 0, h, 2h, ...: forward differences, trapezoidal
rule, the X_q recursion and the increment estimator built from them.
"""

import logging
from dataclasses import dataclass
from math import comb
from typing import Callable, Optional, Union

import numpy as np
import scipy.stats
from numpy.lib.stride_tricks import sliding_window_view

from carma_levy.carma import GRID_TOL, SampledSeries, StateSpaceRealization
from carma_levy.exceptions import InsufficientSamplesError
from carma_levy.levy import IncrementSample
from carma_levy.matpoly import expm


logger = logging.getLogger(__name__)

KernelLike = Union[Callable[[float], np.ndarray], np.ndarray]


@dataclass(frozen=True)
class RecoveryConfig:
    """Initial value of the X_q recursion (zero by default) and whether to
    keep the additive terms of every recovered increment."""

    xq0: Optional[np.ndarray] = None
    diagnostics: bool = False


@dataclass(frozen=True)
class RecoveryDiagnostics:
    forward_differences: np.ndarray
    trapezoids: np.ndarray
    deriv_term: np.ndarray
    state_term: np.ndarray
    int_term: np.ndarray


@dataclass(frozen=True)
class RecoveryOutput:
    increments: IncrementSample
    xq_path: np.ndarray
    diagnostics: Optional[RecoveryDiagnostics] = None

    @property
    def N(self) -> int:
        return len(self.increments)


@dataclass(frozen=True)
class RecoveryError:
    """Per increment errors and their mean norm."""

    errors: np.ndarray
    mean_abs: float


def _difference_coeffs(nu: int) -> np.ndarray:
    return np.array([(-1) ** (nu - i) * comb(nu, i) for i in range(nu + 1)], float)


def _forward_differences(values: np.ndarray, nu: int, h: float, indices) -> np.ndarray:
    indices = np.atleast_1d(indices)
    needed = int(indices.max()) + nu
    if needed >= values.shape[0]:
        raise InsufficientSamplesError(needed, values.shape[0])

    coeffs = _difference_coeffs(nu)
    total = sum(c * values[indices + i] for i, c in enumerate(coeffs))

    return total / h**nu


def forward_difference(series, nu: int, h: float, t_index: int) -> np.ndarray:
    """h^-nu sum_i (-1)^(nu-i) C(nu, i) f(t + ih) with t the sample at
    t_index; nu = 0 returns f(t)."""

    if nu < 0:
        raise ValueError("nu must be non-negative")
    values = np.asarray(series, dtype=float)
    if values.ndim == 1:
        values = values[:, None]

    return _forward_differences(values, nu, h, t_index)[0]


def trapezoid_weights(K: int, h: float) -> np.ndarray:
    """h/2, h, ..., h, h/2 over K intervals."""

    weights = np.full(K + 1, h)
    weights[[0, -1]] = h / 2

    return weights


def trapezoid(segment, h: float, kernel: Optional[KernelLike] = None) -> np.ndarray:
    """Composite trapezoid over a unit interval [n - 1, n] sampled at
    spacing h. A kernel g is applied as g(n - s) f(s); it is either a
    function of the offset n - s or its values at offsets 1, 1 - h, ..., 0."""

    values = np.asarray(segment, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    ratio = 1.0 / h
    K = int(round(ratio))
    if K < 1 or abs(ratio - K) > GRID_TOL * max(1.0, ratio):
        raise ValueError(f"1/h must be a positive integer, got h={h}")
    if values.shape[0] != K + 1:
        raise ValueError(
            f"Segment needs {K + 1} points for h={h}, got {values.shape[0]}"
        )

    weights = trapezoid_weights(K, h)
    if kernel is None:
        return weights @ values

    if callable(kernel):
        kernel = np.stack([np.atleast_2d(kernel(1.0 - j * h)) for j in range(K + 1)])

    return np.einsum("j,jrd,jd->r", weights, np.asarray(kernel, float), values)


def _unit_windows(series: SampledSeries) -> np.ndarray:
    """(N, K + 1, d) samples of every unit interval [n - 1, n]."""

    K = series.per_unit
    windows = sliding_window_view(series.values[: series.N * K + 1], K + 1, axis=0)
    return np.moveaxis(windows[::K], -1, 1)


def xq_kernels(ssr: StateSpaceRealization, h: float) -> np.ndarray:
    """expm(Bbold (1 - jh)) Eq for j = 0..1/h, the kernel of the X_q
    integral at the grid offsets of a unit interval."""

    K = int(round(1.0 / h))
    step = expm(ssr.Bbold * h)
    powers = [np.eye(step.shape[0])]
    for _ in range(K):
        powers.append(step @ powers[-1])

    return np.stack([powers[K - j] @ ssr.Eq for j in range(K + 1)])


def _xq_integrals(ssr: StateSpaceRealization, series: SampledSeries) -> np.ndarray:
    weights = trapezoid_weights(series.per_unit, series.h)
    kernels = xq_kernels(ssr, series.h)

    return np.einsum("j,jrd,njd->nr", weights, kernels, _unit_windows(series))


def _initial_state(ssr: StateSpaceRealization, cfg: RecoveryConfig) -> np.ndarray:
    size = ssr.q * ssr.m
    if cfg.xq0 is None:
        return np.zeros(size)

    xq0 = np.asarray(cfg.xq0, dtype=float)
    if xq0.shape != (size,):
        raise ValueError(f"xq0 must have length {size}, got shape {xq0.shape}")

    return xq0


def xq_recursion(
    ssr: StateSpaceRealization, series: SampledSeries, cfg: RecoveryConfig
) -> np.ndarray:
    """X_q(n) = expm(Bbold) X_q(n - 1) + trapezoid of
    expm(Bbold (n - s)) Eq Y(s) over [n - 1, n], for n = 0..N."""

    if series.dim != ssr.d:
        raise ValueError(f"Series has dimension {series.dim}, model has d={ssr.d}")

    propagator = expm(ssr.Bbold)
    integrals = _xq_integrals(ssr, series)

    path = np.empty((series.N + 1, ssr.q * ssr.m))
    path[0] = _initial_state(ssr, cfg)
    for n in range(1, series.N + 1):
        path[n] = propagator @ path[n - 1] + integrals[n - 1]

    return path


def recover_increments(
    ssr: StateSpaceRealization, series: SampledSeries, cfg: Optional[RecoveryConfig] = None
) -> RecoveryOutput:
    """Estimates L(n) - L(n-1), n = 1..N, from the series."""

    cfg = cfg or RecoveryConfig()
    K, N = series.per_unit, series.N
    needed = N * K + ssr.extra_samples
    if needed >= series.values.shape[0]:
        raise InsufficientSamplesError(needed, series.values.shape[0])

    logger.debug(f"Recovering {N} increments at h={series.h}")

    xq_path = xq_recursion(ssr, series, cfg)
    unit_points = np.arange(N + 1) * K
    differences = np.stack(
        [
            _forward_differences(series.values, nu, series.h, unit_points)
            for nu in range(ssr.p - ssr.q)
        ]
    )
    trapezoids = np.einsum(
        "j,njd->nd", trapezoid_weights(K, series.h), _unit_windows(series)
    )

    deriv_term = np.einsum("vmd,vnd->nm", ssr.K_deriv, np.diff(differences, axis=1))
    state_term = np.diff(xq_path, axis=0) @ ssr.K_state.T
    int_term = trapezoids @ ssr.K_int.T

    diagnostics = None
    if cfg.diagnostics:
        diagnostics = RecoveryDiagnostics(
            forward_differences=differences,
            trapezoids=trapezoids,
            deriv_term=deriv_term,
            state_term=state_term,
            int_term=int_term,
        )

    return RecoveryOutput(
        increments=IncrementSample(deriv_term + state_term + int_term),
        xq_path=xq_path,
        diagnostics=diagnostics,
    )


def recover_state_blocks(
    ssr: StateSpaceRealization, series: SampledSeries, xq_path: np.ndarray, n: int
) -> np.ndarray:
    """Upper blocks X^(q+1..p)(n) reconstructed from X_q(n) and forward
    differences of Y at time n, one row per block."""

    index = n * series.per_unit
    differences = [
        forward_difference(series.values, nu, series.h, index)
        for nu in range(ssr.p - ssr.q)
    ]

    blocks = []
    state = xq_path[n]
    inner = np.zeros_like(state)
    for order in range(1, ssr.p - ssr.q + 1):
        # B^k X_q + sum_nu B^(k-1-nu) Eq D^nu Y, accumulated one power at a time
        state = ssr.Bbold @ state
        inner = ssr.Bbold @ inner + ssr.Eq @ differences[order - 1]
        blocks.append(ssr.Sq @ (state + inner))

    return np.stack(blocks)


def recovery_error(output: RecoveryOutput, truth) -> RecoveryError:
    """Errors of the recovered increments against the true ones."""

    truth = np.asarray(truth, dtype=float).reshape(output.increments.values.shape)
    errors = output.increments.values - truth

    return RecoveryError(
        errors=errors, mean_abs=float(np.linalg.norm(errors, axis=1).mean())
    )


def ks_distance(sample, cdf: Callable) -> float:
    """Kolmogorov distance between the empirical CDF of a univariate sample
    and cdf."""

    values = np.asarray(sample, dtype=float).ravel()
    return float(scipy.stats.kstest(values, cdf).statistic)
