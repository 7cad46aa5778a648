"""
Controller canonical state space realization of a CARMA model, Euler
simulation on a fine grid and subsampling onto the observation grid.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from carma_levy.config import config
from carma_levy.exceptions import ConfigError, NumericalError, SimulationBlowUpError
from carma_levy.levy import sample_increments, unit_covariance, unit_mean
from carma_levy.matpoly import companion, expm, solve_polynomial
from carma_levy.models.carma import CarmaModel
from carma_levy.models.levy import LevySpec


logger = logging.getLogger(__name__)

# Probe points in the closed right half plane never hit a stable pole
SELF_CHECK_PROBES = (0.0, 1j, 1.0 + 1.0j, 2.5 - 0.5j)
SELF_CHECK_TOL = 1e-8
GRID_TOL = 1e-9


def _grid_steps(length: float, step: float, what: str) -> int:
    """Number of steps of width step in length, which must be integral."""

    ratio = length / step
    steps = int(round(ratio))
    if steps < 1 or abs(ratio - steps) > GRID_TOL * max(1.0, ratio):
        raise ConfigError(f"{what} must be a positive integer, got {ratio:.12g}")

    return steps


@dataclass(frozen=True)
class StateSpaceRealization:
    """Matrices of the controller canonical realization dX = A X dt + Ep dL,
    Y = Bline X, together with the recovery operators Bbold, Eq and the
    coefficients of the increment estimator.

    Sq is the m x qm selector of the last block of X_q; the recovery
    coefficients apply it where the increment formulas pick out the block
    X^(q)."""

    p: int
    q: int
    m: int
    d: int
    A: np.ndarray
    Ep: np.ndarray
    Bline: np.ndarray
    Bbold: np.ndarray
    Eq: np.ndarray
    Sq: np.ndarray
    K_deriv: np.ndarray
    K_state: np.ndarray
    K_int: np.ndarray

    @property
    def extra_samples(self) -> int:
        """Trailing samples the highest forward difference needs."""
        return self.p - self.q - 1

    def transfer(self, z: complex) -> np.ndarray:
        """Bline (zI - A)^-1 Ep by a dense solve."""

        n = self.A.shape[0]
        try:
            return self.Bline @ np.linalg.solve(z * np.eye(n) - self.A, self.Ep)
        except np.linalg.LinAlgError as err:
            raise NumericalError(f"zI - A is singular at z={z}") from err


def _recovery_coefficients(model: CarmaModel, Bbold, Eq, Sq):
    p, q, m = model.p, model.q, model.m
    ar = model.ar_coeffs

    def a(i: int) -> np.ndarray:
        """A_i, 1-based."""
        return ar[i - 1]

    power = [np.eye(q * m)]
    for _ in range(p - q):
        power.append(power[-1] @ Bbold)

    k_deriv = []
    for nu in range(p - q):
        coef = Sq @ power[p - q - 1 - nu] @ Eq
        for k in range(nu, p - q - 1):
            coef = coef + a(p - q - k - 1) @ Sq @ power[k - nu] @ Eq
        k_deriv.append(coef)

    # A_q = [A_p ... A_(p-q+1)]
    ar_tail = np.hstack([a(p - j) for j in range(q)])
    k_state = np.linalg.solve(Bbold.T, ar_tail.T).T + Sq @ power[p - q]
    for k in range(1, p - q + 1):
        k_state = k_state + a(p - q - k + 1) @ Sq @ power[k - 1]

    b_inv = model.ma_left_inverse()
    k_int = a(p) @ np.linalg.solve(b_inv @ model.ma_coeffs[0], b_inv)

    return np.stack(k_deriv), k_state, k_int


def build_state_space(model: CarmaModel) -> StateSpaceRealization:
    """Assembles the controller canonical realization and the recovery
    coefficients. The model assumptions are checked again here."""

    model.check_assumptions()
    p, q, m, d = model.p, model.q, model.m, model.d

    A = companion(model.ar_poly).matrix
    Ep = np.zeros((p * m, m))
    Ep[(p - 1) * m :, :] = np.eye(m)
    Bline = np.zeros((d, p * m))
    for j, block in enumerate(model.ma_coeffs):
        Bline[:, j * m : (j + 1) * m] = block

    Bbold = companion(model.normalized_ma_poly()).matrix
    Eq = np.zeros((q * m, d))
    Eq[(q - 1) * m :, :] = model.ma_left_inverse()
    Sq = np.zeros((m, q * m))
    Sq[:, (q - 1) * m :] = np.eye(m)

    K_deriv, K_state, K_int = _recovery_coefficients(model, Bbold, Eq, Sq)

    ssr = StateSpaceRealization(
        p=p,
        q=q,
        m=m,
        d=d,
        A=A,
        Ep=Ep,
        Bline=Bline,
        Bbold=Bbold,
        Eq=Eq,
        Sq=Sq,
        K_deriv=K_deriv,
        K_state=K_state,
        K_int=K_int,
    )
    logger.debug(
        f"Built CARMA({p},{q}) realization with m={m}, d={d}, "
        f"|K_state|={np.linalg.norm(K_state):.4g}, |K_int|={np.linalg.norm(K_int):.4g}"
    )

    if config.DEBUG_SELF_CHECK:
        deviation = transfer_identity_check(ssr, model, SELF_CHECK_PROBES)
        if deviation > SELF_CHECK_TOL:
            raise NumericalError(
                f"Realization does not reproduce Q(z)P(z)^-1 (deviation {deviation:.3g})"
            )

    return ssr


def transfer_identity_check(
    ssr: StateSpaceRealization, model: CarmaModel, z_probes: Sequence[complex]
) -> float:
    """max over the probes of |Bline (zI - A)^-1 Ep - Q(z) P(z)^-1|."""

    deviation = 0.0
    for z in z_probes:
        p_inv = solve_polynomial(model.ar_poly, z, np.eye(model.m))
        expected = model.ma_poly(z) @ p_inv
        deviation = max(deviation, float(np.abs(ssr.transfer(z) - expected).max()))

    logger.debug(f"Transfer function deviation {deviation:.3g}")

    return deviation


@dataclass(frozen=True)
class FinePath:
    """Euler path on the grid 0, dt, ..., T. Rows of X, Y and L belong to
    the grid points; L is the driver path and starts at zero."""

    dt: float
    X: np.ndarray
    Y: np.ndarray
    L: np.ndarray

    @property
    def steps(self) -> int:
        return self.X.shape[0] - 1

    @property
    def T(self) -> float:
        return self.steps * self.dt


@dataclass(frozen=True)
class SampledSeries:
    """Y(0), Y(h), ..., Y(N + extra h) with 1/h integral, one row per time.
    extra = p - q - 1 trailing samples make every forward difference at
    n = N computable."""

    h: float
    N: int
    extra: int
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        object.__setattr__(self, "values", values)

        if self.h > 1:
            raise ConfigError(f"Sampling interval h={self.h} exceeds 1")
        if self.N < 1:
            raise ConfigError("Observation horizon N must be at least 1")
        expected = self.N * self.per_unit + self.extra + 1
        if values.shape[0] != expected:
            raise ConfigError(
                f"Series needs {expected} samples for N={self.N}, h={self.h}, "
                f"got {values.shape[0]}"
            )

    @property
    def per_unit(self) -> int:
        """Samples per unit interval, 1/h."""
        return _grid_steps(1.0, self.h, "1/h")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def truncate(self, N: int) -> "SampledSeries":
        """The same series over the shorter horizon N."""

        if not 1 <= N <= self.N:
            raise ValueError(f"Cannot truncate horizon {self.N} to {N}")
        length = N * self.per_unit + self.extra + 1
        return SampledSeries(self.h, N, self.extra, self.values[:length])


def _euler(A: np.ndarray, drive: np.ndarray, x0: np.ndarray, dt: float, offset: int):
    """X_(k+1) = X_k + A X_k dt + drive_k."""

    X = np.empty((drive.shape[0] + 1, x0.shape[0]))
    X[0] = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(drive.shape[0]):
            X[k + 1] = X[k] + (A @ X[k]) * dt + drive[k]

    finite = np.isfinite(X).all(axis=1)
    if not finite.all():
        raise SimulationBlowUpError(offset + int(np.argmin(finite)))

    return X


def simulate(
    model: CarmaModel,
    ssr: StateSpaceRealization,
    levy: LevySpec,
    T: float,
    dt: float,
    rng: np.random.Generator,
    x0: Optional[np.ndarray] = None,
    warmup: float = 0.0,
) -> FinePath:
    """Euler scheme X_(k+1) = X_k + A X_k dt + Ep dL_k on [0, T]. With a
    warm-up the state is first propagated for that long and the recorded
    path starts from the resulting state with L reset to zero."""

    if levy.dim != model.m:
        raise ConfigError(
            f"Driver dimension {levy.dim} does not match the model's m={model.m}"
        )
    steps = _grid_steps(T, dt, "T/dt")
    state = np.zeros(model.p * model.m) if x0 is None else np.asarray(x0, float)
    if state.shape != (model.p * model.m,):
        raise ConfigError(f"x0 must have length {model.p * model.m}")

    warmup_steps = _grid_steps(warmup, dt, "warmup/dt") if warmup > 0 else 0
    if warmup_steps:
        logger.debug(f"Warm-up over {warmup_steps} Euler steps")
        warm = sample_increments(levy, dt, warmup_steps, rng) @ ssr.Ep.T
        state = _euler(ssr.A, warm, state, dt, offset=0)[-1]

    logger.debug(f"Simulating {steps} Euler steps of width {dt}")
    increments = sample_increments(levy, dt, steps, rng)
    X = _euler(ssr.A, increments @ ssr.Ep.T, state, dt, offset=warmup_steps)

    L = np.zeros((steps + 1, model.m))
    np.cumsum(increments, axis=0, out=L[1:])

    return FinePath(dt=dt, X=X, Y=X @ ssr.Bline.T, L=L)


def _sampling_rows(path: FinePath, h: float, N: int, extra: int) -> slice:
    """Rows of the fine grid at 0, h, ..., N + extra h."""

    stride = _grid_steps(h, path.dt, "h/dt")
    per_unit = _grid_steps(1.0, h, "1/h")
    count = N * per_unit + extra + 1
    last = (count - 1) * stride
    if last > path.steps:
        raise ConfigError(
            f"Sampling up to N + {extra}h = {N + extra * h:g} needs a path of "
            f"length {last * path.dt:g}, simulated T={path.T:g}"
        )

    return slice(0, last + 1, stride)


def sample(path: FinePath, h: float, N: int, extra: int) -> SampledSeries:
    """Y(0), Y(h), ..., Y(N + extra h) read off the fine grid without
    interpolation."""

    return SampledSeries(
        h=h, N=N, extra=extra, values=path.Y[_sampling_rows(path, h, N, extra)]
    )


def sample_driver(path: FinePath, h: float, N: int, extra: int) -> np.ndarray:
    """L on the grid of sample(path, h, N, extra)."""
    return path.L[_sampling_rows(path, h, N, extra)]


def true_unit_increments(path: FinePath, N: Optional[int] = None) -> np.ndarray:
    """L(n) - L(n-1) for n = 1..N from the stored driver path; N defaults to
    every complete unit interval."""

    stride = _grid_steps(1.0, path.dt, "1/dt")
    available = path.steps // stride
    N = available if N is None else N
    if N > available:
        raise ConfigError(f"Path covers {available} unit intervals, {N} requested")

    return np.diff(path.L[: N * stride + 1 : stride], axis=0)


@dataclass(frozen=True)
class StationaryMoments:
    mean_x: np.ndarray
    cov_x: np.ndarray
    mean_y: np.ndarray
    cov_y: np.ndarray


def stationary_moments(ssr: StateSpaceRealization, levy: LevySpec) -> StationaryMoments:
    """Mean (-A)^-1 Ep E L(1) and the covariance V solving
    A V + V A^T + Ep Cov L(1) Ep^T = 0, and their images under Bline."""

    mean_x = np.linalg.solve(-ssr.A, ssr.Ep @ unit_mean(levy))
    noise = ssr.Ep @ unit_covariance(levy) @ ssr.Ep.T
    cov_x = scipy.linalg.solve_continuous_lyapunov(ssr.A, -noise)
    cov_x = 0.5 * (cov_x + cov_x.T)

    return StationaryMoments(
        mean_x=mean_x,
        cov_x=cov_x,
        mean_y=ssr.Bline @ mean_x,
        cov_y=ssr.Bline @ cov_x @ ssr.Bline.T,
    )


def kernel(ssr: StateSpaceRealization, t: float) -> np.ndarray:
    """Moving average kernel Bline e^(At) Ep, zero for t < 0."""

    if t < 0:
        return np.zeros((ssr.d, ssr.m))

    return ssr.Bline @ expm(ssr.A * t) @ ssr.Ep
