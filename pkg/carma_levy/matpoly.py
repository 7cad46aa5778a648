"""
Matrix polynomials and their multi-companion matrices: closed form resolvent,
stability test, left inverses and the matrix exponential.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from carma_levy.exceptions import NumericalError, RankDeficiencyError, SingularMatrixError


logger = logging.getLogger(__name__)

# Real parts closer to zero than this are never treated as stable
HURWITZ_TOL = 1e-12
# Reciprocal condition number below which R(z) counts as singular
SINGULAR_RCOND = 1e-14


def _as_blocks(coeffs, name: str) -> np.ndarray:
    """Stacks a sequence of matrices into a (k, rows, cols) float array."""

    blocks = np.asarray(coeffs, dtype=float)
    if blocks.ndim == 1:
        blocks = blocks.reshape(-1, 1, 1)
    if blocks.ndim != 3:
        raise ValueError(f"{name} must be a sequence of matrices")

    return blocks


@dataclass(frozen=True)
class MatrixPolynomialMonic:
    """R(z) = z^r + M_1 z^(r-1) + ... + M_r with s x s coefficients. The
    leading identity coefficient is implicit."""

    coeffs: np.ndarray

    def __post_init__(self) -> None:
        blocks = _as_blocks(self.coeffs, "coeffs")
        if blocks.shape[0] < 1 or blocks.shape[1] != blocks.shape[2]:
            raise ValueError("coeffs must be a non-empty list of square matrices")
        object.__setattr__(self, "coeffs", blocks)

    @property
    def block_dim(self) -> int:
        return self.coeffs.shape[1]

    @property
    def degree(self) -> int:
        return self.coeffs.shape[0]

    def __call__(self, z: complex) -> np.ndarray:
        r, s = self.degree, self.block_dim
        value = np.eye(s, dtype=complex) * z**r
        for k in range(1, r + 1):
            value = value + self.coeffs[k - 1] * z ** (r - k)

        return value


@dataclass(frozen=True)
class MatrixPolynomialGeneral:
    """Q(z) = B_0 + B_1 z + ... + B_q z^q with d x m coefficients."""

    coeffs: np.ndarray

    def __post_init__(self) -> None:
        blocks = _as_blocks(self.coeffs, "coeffs")
        if blocks.shape[0] < 1:
            raise ValueError("coeffs must contain at least B_0")
        object.__setattr__(self, "coeffs", blocks)

    @property
    def rows(self) -> int:
        return self.coeffs.shape[1]

    @property
    def cols(self) -> int:
        return self.coeffs.shape[2]

    @property
    def degree(self) -> int:
        return self.coeffs.shape[0] - 1

    def __call__(self, z: complex) -> np.ndarray:
        value = np.zeros((self.rows, self.cols), dtype=complex)
        for j, block in enumerate(self.coeffs):
            value = value + block * z**j

        return value


@dataclass(frozen=True)
class CompanionMatrix:
    """Dense rs x rs multi-companion matrix of a monic matrix polynomial."""

    block_dim: int
    degree: int
    matrix: np.ndarray


def companion(poly: MatrixPolynomialMonic) -> CompanionMatrix:
    """Identity blocks on the block super-diagonal, (-M_r, ..., -M_1) in the
    last block row."""

    r, s = poly.degree, poly.block_dim
    matrix = np.zeros((r * s, r * s))
    matrix[: (r - 1) * s, s:] = np.eye((r - 1) * s)
    for k in range(1, r + 1):
        col = (r - k) * s
        matrix[(r - 1) * s :, col : col + s] = -poly.coeffs[k - 1]

    return CompanionMatrix(block_dim=s, degree=r, matrix=matrix)


def solve_polynomial(poly: MatrixPolynomialMonic, z: complex, rhs: np.ndarray):
    """Computes R(z)^-1 rhs, reporting a singular R(z) together with z."""

    value = poly(z)
    if np.linalg.cond(value) * SINGULAR_RCOND > 1:
        raise SingularMatrixError(f"R(z) is singular at z={z}", z=z)
    try:
        return np.linalg.solve(value, rhs)
    except np.linalg.LinAlgError as err:
        raise SingularMatrixError(f"R(z) is singular at z={z}", z=z) from err


def resolvent_block(
    poly: MatrixPolynomialMonic, z: complex, i: int, j: int
) -> np.ndarray:
    """Block (i, j), 1-based, of (z I - M)^-1 for the companion matrix M of
    the polynomial, without inverting the rs x rs matrix."""

    r, s = poly.degree, poly.block_dim
    if not (1 <= i <= r and 1 <= j <= r):
        raise ValueError(f"Block indices must lie in 1..{r}, got ({i}, {j})")

    if j >= i:
        numerator = np.eye(s, dtype=complex) * z ** (r - 1 + i - j)
        for k in range(1, r - j + 1):
            numerator = numerator + poly.coeffs[k - 1] * z ** (r - 1 - k + i - j)
    else:
        numerator = np.zeros((s, s), dtype=complex)
        for k in range(r - j + 1, r + 1):
            numerator = numerator - poly.coeffs[k - 1] * z ** (r - 1 - k + i - j)

    return solve_polynomial(poly, z, numerator)


def resolvent(poly: MatrixPolynomialMonic, z: complex) -> np.ndarray:
    """Assembles all blocks of the closed form resolvent."""

    r, s = poly.degree, poly.block_dim
    full = np.zeros((r * s, r * s), dtype=complex)
    for i in range(1, r + 1):
        for j in range(1, r + 1):
            full[(i - 1) * s : i * s, (j - 1) * s : j * s] = resolvent_block(
                poly, z, i, j
            )

    return full


def is_hurwitz(matrix: np.ndarray, margin: float = 0.0) -> bool:
    """True iff every eigenvalue has real part below -margin. Eigenvalues
    within HURWITZ_TOL of the imaginary axis are rejected."""

    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"Expected a square matrix, got shape {matrix.shape}")
    if margin < 0:
        raise ValueError("margin must be non-negative")

    try:
        eigenvalues = np.linalg.eigvals(matrix)
    except np.linalg.LinAlgError as err:
        raise NumericalError("Eigenvalue computation did not converge") from err

    bound = -max(margin, HURWITZ_TOL)
    logger.debug(f"Spectral abscissa {eigenvalues.real.max():.6g}, bound {bound}")

    return bool(np.all(eigenvalues.real < bound))


def left_inverse(matrix: np.ndarray) -> np.ndarray:
    """(M^T M)^-1 M^T for a d x m matrix of full column rank m <= d."""

    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    d, m = matrix.shape
    rank = int(np.linalg.matrix_rank(matrix))
    if m > d or rank < m:
        raise RankDeficiencyError("Left inverse needs full column rank", rank, m)

    return np.linalg.solve(matrix.T @ matrix, matrix.T)


def expm(matrix: np.ndarray) -> np.ndarray:
    """Matrix exponential by Pade scaling and squaring."""

    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"Expected a square matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise NumericalError("Matrix exponential of a non-finite matrix")

    return scipy.linalg.expm(matrix)
