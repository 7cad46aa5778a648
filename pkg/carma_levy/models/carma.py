"""
Define the CARMA model as it appears in the experiment config, e.g.
{"p": 3, "q": 1, "m": 1, "d": 1, "A": [2, 1.5, 0.5], "B": [1, 1]}.
A lists A_1..A_p and B lists B_0..B_q; scalars stand for 1x1 matrices.
"""

from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveInt, field_validator, model_validator

from carma_levy.exceptions import ModelAssumptionError, RankDeficiencyError
from carma_levy.matpoly import (
    MatrixPolynomialGeneral,
    MatrixPolynomialMonic,
    companion,
    is_hurwitz,
    left_inverse,
)


def _as_matrix(value: Any) -> Any:
    if isinstance(value, (int, float)):
        return [[float(value)]]

    return value


class CarmaModel(BaseModel):
    """Controller form coefficients of P(z) = z^p I + A_1 z^(p-1) + ... + A_p
    and Q(z) = B_0 + B_1 z + ... + B_q z^q. Stability and invertibility are
    checked when the model is created."""

    model_config = ConfigDict(frozen=True)
    p: PositiveInt
    q: PositiveInt
    m: PositiveInt = 1
    d: PositiveInt = 1
    A: list[list[list[float]]]
    B: list[list[list[float]]]

    @field_validator("A", "B", mode="before")
    @classmethod
    def coerce_scalars(cls, value: Any) -> Any:
        if isinstance(value, (list, tuple)):
            return [_as_matrix(item) for item in value]

        return value

    @model_validator(mode="after")
    def check_model(self) -> "CarmaModel":
        if self.p <= self.q:
            raise ValueError(f"Orders need p > q, got p={self.p}, q={self.q}")
        if self.m > self.d:
            raise ValueError(f"Driver dimension m={self.m} exceeds d={self.d}")

        ar, ma = np.asarray(self.A, dtype=float), np.asarray(self.B, dtype=float)
        if ar.shape != (self.p, self.m, self.m):
            raise ValueError(
                f"A must hold {self.p} matrices of shape {self.m}x{self.m}, "
                f"got shape {ar.shape}"
            )
        if ma.shape != (self.q + 1, self.d, self.m):
            raise ValueError(
                f"B must hold {self.q + 1} matrices of shape {self.d}x{self.m}, "
                f"got shape {ma.shape}"
            )

        self.check_assumptions()
        return self

    @property
    def ar_coeffs(self) -> np.ndarray:
        """A_1..A_p as a (p, m, m) array."""
        return np.asarray(self.A, dtype=float)

    @property
    def ma_coeffs(self) -> np.ndarray:
        """B_0..B_q as a (q + 1, d, m) array."""
        return np.asarray(self.B, dtype=float)

    @property
    def ar_poly(self) -> MatrixPolynomialMonic:
        return MatrixPolynomialMonic(self.ar_coeffs)

    @property
    def ma_poly(self) -> MatrixPolynomialGeneral:
        return MatrixPolynomialGeneral(self.ma_coeffs)

    def ma_left_inverse(self) -> np.ndarray:
        """Left inverse of B_q."""

        try:
            return left_inverse(self.ma_coeffs[-1])
        except RankDeficiencyError as err:
            raise ModelAssumptionError(
                f"B_q must have full column rank ({err})", "invertibility"
            ) from err

    def normalized_ma_poly(self) -> MatrixPolynomialMonic:
        """z^q I + B_q^~1 B_(q-1) z^(q-1) + ... + B_q^~1 B_0."""

        b_inv = self.ma_left_inverse()
        ma = self.ma_coeffs
        return MatrixPolynomialMonic(
            np.stack([b_inv @ ma[self.q - k] for k in range(1, self.q + 1)])
        )

    def check_assumptions(self) -> None:
        """Raises ModelAssumptionError naming the assumption that fails."""

        if not is_hurwitz(companion(self.ar_poly).matrix):
            raise ModelAssumptionError(
                "zeros of det P(z) must have strictly negative real parts",
                "stability",
            )

        b_inv = self.ma_left_inverse()
        if np.linalg.matrix_rank(b_inv @ self.ma_coeffs[0]) < self.m:
            raise ModelAssumptionError(
                "B_q^~1 B_0 must be invertible", "invertibility"
            )
        if not is_hurwitz(companion(self.normalized_ma_poly()).matrix):
            raise ModelAssumptionError(
                "zeros of det(B_q^~1 Q(z)) must have strictly negative real parts",
                "invertibility",
            )
