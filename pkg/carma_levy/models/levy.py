"""
Define the parametric driving process models as they appear in the
experiment config, e.g. {"family": "gamma", "b": 2.0, "a": 1.0}.
"""

from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, model_validator


def _check_covariance(cov: list[list[float]], dim: int, name: str) -> None:
    matrix = np.asarray(cov, dtype=float)
    if matrix.shape != (dim, dim):
        raise ValueError(f"{name} must be {dim}x{dim}, got shape {matrix.shape}")
    if not np.allclose(matrix, matrix.T):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(matrix).min() < -1e-12:
        raise ValueError(f"{name} must be positive semi-definite")


class GammaSubordinator(BaseModel):
    """Gamma process; unit increments are Gamma with scale b and shape a."""

    model_config = ConfigDict(frozen=True)
    family: Literal["gamma"] = "gamma"
    b: PositiveFloat
    a: PositiveFloat

    @property
    def dim(self) -> int:
        return 1


class BrownianDrift(BaseModel):
    """Brownian motion with drift gamma and covariance sigma per unit time."""

    model_config = ConfigDict(frozen=True)
    family: Literal["brownian"] = "brownian"
    gamma: list[float]
    sigma: list[list[float]]

    @model_validator(mode="after")
    def check_sigma(self) -> "BrownianDrift":
        _check_covariance(self.sigma, len(self.gamma), "sigma")
        return self

    @property
    def dim(self) -> int:
        return len(self.gamma)


class NormalJumps(BaseModel):
    """Gaussian jump sizes."""

    model_config = ConfigDict(frozen=True)
    law: Literal["normal"] = "normal"
    mean: list[float]
    cov: list[list[float]]

    @model_validator(mode="after")
    def check_cov(self) -> "NormalJumps":
        _check_covariance(self.cov, len(self.mean), "cov")
        return self

    @property
    def dim(self) -> int:
        return len(self.mean)


class ExponentialJumps(BaseModel):
    """Exponentially distributed (positive, univariate) jump sizes."""

    model_config = ConfigDict(frozen=True)
    law: Literal["exponential"] = "exponential"
    scale: PositiveFloat

    @property
    def dim(self) -> int:
        return 1


JumpLaw = Annotated[Union[NormalJumps, ExponentialJumps], Field(discriminator="law")]


class CompoundPoisson(BaseModel):
    """Compound Poisson process with jump intensity rate per unit time."""

    model_config = ConfigDict(frozen=True)
    family: Literal["compound_poisson"] = "compound_poisson"
    rate: PositiveFloat
    jumps: JumpLaw

    @property
    def dim(self) -> int:
        return self.jumps.dim


class DriftOnly(BaseModel):
    """Deterministic linear drift L(t) = gamma t."""

    model_config = ConfigDict(frozen=True)
    family: Literal["drift"] = "drift"
    gamma: list[float] = Field(min_length=1)

    @property
    def dim(self) -> int:
        return len(self.gamma)


LevySpec = Annotated[
    Union[GammaSubordinator, BrownianDrift, CompoundPoisson, DriftOnly],
    Field(discriminator="family"),
]
