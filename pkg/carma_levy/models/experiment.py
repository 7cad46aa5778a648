"""
Define the experiment config document and the report models written by the
experiment runs.
"""

from typing import Literal, Optional

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PositiveFloat,
    PositiveInt,
    model_validator,
)

from carma_levy.config import config
from carma_levy.models.carma import CarmaModel
from carma_levy.models.levy import GammaSubordinator, LevySpec


GRID_TOL = 1e-9


def _is_integral(ratio: float) -> bool:
    return round(ratio) >= 1 and abs(ratio - round(ratio)) <= GRID_TOL * max(1.0, ratio)


class EstimatorSpec(BaseModel):
    """Moment conditions used by the estimator. u_points only apply to
    characteristic function matching and default to (0.5, 1.0)."""

    model_config = ConfigDict(frozen=True)
    kind: Literal["gamma_mle", "cf"] = "gamma_mle"
    u_points: Optional[list[float]] = None


class ExperimentConfig(BaseModel):
    """A Monte Carlo experiment: the model and its driver, the horizon T in
    unit intervals, the Euler step and the sampling intervals to recover
    from."""

    model_config = ConfigDict(frozen=True)
    model: CarmaModel
    levy: LevySpec
    T: PositiveInt
    euler_dt: PositiveFloat = config.EULER_DT
    h_list: list[PositiveFloat] = Field(min_length=1)
    replications: PositiveInt = 100
    seed: int = Field(default=0, ge=0, lt=2**64)
    estimator: EstimatorSpec = EstimatorSpec()
    warmup: float = Field(default=0.0, ge=0)
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def check_grids(self) -> "ExperimentConfig":
        if self.levy.dim != self.model.m:
            raise ValueError(
                f"Driver dimension {self.levy.dim} does not match m={self.model.m}"
            )
        if not _is_integral(self.T / self.euler_dt):
            raise ValueError(f"T={self.T} is not a multiple of euler_dt")
        if self.warmup and not _is_integral(self.warmup / self.euler_dt):
            raise ValueError(f"warmup={self.warmup} is not a multiple of euler_dt")
        if len(set(self.h_list)) != len(self.h_list):
            raise ValueError("h_list contains duplicates")
        for h in self.h_list:
            if h > 1 or not _is_integral(1 / h):
                raise ValueError(f"1/h must be a positive integer, got h={h}")
            if not _is_integral(h / self.euler_dt):
                raise ValueError(f"h={h} is not a multiple of euler_dt={self.euler_dt}")

        return self

    def h_steps(self, h: float) -> int:
        """Index of h on the Euler grid."""
        return int(round(h / self.euler_dt))

    def horizon(self, h: float) -> float:
        """Simulated horizon: the trailing samples of the forward
        differences reach p - q - 1 steps of width h beyond T."""
        return self.T + (self.model.p - self.model.q - 1) * self.h_steps(h) * self.euler_dt

    @property
    def truth(self) -> Optional[list[float]]:
        """True (b, a) when the driver is a Gamma process."""

        if isinstance(self.levy, GammaSubordinator):
            return [self.levy.b, self.levy.a]
        return None


class ReplicationRow(BaseModel):
    """One replication. Failed replications keep the stage and message."""

    h: float
    replication: int
    seed_key: str
    theta: list[float] = []
    criterion: Optional[float] = None
    dropped: int = 0
    converged: bool = False
    mean_abs_error: Optional[float] = None
    stage: Optional[str] = None
    message: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.stage is not None


class HSummary(BaseModel):
    """Statistics of the estimates over the replications at one h."""

    h: float
    replications: int
    failures: int
    mean: list[float]
    std: list[float]
    covariance: list[list[float]]
    bias: Optional[list[float]] = None
    bias_norm: Optional[float] = None
    mean_abs_error: Optional[float] = None
    theoretical_covariance: Optional[list[list[float]]] = None
    normality: Optional[list[bool]] = None


class ExperimentReport(BaseModel):
    """Per h summaries, the replication rows behind them and an echo of the
    config that reproduces the run."""

    kind: Literal["single", "consistency", "clt"]
    truth: Optional[list[float]] = None
    summaries: list[HSummary]
    rows: list[ReplicationRow]
    config: ExperimentConfig
    timing: dict[str, float] = Field(default_factory=dict, exclude=True)


class Timing(BaseModel):
    """Wall-clock seconds per phase; not part of the reproducible output."""

    seconds: dict[str, float]
