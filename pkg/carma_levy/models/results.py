"""
Define the serialized form of estimation results.
"""

from typing import Optional

from pydantic import BaseModel


class GmmResultOut(BaseModel):
    """GMM estimate as written to result JSON files."""

    theta: list[float]
    sigma: list[list[float]]
    criterion: float
    N: Optional[int] = None
    h: Optional[float] = None
    dropped: int = 0
    converged: bool
    flagged: bool = False
    weighting: list[list[float]]
    iterations: int
    restarts: int
    warnings: list[str] = []


class RecoverySummary(BaseModel):
    """Quality of the recovered increments of one path."""

    h: float
    N: int
    mean_abs_error: Optional[float] = None
    ks_distance: Optional[float] = None
