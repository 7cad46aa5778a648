"""
Exceptions raised by the toolkit. The CLI maps them onto exit codes:
configuration problems exit with 2, numerical failures with 3 and failed
acceptance gates with 4.
"""

from typing import Any, Optional


class CarmaLevyError(Exception):
    """Base class of all errors raised by the package."""

    pass


class ConfigError(CarmaLevyError):
    """Experiment configuration is well-formed but not usable, e.g. the
    sampling grid is not aligned with the Euler grid."""

    pass


class AcceptanceGateError(CarmaLevyError):
    """An experiment finished but one of its statistical gates failed."""

    pass


class NumericalError(CarmaLevyError):
    """Base class of numerical failures."""

    pass


class SingularMatrixError(NumericalError):
    """A matrix (or matrix polynomial evaluated at z) could not be inverted."""

    def __init__(self, message: str, z: Optional[complex] = None) -> None:
        super().__init__(message)
        self.z = z


class RankDeficiencyError(NumericalError):
    """A matrix does not have the rank an operation needs."""

    def __init__(self, message: str, rank: int, expected: int) -> None:
        super().__init__(f"{message} (numerical rank {rank}, expected {expected})")
        self.rank = rank
        self.expected = expected


class ModelAssumptionError(NumericalError, ValueError):
    """The CARMA coefficients violate the stability or the invertibility
    assumption. Subclasses ValueError so that pydantic validators report it
    as a validation error."""

    def __init__(self, message: str, assumption: str) -> None:
        super().__init__(f"{assumption} assumption violated: {message}")
        self.assumption = assumption


class SimulationBlowUpError(NumericalError):
    """The Euler recursion produced a non-finite state."""

    def __init__(self, step: int) -> None:
        super().__init__(f"Non-finite state at Euler step {step}")
        self.step = step


class InsufficientSamplesError(NumericalError):
    """A scheme needs a sample beyond the end of the observed series."""

    def __init__(self, needed_index: int, available: int) -> None:
        super().__init__(
            f"Sample index {needed_index} needed but only {available} samples "
            "are available"
        )
        self.needed_index = needed_index
        self.available = available


class DegenerateSampleError(NumericalError):
    """The increment sample cannot identify the parameters, e.g. every
    point lies outside the support of the model."""

    pass


class GmmConvergenceError(NumericalError):
    """The optimizer did not converge after all restarts. The best point
    found so far is kept for inspection."""

    def __init__(self, message: str, diagnostics: dict[str, Any]) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics
