"""
Helper functions for the fixtures and test cases.
"""

from typing import Callable

import numpy as np

from carma_levy.matpoly import MatrixPolynomialMonic
from carma_levy.models.carma import CarmaModel


def random_monic(rng: np.random.Generator, r: int, s: int) -> MatrixPolynomialMonic:
    """Monic matrix polynomial with coefficients uniform in [-2, 2]."""

    return MatrixPolynomialMonic(rng.uniform(-2, 2, size=(r, s, s)))


def random_scalar_carma31(rng: np.random.Generator) -> CarmaModel:
    """Stable and invertible scalar CARMA(3,1): one real and a complex pair
    of autoregressive roots in the left half plane, moving average zero at
    -B_0 / B_1 < 0."""

    real = -rng.uniform(0.3, 2.0)
    pair = complex(-rng.uniform(0.2, 1.5), rng.uniform(0.1, 2.0))
    coeffs = np.real(np.poly([real, pair, pair.conjugate()]))

    return CarmaModel(
        p=3,
        q=1,
        A=coeffs[1:].tolist(),
        B=[rng.uniform(0.2, 3.0), rng.uniform(0.5, 2.0)],
    )


def numeric_gradient(f: Callable, x, eps: float = 1e-6) -> np.ndarray:
    """Central differences of f at x, one column per coordinate of x."""

    x = np.asarray(x, dtype=float)
    columns = []
    for i in range(x.shape[0]):
        step = np.zeros_like(x)
        step[i] = eps
        columns.append((np.asarray(f(x + step)) - np.asarray(f(x - step))) / (2 * eps))

    return np.stack(columns, axis=-1)
