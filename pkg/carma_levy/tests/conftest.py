"""
Configuration and fixtures for the tests.
"""

import os
from typing import Callable

import numpy as np
import pytest


os.environ["ENV_STATE"] = "test"
from carma_levy.carma import StateSpaceRealization, build_state_space
from carma_levy.models.carma import CarmaModel
from carma_levy.models.experiment import ExperimentConfig
from carma_levy.models.levy import DriftOnly, GammaSubordinator


@pytest.fixture()
def rng() -> np.random.Generator:
    """Fresh stream with a fixed seed for every test."""

    return np.random.default_rng(20240611)


@pytest.fixture()
def gamma_model() -> CarmaModel:
    """CARMA(3,1) with P(z) = z^3 + 2z^2 + 1.5z + 0.5 and Q(z) = 1 + z,
    autoregressive roots -1 and -0.5 +- 0.5i."""

    return CarmaModel(p=3, q=1, A=[2.0, 1.5, 0.5], B=[1.0, 1.0])


@pytest.fixture()
def gamma_ssr(gamma_model: CarmaModel) -> StateSpaceRealization:
    return build_state_space(gamma_model)


@pytest.fixture()
def gamma_driver() -> GammaSubordinator:
    return GammaSubordinator(b=2.0, a=1.0)


@pytest.fixture()
def drift_driver() -> DriftOnly:
    return DriftOnly(gamma=[1.0])


@pytest.fixture()
def make_config(gamma_model: CarmaModel, gamma_driver: GammaSubordinator) -> Callable:
    """Builds small experiment configs; keyword arguments override the
    defaults."""

    def factory(**overrides) -> ExperimentConfig:
        document = {
            "model": gamma_model,
            "levy": gamma_driver,
            "T": 20,
            "euler_dt": 0.002,
            "h_list": [0.1],
            "replications": 2,
            "seed": 7,
        }
        document.update(overrides)
        return ExperimentConfig(**document)

    return factory
