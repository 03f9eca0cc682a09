import functools

import numpy as np
import pytest

from fimcharge.ecm import ScenarioConfig, ThetaVector
from fimcharge.oed import GaConfig, PenaltySpec, design

NOMINAL = ThetaVector.from_physical(0.06, 1000.0, 7200.0, 0.03)
TRUE = ThetaVector.from_physical(0.05, 950.0, 1.9 * 3600.0, 0.03)


@pytest.fixture
def nominal():
    return NOMINAL


@pytest.fixture
def cfg():
    return ScenarioConfig(nominal_theta=NOMINAL, true_theta=TRUE)


@functools.lru_cache(maxsize=None)
def short_design(seed: int = 0):
    """A cheap GA run (few generations); feasible but not optimised."""
    cfg = ScenarioConfig(nominal_theta=NOMINAL, true_theta=TRUE)
    return design(cfg, GaConfig(population=16, generations=4, seed=seed), PenaltySpec())


@pytest.fixture
def short_ref():
    return short_design(0).reference


def random_currents(rng, n_steps=1800, seg=30, lo=-6.0, hi=6.0):
    return np.repeat(rng.uniform(lo, hi, n_steps // seg), seg)
