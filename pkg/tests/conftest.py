import sys
from pathlib import Path

import numpy as np
import pytest

import qtrack as q

sys.path.insert(0, str(Path(__file__).parent))

TRUTH = {"omega": 1.0, "eta": 0.7, "delta": 0.2, "kappa": 0.1}
INIT_1A = {"omega": 1.3, "eta": 0.6, "delta": 0.3, "kappa": 0.15}
DT = 1e-2


def truth_tuple():
    return tuple(TRUTH[n] for n in q.PARAM_ORDER)


@pytest.fixture(scope="session")
def model():
    return q.two_level_example(TRUTH["omega"], TRUTH["delta"], TRUTH["eta"], TRUTH["kappa"], DT)


@pytest.fixture(scope="session")
def theta_true(model):
    return q.working_point(model, **TRUTH)


@pytest.fixture(scope="session")
def record_factory(model):
    cache = {}

    def make(seed, steps=20_000):
        key = (seed, steps)
        if key not in cache:
            cache[key] = q.simulate(model, q.TruthSchedule.static(truth_tuple()), steps, seed,
                                    decimation=steps).dy_all
        return cache[key]

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
