import numpy as np
import pytest

from ouexec.model import ExecutionSpec, OUParams
from ouexec.strategy import bnp_gle_preset, cdu1_preset


def random_spd(rng, d, floor=0.1, scale=1.0):
    M = rng.normal(size=(d, d))
    return scale * (M @ M.T + floor * np.eye(d))


def random_stable_R(rng, d):
    """Generator whose eigenvalues all have positive real part."""
    M = rng.normal(size=(d, d))
    shift = max(0.0, -np.min(np.linalg.eigvals(M).real)) + 0.2
    return M + shift * np.eye(d)


def random_instance(rng, d, brownian=False):
    R = np.zeros((d, d)) if brownian else random_stable_R(rng, d)
    ou = OUParams(R, rng.uniform(20, 80, d), random_spd(rng, d, 0.2))
    ex = ExecutionSpec(random_spd(rng, d, 0.2, 1e-2), random_spd(rng, d, 0.0, 5.0), 10 ** rng.uniform(-3, -1), 1.0)
    return ou, ex


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def cdu1():
    return cdu1_preset()


@pytest.fixture(scope="session")
def pair():
    return bnp_gle_preset(2e-3)
