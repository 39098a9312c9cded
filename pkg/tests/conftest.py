import numpy as np
import pytest

from memgap.diffusion import DiffusionSchedule, GaussianMixture, sample_mixture


@pytest.fixture
def sched():
    return DiffusionSchedule(t0=1e-3, T=5.0)


@pytest.fixture
def gm4():
    return GaussianMixture.random(4, 2, seed=0)


@pytest.fixture
def data64(gm4):
    return sample_mixture(gm4, 64, seed=1)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
