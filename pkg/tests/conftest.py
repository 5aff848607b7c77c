import numpy as np
import pytest
from hypothesis import settings

from refine_rd.probability import Kernel, Pmf

settings.register_profile("repeatable", deadline=None, derandomize=True)
settings.load_profile("repeatable")


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_pmf(rng, n, min_mass=1e-3):
    probs = rng.dirichlet(np.ones(n)) * (1 - n * min_mass) + min_mass
    return Pmf(probs / probs.sum())


def random_kernel(rng, n_in, n_out, min_mass=1e-3):
    return Kernel(
        np.stack([random_pmf(rng, n_out, min_mass).probs for _ in range(n_in)])
    )


def random_distortion(rng, n_in, n_out, zero_diag=True):
    d = rng.uniform(0.2, 2.0, size=(n_in, n_out))
    if zero_diag:
        for i in range(min(n_in, n_out)):
            d[i, i] = 0.0
    return d
