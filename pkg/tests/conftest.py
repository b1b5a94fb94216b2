import numpy as np
import pytest

from emvr import Dataset, Model, PooledGmm, ScalarTwoGmm
from emvr.data import gen_multivariate_mixture, gen_scalar_mixture
from emvr.gmm import init_random_responsibility


class LocationToy(Model):
    """Minimal test model with identity refit map.

    Statistics and parameters coincide; the per-sample statistic is the
    observation itself, so the mean field is ``data mean - s`` and the
    objective is an analytic function of s.  ``curvature`` adds a smooth
    non-quadratic term for finite-difference order checks.
    """

    def __init__(self, dim, curvature=0.0):
        self._dim = dim
        self.curvature = curvature

    @property
    def stat_dim(self):
        return self._dim

    def sbar_rows(self, data, indices, params):
        return data.values if indices is None else data.values[indices]

    def m_step(self, s):
        return np.asarray(s, dtype=np.float64).copy()

    def penalized_nll(self, data, params):
        resid = params - data.values.mean(axis=0)
        return float(0.5 * (resid ** 2).sum()
                     + self.curvature * np.sin(params).sum())

    def domain_check(self, s):
        return None

    def natural_param(self, params):
        return np.asarray(params, dtype=np.float64).copy()


@pytest.fixture
def scalar_data():
    return gen_scalar_mixture(60, seed=101)


@pytest.fixture
def scalar_model(scalar_data):
    return ScalarTwoGmm.from_data(scalar_data)


@pytest.fixture
def tiny_scalar_data():
    # four fixed observations; several oracle values below are frozen for them
    return Dataset(np.array([0.3, -1.2, 0.8, -0.4]))


@pytest.fixture
def gmm_data():
    return gen_multivariate_mixture(80, 3, 2, 3.0, seed=7)


@pytest.fixture
def gmm_model(gmm_data):
    return PooledGmm.from_data(3, gmm_data)


@pytest.fixture
def gmm_start(gmm_model, gmm_data):
    return init_random_responsibility(gmm_model, gmm_data, seed=5)


def admissible_stats(model, data, seed):
    return init_random_responsibility(model, data, seed=seed)
