import numpy as np
import pytest

from semms.data import Dataset
from semms.mixture import MixtureState, ModelParams


def random_instance(rng, N=30, K=6, L=2, P=1, s2r=None):
    Z = rng.standard_normal((N, K))
    Z = (Z - Z.mean(0)) / Z.std(0, ddof=1)
    X = np.ones((N, 1)) if P == 1 else np.column_stack([np.ones(N), rng.standard_normal((N, P - 1))])
    gamma = np.zeros(K, dtype=int)
    idx = rng.choice(K, size=L, replace=False)
    gamma[idx] = rng.choice([-1, 1], size=L)
    coef = 1.0 + 0.3 * rng.standard_normal(K)
    y = X @ rng.standard_normal(P) + Z @ (gamma * coef) + rng.standard_normal(N)
    d = Dataset(y=y, X=X, Z=Z, standardized=True)
    p = ModelParams(mu=rng.uniform(0.5, 1.5), beta=rng.standard_normal(P),
                    sigma2_e=rng.uniform(0.5, 2.0),
                    sigma2_r=rng.uniform(0.01, 0.5) if s2r is None else s2r)
    return d, MixtureState(gamma), p


@pytest.fixture
def rng():
    return np.random.default_rng(20260314)
