import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize
from scipy.special import gammaln

from semms.data import Family, standardize
from semms.exceptions import ConvergenceFailure, DataError
from semms.families import get_family, working_response
from semms.glmm import fit_glmm_pql, link_adjusted_response
from semms.lmm import Method, ReSpec, fit_lmm_weighted
from semms.sim import generate, get_scenario, icc_logistic


def test_working_response_poisson_arithmetic():
    mu = math.exp(0.5)
    got = working_response(np.array([3.0]), np.array([mu]), np.array([0.5]), "poisson")
    assert got[0] == pytest.approx(0.5 + (3 - mu) / mu, rel=1e-15)


def test_working_response_binomial_arithmetic():
    got = working_response(np.array([1.0]), np.array([0.5]), np.array([0.0]), "binomial")
    assert got[0] == pytest.approx(2.0, rel=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["poisson", "binomial"]),
       st.lists(st.floats(-4, 4), min_size=1, max_size=20))
def test_working_response_exact_at_mean(fam, etas):
    f = get_family(fam)
    eta_fixed = np.asarray(etas)
    mu = f.mean(eta_fixed + 0.3)
    np.testing.assert_allclose(working_response(mu, mu, eta_fixed, f), eta_fixed, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-5, 5), st.floats(-5, 5)),
                min_size=1, max_size=20))
def test_working_response_gaussian_is_identity_subtraction(rows):
    y, eta_fixed, u = (np.array(c) for c in zip(*rows))
    got = working_response(y, eta_fixed + u, eta_fixed, "gaussian")
    np.testing.assert_allclose(got, y - u, atol=1e-12)


def test_working_response_clamps_binomial():
    got = working_response(np.array([1.0]), np.array([1.0]), np.array([0.0]), "binomial")
    assert np.isfinite(got).all()


def test_link_adjusted_response():
    y = np.array([0.0, 2.0, 5.0])
    u = np.array([0.1, -0.2, 0.3])
    got = link_adjusted_response(y, u, "poisson")
    np.testing.assert_allclose(got[1:], np.log(y[1:]) - u[1:])
    assert np.isfinite(got[0])


def _glm_oracle(y, W):
    """Poisson GLM by direct likelihood maximization, with Hessian SEs."""
    def nll(b):
        eta = W @ b
        return -np.sum(y * eta - np.exp(eta) - gammaln(y + 1))

    def grad(b):
        return -W.T @ (y - np.exp(W @ b))

    res = optimize.minimize(nll, np.zeros(W.shape[1]), jac=grad, method="BFGS",
                            options={"gtol": 1e-10})
    H = W.T @ (np.exp(W @ res.x)[:, None] * W)
    return res.x, np.sqrt(np.diag(np.linalg.inv(H)))


def test_poisson_zero_random_effects_matches_glm():
    rng = np.random.default_rng(11)
    m, n = 40, 15
    g = np.repeat(np.arange(m), n)
    W = np.column_stack([np.ones(m * n), rng.standard_normal(m * n)])
    y = rng.poisson(np.exp(W @ [0.7, 0.4])).astype(float)
    fit = fit_glmm_pql(y, W, ReSpec(True, False, g), "poisson")
    beta, se = _glm_oracle(y, W)
    assert fit.varcomp.sigma_b0 < 0.05
    assert np.all(np.abs(fit.fixed_coefs - beta) < 3 * se)
    assert fit.converged


def test_pql_fixed_point():
    d, truth = generate(get_scenario("sim4").with_seed(77))
    d = standardize(d)
    re = ReSpec.from_dataset(d, True, True)
    W = np.hstack([d.X, d.Z[:, truth]])
    fam = get_family("poisson")
    fit = fit_glmm_pql(d.y, W, re, fam)
    assert fit.converged
    np.testing.assert_allclose(fit.mu_hat, fam.mean(fit.eta_full))
    np.testing.assert_allclose(fit.u_hat, fit.eta_full - fit.eta_fixed)
    z = working_response(d.y, fit.mu_hat, fit.eta_full, fam)
    again = fit_lmm_weighted(z, W, re, fam.variance(fit.mu_hat), Method.ML, dispersion=1.0,
                             theta0=fit.inner.theta, restarts=1)
    assert np.max(np.abs(again.fitted_full - fit.eta_full)) < 1e-5


def test_sim4_recovers_intercept_sd():
    est = []
    sc = get_scenario("sim4")
    for r in range(20):
        d, truth = generate(sc.with_seed(500 + r))
        d = standardize(d)
        re = ReSpec.from_dataset(d, True, True)
        fit = fit_glmm_pql(d.y, np.hstack([d.X, d.Z[:, truth]]), re, d.family)
        est.append(fit.varcomp.sigma_b0)
    assert abs(np.mean(est) - sc.sigma_b0) <= 0.3


def test_binomial_icc_near_published_value():
    iccs = []
    sc = get_scenario("sim6")
    for r in range(20):
        d, truth = generate(sc.with_seed(500 + r))
        d = standardize(d)
        re = ReSpec.from_dataset(d, True, False)
        fit = fit_glmm_pql(d.y, np.hstack([d.X, d.Z[:, truth]]), re, d.family)
        assert np.all((fit.mu_hat > 0) & (fit.mu_hat < 1))
        iccs.append(icc_logistic(fit.varcomp.sigma_b0))
    assert abs(np.mean(iccs) - 0.73) <= 0.1


def test_separation_is_reported():
    rng = np.random.default_rng(5)
    m, n = 10, 20
    g = np.repeat(np.arange(m), n)
    x = rng.standard_normal(m * n)
    y = (x > 0).astype(float)
    W = np.column_stack([np.ones(m * n), x])
    with pytest.raises(ConvergenceFailure, match="separation"):
        fit_glmm_pql(y, W, ReSpec(True, False, g), "binomial")


def test_gaussian_family_rejected():
    g = np.repeat(np.arange(3), 4)
    with pytest.raises(DataError):
        fit_glmm_pql(np.zeros(12), np.ones(12), ReSpec(True, False, g), Family.GAUSSIAN)
