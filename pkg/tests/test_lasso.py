import numpy as np
import pytest

from semms.data import Dataset, Family, standardize
from semms.exceptions import DataError
from semms.families import get_family
from semms.lasso import fit_lasso_cv, lambda_grid, lasso_path
from semms.sim import generate, get_scenario


def _kkt_gap(Z, y, fam, lam, a, b):
    # objective deviance/(2N) + lam |b|_1: the loss gradient is -Z'(y - mu)/N
    fam = get_family(fam)
    mu = fam.mean(a + Z @ b)
    g = Z.T @ (y - mu) / y.size
    nz = b != 0
    gap_zero = np.max(np.abs(g[~nz]) - lam, initial=-np.inf)
    gap_nz = np.max(np.abs(g[nz] - lam * np.sign(b[nz])), initial=0.0)
    return gap_zero, gap_nz, abs(np.sum(y - mu)) / y.size


def _sim1():
    d, truth = generate(get_scenario("sim1").with_seed(21))
    return standardize(d), truth


def test_gaussian_kkt_along_path():
    d, _ = _sim1()
    lams = lambda_grid(np.max(np.abs(d.Z.T @ (d.y - d.y.mean()))) / d.n, 30)
    path = lasso_path(d.Z, d.y, "gaussian", lams)
    for lam, a, b in zip(lams, path.intercepts, path.coefs):
        gz, gnz, gi = _kkt_gap(d.Z, d.y, "gaussian", lam, a, b)
        assert gz <= 1e-4 and gnz <= 1e-4 and gi <= 1e-8


@pytest.mark.parametrize("fam,seed", [("poisson", 4), ("binomial", 6)])
def test_glm_kkt(fam, seed):
    d, _ = generate(get_scenario("sim4" if fam == "poisson" else "sim6").with_seed(seed))
    d = standardize(d)
    res = fit_lasso_cv(d, n_lambda=40)
    gz, gnz, gi = _kkt_gap(d.Z, d.y, fam, res.lambda_chosen, res.intercept, res.coef)
    assert gz <= 1e-4 and gnz <= 1e-4 and gi <= 1e-6


def test_empty_at_lambda_max():
    d, _ = _sim1()
    res = fit_lasso_cv(d, n_lambda=20)
    lam_max = res.cv_curve[0][0]
    assert lam_max == pytest.approx(np.max(np.abs(d.Z.T @ (d.y - d.y.mean()))) / d.n)
    path = lasso_path(d.Z, d.y, "gaussian", [lam_max, 0.999 * lam_max])
    assert np.count_nonzero(path.coefs[0]) == 0
    assert np.count_nonzero(path.coefs[1]) == 1


def test_single_predictor_closed_form(rng):
    N = 80
    z = rng.standard_normal(N)
    z = (z - z.mean()) / z.std(ddof=1)
    y = 2 * z + rng.standard_normal(N)
    lam_max = abs(z @ (y - y.mean())) / N
    lams = lambda_grid(lam_max, 25)
    path = lasso_path(z[:, None], y, "gaussian", lams)
    want = np.sign(z @ y) * np.maximum(abs(z @ (y - y.mean())) / N - lams, 0) / (z @ z / N)
    np.testing.assert_allclose(path.coefs[:, 0], want, atol=1e-10)
    assert np.all(path.coefs[1:, 0] != 0)


def test_null_data_selects_little():
    small = 0
    for r in range(100):
        rng = np.random.default_rng(4000 + r)
        d = standardize(Dataset(y=rng.standard_normal(100), X=np.ones(100),
                                Z=rng.standard_normal((100, 20))))
        small += fit_lasso_cv(d, seed=r).selected.size <= 2
    assert small >= 80


def test_cv_result_is_consistent_and_seeded():
    d, _ = _sim1()
    a = fit_lasso_cv(d, seed=3)
    b = fit_lasso_cv(d, seed=3)
    np.testing.assert_array_equal(a.folds, b.folds)
    np.testing.assert_array_equal(a.coef, b.coef)
    lams = [l for l, _ in a.cv_curve]
    assert a.lambda_chosen in lams
    assert a.cv_curve[lams.index(a.lambda_chosen)][1] == min(e for _, e in a.cv_curve)
    np.testing.assert_array_equal(a.selected, np.flatnonzero(a.coef))
    assert sorted(np.bincount(a.folds).tolist()) == [40] * 5
    assert a.fold_seed == 3 and a.refolds == 0


def test_binomial_refold():
    rng = np.random.default_rng(1)
    N = 40
    y = np.zeros(N)
    y[rng.choice(N, 6, replace=False)] = 1.0
    d = standardize(Dataset(y=y, X=np.ones(N), Z=rng.standard_normal((N, 5)),
                            family=Family.BINOMIAL))
    outcomes = set()
    for seed in range(30):
        try:
            res = fit_lasso_cv(d, seed=seed, n_lambda=10)
        except DataError:
            outcomes.add("error")
            continue
        outcomes.add(res.refolds > 0)
        assert res.fold_seed == seed + res.refolds
        for f in range(5):
            assert 0 < y[res.folds == f].sum() < (res.folds == f).sum()
    assert True in outcomes


def test_refold_gives_up():
    N = 30
    y = np.zeros(N)
    y[0] = 1.0
    d = standardize(Dataset(y=y, X=np.ones(N), Z=np.random.default_rng(2).standard_normal((N, 3)),
                            family=Family.BINOMIAL))
    with pytest.raises(DataError, match="refolds"):
        fit_lasso_cv(d)


def test_rejects_extra_fixed_columns(rng):
    X = np.column_stack([np.ones(20), rng.standard_normal(20)])
    d = standardize(Dataset(y=rng.standard_normal(20), X=X, Z=rng.standard_normal((20, 3))))
    with pytest.raises(DataError, match="intercept-only"):
        fit_lasso_cv(d)
    with pytest.raises(ValueError):
        fit_lasso_cv(standardize(Dataset(y=rng.standard_normal(20), X=np.ones(20),
                                         Z=rng.standard_normal((20, 3)))), nfolds=1)
