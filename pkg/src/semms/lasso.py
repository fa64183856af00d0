"""Cross-validated lasso baseline with an unpenalized intercept.

Coordinate descent comes from scikit-learn; Gaussian paths call it
directly and Poisson/binomial paths wrap it in an IRLS loop. The minimized objective is
``deviance / (2 N) + lambda * |b|_1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sklearn.linear_model import lasso_path as _sk_lasso_path

from .data import Dataset, Family
from .exceptions import DataError
from .families import get_family
from .sim import make_rng

__all__ = ["LassoPath", "LassoResult", "lambda_grid", "lasso_path", "fit_lasso_cv"]


@dataclass
class LassoPath:
    lambdas: np.ndarray
    intercepts: np.ndarray
    coefs: np.ndarray  # (n_lambda, K)


@dataclass
class LassoResult:
    selected: np.ndarray
    lambda_chosen: float
    cv_curve: list[tuple[float, float]]
    coef: np.ndarray
    intercept: float
    folds: np.ndarray
    fold_seed: int
    refolds: int = 0


def _weighted_cd(Zc, yc, w, lams, b, tol=1e-12):
    """Weighted lasso path on centred data, warm-started at ``b``.

    Minimizes ``sum w (yc - Zc b)^2 / (2 sum w) + lam |b|_1`` for each
    ``lam`` in ``lams`` (decreasing); returns the ``(len(lams), K)`` coefs.
    Row scaling by ``sqrt(w n / sum w)`` turns this into the unweighted
    objective solved by scikit-learn's coordinate descent.
    """
    n = yc.size
    s = np.sqrt(w * (n / w.sum()))
    Xs = np.asfortranarray(Zc * s[:, None])
    ys = yc * s
    _, coefs, _ = _sk_lasso_path(Xs, ys, alphas=np.asarray(lams, dtype=float), coef_init=b,
                             precompute=True, tol=tol, max_iter=100000)
    coefs = coefs.T
    # roundoff at lambda_max can leave ~1e-16 entries that should be exact zeros
    coefs[np.abs(coefs) <= 1e-12 * max(float(np.max(np.abs(ys))), 1.0)] = 0.0
    return coefs


def lambda_grid(lam_max: float, n_lambda: int = 100, ratio: float = 1e-3) -> np.ndarray:
    return lam_max * np.logspace(0.0, np.log10(ratio), n_lambda)


def _lambda_max(Z, y, fam) -> float:
    # gradient of the loss at the intercept-only fit
    mu0 = fam.clamp(np.full(y.size, y.mean()))
    return float(np.max(np.abs(Z.T @ (y - mu0))) / y.size) if Z.shape[1] else 0.0


def lasso_path(Z, y, fam, lambdas, max_irls: int = 50, tol: float = 1e-8) -> LassoPath:
    """Warm-started path over ``lambdas`` (decreasing)."""
    fam = get_family(fam)
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    lambdas = np.asarray(lambdas, dtype=float)
    N, K = Z.shape
    b = np.zeros(K)
    if fam.family is Family.GAUSSIAN:
        zm = Z.mean(axis=0)
        coefs = _weighted_cd(Z - zm, y - y.mean(), np.ones(N), lambdas, b)
        return LassoPath(lambdas, y.mean() - coefs @ zm, coefs)
    a = float(fam.link(fam.clamp(np.array([y.mean()])))[0])
    coefs = np.zeros((lambdas.size, K))
    ints = np.zeros(lambdas.size)
    for i, lam in enumerate(lambdas):
        for _ in range(max_irls):
            eta = a + Z @ b
            mu = fam.mean(eta)
            v = np.maximum(fam.variance(mu), 1e-10)
            z = eta + (y - mu) / v
            zbar = float(v @ z / v.sum())
            zmw = v @ Z / v.sum()
            b_new = _weighted_cd(Z - zmw, z - zbar, v, [lam * N / v.sum()], b)[0]
            a_new = float(zbar - zmw @ b_new)
            change = max(float(np.max(np.abs(b_new - b), initial=0.0)), abs(a_new - a))
            a, b = a_new, b_new
            if change < tol:
                break
        coefs[i] = b
        ints[i] = a
    return LassoPath(lambdas, ints, coefs)


def _make_folds(N, nfolds, seed, y, fam):
    rng = make_rng(seed)
    folds = rng.permutation(N) % nfolds
    if fam.family is Family.BINOMIAL:
        for f in range(nfolds):
            train = y[folds != f]
            if train.min() == train.max() or y[folds == f].min() == y[folds == f].max():
                return None
    return folds


def fit_lasso_cv(d: Dataset, fam=None, nfolds: int = 5, n_lambda: int = 100,
                 seed: int = 0, max_refolds: int = 5) -> LassoResult:
    """Lasso with lambda chosen by minimum mean held-out deviance.

    Folds are observation-level (clusters ignored). ``d.X`` may only hold
    the intercept.
    """
    fam = get_family(d.family if fam is None else fam)
    if nfolds < 2:
        raise ValueError("nfolds must be at least 2")
    if d.X.shape[1] != 1 or not np.allclose(d.X, 1.0):
        raise DataError("the lasso baseline supports an intercept-only fixed design")
    Z, y, N = d.Z, d.y, d.n
    lambdas = lambda_grid(_lambda_max(Z, y, fam), n_lambda)
    folds = None
    attempt = 0
    for attempt in range(max_refolds + 1):
        folds = _make_folds(N, nfolds, seed + attempt, y, fam)
        if folds is not None:
            break
    if folds is None:
        raise DataError(f"could not form {nfolds} folds with both classes after "
                        f"{max_refolds} refolds")
    err = np.zeros((nfolds, len(lambdas)))
    for f in range(nfolds):
        tr, te = folds != f, folds == f
        path = lasso_path(Z[tr], y[tr], fam, lambdas)
        eta = path.intercepts[:, None] + path.coefs @ Z[te].T
        for i in range(len(lambdas)):
            err[f, i] = fam.deviance(y[te], fam.mean(eta[i])) / te.sum()
    cv = err.mean(axis=0)
    best = int(np.argmin(cv))
    full = lasso_path(Z, y, fam, lambdas[: best + 1])
    coef = full.coefs[best]
    return LassoResult(
        selected=np.flatnonzero(coef != 0), lambda_chosen=float(lambdas[best]),
        cv_curve=[(float(l), float(e)) for l, e in zip(lambdas, cv)], coef=coef,
        intercept=float(full.intercepts[best]), folds=folds, fold_seed=seed + attempt,
        refolds=attempt,
    )
