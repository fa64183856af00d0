"""Canonical exponential families, working responses and a plain GLM fitter."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit, gammaln, logit

from .data import Family
from .exceptions import ConvergenceFailure

__all__ = ["FamilySpec", "get_family", "working_response", "fit_glm", "GlmFit"]

MU_FLOOR = 1e-8


@dataclass(frozen=True)
class FamilySpec:
    """Link, inverse link, variance function and clamping for one family.

    Only canonical links, so ``d eta / d mu = 1 / v(mu)`` and the IRLS
    weight equals ``v(mu)``. Dispersion is fixed at 1.
    """

    family: Family
    link: Callable
    inverse_link: Callable
    variance: Callable
    lo: float
    hi: float
    dispersion: float = 1.0

    def clamp(self, mu):
        return np.clip(mu, self.lo, self.hi)

    def deta_dmu(self, mu):
        return 1.0 / self.variance(mu)

    def mean(self, eta):
        return self.clamp(self.inverse_link(eta))

    def loglik(self, y, mu):
        mu = self.clamp(mu)
        if self.family is Family.POISSON:
            return float(np.sum(y * np.log(mu) - mu - gammaln(y + 1.0)))
        if self.family is Family.BINOMIAL:
            return float(np.sum(y * np.log(mu) + (1.0 - y) * np.log1p(-mu)))
        r = y - mu
        return float(-0.5 * len(y) * (np.log(2 * np.pi * np.mean(r**2)) + 1.0))

    def deviance(self, y, mu):
        """Unit deviances summed (Gaussian: residual sum of squares)."""
        mu = self.clamp(mu)
        if self.family is Family.POISSON:
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(y > 0, y * np.log(y / mu), 0.0)
            return float(2.0 * np.sum(t - (y - mu)))
        if self.family is Family.BINOMIAL:
            return float(-2.0 * np.sum(y * np.log(mu) + (1.0 - y) * np.log1p(-mu)))
        return float(np.sum((y - mu) ** 2))


_FAMILIES = {
    Family.GAUSSIAN: FamilySpec(Family.GAUSSIAN, lambda m: m, lambda e: e,
                                lambda m: np.ones_like(m), -np.inf, np.inf),
    Family.POISSON: FamilySpec(Family.POISSON, np.log, np.exp, lambda m: m, MU_FLOOR, np.inf),
    Family.BINOMIAL: FamilySpec(Family.BINOMIAL, logit, expit, lambda m: m * (1.0 - m),
                                MU_FLOOR, 1.0 - MU_FLOOR),
}


def get_family(family) -> FamilySpec:
    if isinstance(family, FamilySpec):
        return family
    return _FAMILIES[Family.parse(family)]


def working_response(y, mu_hat, eta_fixed, fam) -> np.ndarray:
    """``eta_fixed + (y - mu_hat) * d eta/d mu`` at the clamped ``mu_hat``.

    With ``eta_fixed`` the fixed-effects predictor this is the random-effect
    adjusted response: the random-effect offset cancels. For the Gaussian
    family it reduces to ``y - (eta_full - eta_fixed)``.
    """
    fam = get_family(fam)
    mu = fam.clamp(np.asarray(mu_hat, dtype=float))
    return np.asarray(eta_fixed, dtype=float) + (np.asarray(y, dtype=float) - mu) * fam.deta_dmu(mu)


@dataclass(frozen=True)
class GlmFit:
    coef: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    loglik: float
    n_iter: int
    converged: bool


def fit_glm(y, X, fam, offset=None, max_iter: int = 100, tol: float = 1e-10,
            eta_start=None) -> GlmFit:
    """Maximum likelihood by IRLS with step halving on the deviance."""
    fam = get_family(fam)
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    off = np.zeros_like(y) if offset is None else np.asarray(offset, dtype=float)
    if fam.family is Family.GAUSSIAN:
        coef = np.linalg.lstsq(X, y - off, rcond=None)[0]
        eta = X @ coef + off
        return GlmFit(coef, eta, eta, fam.loglik(y, eta), 1, True)
    if eta_start is None:
        if fam.family is Family.POISSON:
            eta = np.log(y + 0.5)
        else:
            eta = logit((y + 0.5) / 2.0)
    else:
        eta = np.asarray(eta_start, dtype=float)
    mu = fam.mean(eta)
    dev = np.inf
    coef = np.zeros(X.shape[1])
    for it in range(1, max_iter + 1):
        w = fam.variance(mu)
        z = eta - off + (y - mu) / w
        sw = np.sqrt(w)
        new = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)[0]
        step = new - coef
        for _ in range(30):
            eta_new = X @ (coef + step) + off
            mu_new = fam.mean(eta_new)
            dev_new = fam.deviance(y, mu_new)
            if np.isfinite(dev_new) and (not np.isfinite(dev) or dev_new <= dev + 1e-12 * abs(dev)):
                break
            step *= 0.5
        coef = coef + step
        eta, mu = eta_new, mu_new
        done = abs(dev - dev_new) <= tol * (abs(dev_new) + 0.1)
        dev = dev_new
        if done:
            return GlmFit(coef, eta, mu, fam.loglik(y, mu), it, True)
    if not np.all(np.isfinite(eta)):
        raise ConvergenceFailure("GLM IRLS diverged", {"iterations": max_iter})
    return GlmFit(coef, eta, mu, fam.loglik(y, mu), max_iter, False)
