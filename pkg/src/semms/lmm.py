"""Linear mixed models with one grouping factor, by profiled (RE)ML.

Model for cluster ``i``::

    y_i = W_i beta + R_i b_i + e_i,   b_i ~ N(0, D),   e_i ~ N(0, s2 diag(1/w_i))

where ``R_i`` holds an intercept column, a slope column ``t``, or both.
The optimizer works on the lower Cholesky factor ``Lambda`` of
``D / s2``; ``beta`` and ``s2`` are profiled out in closed form. All
per-cluster algebra is q x q (q <= 2) and batched across clusters.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import optimize

from .data import Dataset
from .exceptions import ConvergenceFailure, DataError, NumericalFailure

__all__ = [
    "Method",
    "ReSpec",
    "VarComp",
    "ReFit",
    "fit_lmm",
    "fit_lmm_weighted",
    "profiled_deviance",
    "blup_offset",
    "LmmProblem",
]

log = logging.getLogger(__name__)


class Method(str, enum.Enum):
    ML = "ML"
    REML = "REML"


@dataclass(frozen=True)
class ReSpec:
    """Random-effect structure: intercept and/or slope on ``slope_covariate``."""

    intercept: bool
    slope: bool
    group: np.ndarray
    slope_covariate: np.ndarray | None = None

    def __post_init__(self):
        if not (self.intercept or self.slope):
            raise DataError("at least one of intercept/slope must be requested")
        if self.slope and self.slope_covariate is None:
            raise DataError("random slope requested without a slope covariate")
        g = np.asarray(self.group)
        if g.ndim != 1:
            raise DataError("group must be one-dimensional")
        object.__setattr__(self, "group", g.astype(np.int64))
        if self.m < 2:
            raise DataError("need at least two clusters")

    @classmethod
    def from_dataset(cls, d: Dataset, intercept: bool = True, slope: bool = False) -> "ReSpec":
        if d.group is None:
            raise DataError("dataset has no grouping column")
        return cls(intercept, slope, d.group, d.slope_covariate if slope else None)

    @property
    def m(self) -> int:
        return int(self.group.max()) + 1

    @property
    def q(self) -> int:
        return int(self.intercept) + int(self.slope)

    @property
    def design(self) -> np.ndarray:
        cols = []
        if self.intercept:
            cols.append(np.ones(self.group.shape[0]))
        if self.slope:
            cols.append(np.asarray(self.slope_covariate, dtype=float))
        return np.column_stack(cols)

    @property
    def n_theta(self) -> int:
        return self.q * (self.q + 1) // 2

    def label(self) -> str:
        parts = (["1"] if self.intercept else ["0"]) + (["t"] if self.slope else [])
        return "(" + " + ".join(parts) + " | group)"


@dataclass(frozen=True)
class VarComp:
    sigma_b0: float
    sigma_b1: float
    rho: float | None
    sigma_e: float

    @property
    def D(self) -> np.ndarray:
        r = 0.0 if self.rho is None else self.rho
        c = r * self.sigma_b0 * self.sigma_b1
        return np.array([[self.sigma_b0**2, c], [c, self.sigma_b1**2]])

    def as_dict(self) -> dict:
        return {"sigma_b0": self.sigma_b0, "sigma_b1": self.sigma_b1, "rho": self.rho,
                "sigma_e": self.sigma_e}


@dataclass
class ReFit:
    varcomp: VarComp
    fixed_coefs: np.ndarray
    u_hat: np.ndarray
    loglik: float
    method: Method
    aic: float
    b_hat: np.ndarray
    theta: np.ndarray
    fitted_fixed: np.ndarray
    deviance: float
    n_params: int
    re: ReSpec = field(repr=False)
    dispersion_fixed: bool = False
    n_evals: int = 0

    @property
    def fitted_full(self) -> np.ndarray:
        return self.fitted_fixed + self.u_hat

    @property
    def sigma_e(self) -> float:
        return self.varcomp.sigma_e


def _lambda(theta, q):
    if q == 1:
        return np.array([[theta[0]]])
    return np.array([[theta[0], 0.0], [theta[1], theta[2]]])


class LmmProblem:
    """Precomputed per-cluster cross-products for repeated deviance evaluation."""

    def __init__(self, y, W, re: ReSpec, weights=None):
        y = np.asarray(y, dtype=float)
        W = np.asarray(W, dtype=float)
        if W.ndim == 1:
            W = W[:, None]
        N, p = W.shape
        if y.shape != (N,) or re.group.shape != (N,):
            raise DataError("y, W and group lengths differ")
        if N < p + 2:
            raise DataError(f"need N >= p + 2 (N={N}, p={p})")
        w = np.ones(N) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (N,) or not np.all(w > 0) or not np.all(np.isfinite(w)):
            raise DataError("weights must be finite and strictly positive")
        if np.linalg.matrix_rank(W) < p:
            raise DataError("fixed-effects design is rank deficient")
        self.y, self.W, self.re, self.w = y, W, re, w
        self.N, self.p, self.q, self.m = N, p, re.q, re.m
        R = re.design
        self.R = R
        ind = sp.csr_matrix((np.ones(N), (re.group, np.arange(N))), shape=(self.m, N))
        wR = R * w[:, None]
        q = self.q
        self.A = np.stack([ind @ (wR[:, a] * R[:, b]) for a in range(q) for b in range(q)],
                          axis=1).reshape(self.m, q, q)
        self.RtWX = np.stack([ind @ (wR[:, a][:, None] * W) for a in range(q)], axis=1)
        self.RtWy = np.asarray(ind @ (wR * y[:, None]))
        Ww = W * w[:, None]
        self.XtWX = W.T @ Ww
        self.XtWy = Ww.T @ y
        self.sum_log_w = float(np.sum(np.log(w)))

    def solve(self, theta, method=Method.ML, dispersion=None):
        """Profiled criterion and the estimates at ``theta``.

        With ``dispersion`` given, the residual scale is fixed rather than
        profiled (ML only).
        """
        theta = np.asarray(theta, dtype=float)
        q, p, N = self.q, self.p, self.N
        Lam = _lambda(theta, q)
        LtAL = np.einsum("ji,mjk,kl->mil", Lam, self.A, Lam)
        M = LtAL + np.eye(q)
        try:
            C = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            return None
        logdet_M = 2.0 * np.sum(np.log(np.diagonal(C, axis1=1, axis2=2)))
        Rx = np.einsum("ji,mjp->mip", Lam, self.RtWX)
        ry = self.RtWy @ Lam
        rhs = np.concatenate([Rx, ry[:, :, None]], axis=2)
        sol = np.linalg.solve(M, rhs)
        Mi_Rx, Mi_ry = sol[:, :, :p], sol[:, :, p]
        XVX = self.XtWX - np.einsum("mip,miq->pq", Rx, Mi_Rx)
        XVy = self.XtWy - np.einsum("mip,mi->p", Rx, Mi_ry)
        try:
            cx = np.linalg.cholesky(XVX)
        except np.linalg.LinAlgError:
            return None
        beta = np.linalg.solve(XVX, XVy)
        # spherical RE; b_i = Lambda u_i, free of s2
        u = Mi_ry - np.einsum("mip,p->mi", Mi_Rx, beta)
        b = u @ Lam.T
        # penalized RSS from residuals; the normal-equation form cancels badly
        # under extreme weights
        e = self.y - self.W @ beta - np.einsum("ni,ni->n", self.R, b[self.re.group])
        rss = float(e @ (self.w * e) + np.sum(u * u))
        logdet_V = logdet_M - self.sum_log_w
        if dispersion is not None:
            s2 = float(dispersion)
            dev = N * np.log(2 * np.pi * s2) + logdet_V + rss / s2
        elif Method(method) is Method.REML:
            s2 = rss / (N - p)
            logdet_X = 2.0 * np.sum(np.log(np.diag(cx)))
            dev = (N - p) * np.log(2 * np.pi * s2) + logdet_V + logdet_X + (N - p)
        else:
            s2 = rss / N
            dev = N * np.log(2 * np.pi * s2) + logdet_V + N
        if not (np.isfinite(dev) and s2 > 0):
            return None
        return {"deviance": float(dev), "beta": beta, "s2": s2, "b": b, "rss": rss,
                "logdet_V": float(logdet_V)}

    def ml_loglik(self, beta, theta, s2):
        """Full Gaussian log-likelihood at arbitrary (beta, theta, s2)."""
        r = self.y - self.W @ beta
        Lam = _lambda(theta, self.q)
        M = np.einsum("ji,mjk,kl->mil", Lam, self.A, Lam) + np.eye(self.q)
        logdet_M = np.linalg.slogdet(M)[1].sum()
        ind_r = self.RtWy - np.einsum("mjp,p->mj", self.RtWX, beta)
        lr = ind_r @ Lam
        rWr = float(r @ (self.w * r))
        quad = (rWr - np.einsum("mi,mi->", lr, np.linalg.solve(M, lr[:, :, None])[:, :, 0])) / s2
        logdet_V = self.N * np.log(s2) + logdet_M - self.sum_log_w
        return -0.5 * (self.N * np.log(2 * np.pi) + logdet_V + quad)

    def moment_theta(self):
        """Per-cluster least squares on OLS residuals, scaled by the residual variance."""
        ws = np.sqrt(self.w)
        beta = np.linalg.lstsq(self.W * ws[:, None], self.y * ws, rcond=None)[0]
        r = self.y - self.W @ beta
        q = self.q
        coefs = np.zeros((self.m, q))
        sse, dof = 0.0, 0
        for i in range(self.m):
            idx = self.re.group == i
            Ri = self.R[idx]
            c, *_ = np.linalg.lstsq(Ri * ws[idx, None], r[idx] * ws[idx], rcond=None)
            coefs[i] = c
            e = (r[idx] - Ri @ c) * ws[idx]
            sse += float(e @ e)
            dof += max(idx.sum() - q, 0)
        s2 = sse / dof if dof > 0 and sse > 0 else float(np.var(r)) + 1e-12
        var = np.maximum(coefs.var(axis=0, ddof=1), 1e-4 * s2)
        lam = np.sqrt(var / s2)
        if q == 1:
            return np.array([lam[0]])
        return np.array([lam[0], 0.0, lam[1]])


def _optimize(prob: LmmProblem, method, dispersion=None, theta0=None, restarts=3):
    def crit(th):
        out = prob.solve(th, method, dispersion)
        return np.inf if out is None else out["deviance"]

    base = prob.moment_theta() if theta0 is None else np.asarray(theta0, dtype=float)
    scales = (0.1, 1.0, 10.0) if restarts >= 3 else (1.0,)
    n = base.size
    best = None
    n_evals = 0
    for sc in scales:
        x0 = base * sc
        if np.all(x0 == 0):
            x0 = np.full(n, 0.1 * sc)
        for _ in range(3):
            # a fresh simplex at the last point clears most stagnation
            res = optimize.minimize(crit, x0, method="Nelder-Mead",
                                    options={"xatol": 1e-7, "fatol": 1e-9,
                                             "maxiter": 2000 * n, "maxfev": 2000 * n})
            n_evals += res.nfev
            if res.success or not np.isfinite(res.fun):
                break
            x0 = res.x
        if best is None or res.fun < best.fun:
            best = res
    if not np.isfinite(best.fun):
        raise ConvergenceFailure("variance-component optimizer found no admissible point",
                                 {"theta": best.x.tolist()})
    if not best.success:
        raise ConvergenceFailure("variance-component optimizer did not converge",
                                 {"theta": best.x.tolist(), "deviance": float(best.fun)})
    return best.x, n_evals


def _varcomp(theta, s2, re: ReSpec) -> VarComp:
    Lam = _lambda(theta, re.q)
    D = s2 * Lam @ Lam.T
    sd = np.sqrt(np.maximum(np.diag(D), 0.0))
    if re.q == 2:
        rho = float(D[0, 1] / (sd[0] * sd[1])) if sd[0] > 0 and sd[1] > 0 else 0.0
        return VarComp(float(sd[0]), float(sd[1]), float(np.clip(rho, -1.0, 1.0)), float(np.sqrt(s2)))
    if re.intercept:
        return VarComp(float(sd[0]), 0.0, None, float(np.sqrt(s2)))
    return VarComp(0.0, float(sd[0]), None, float(np.sqrt(s2)))


def _finish(prob: LmmProblem, theta, method, dispersion, n_evals) -> ReFit:
    out = prob.solve(theta, method, dispersion)
    if out is None:
        raise NumericalFailure("singular profiled system at the optimum", {"theta": list(theta)})
    re = prob.re
    beta, s2, b = out["beta"], out["s2"], out["b"]
    u_hat = np.einsum("ni,ni->n", prob.R, b[re.group])
    loglik = prob.ml_loglik(beta, theta, s2) if Method(method) is Method.REML else -0.5 * out["deviance"]
    n_par = prob.p + re.n_theta + (0 if dispersion is not None else 1)
    return ReFit(
        varcomp=_varcomp(theta, s2, re), fixed_coefs=beta, u_hat=u_hat, loglik=float(loglik),
        method=Method(method), aic=float(-2.0 * loglik + 2.0 * n_par),
        b_hat=b, theta=np.asarray(theta, dtype=float), fitted_fixed=prob.W @ beta,
        deviance=out["deviance"], n_params=n_par, re=re, dispersion_fixed=dispersion is not None,
        n_evals=n_evals,
    )


def fit_lmm(y, W, re: ReSpec, method=Method.ML) -> ReFit:
    """Fit by maximizing the profiled (restricted) likelihood over ``Lambda``.

    The reported ``loglik`` is always the ordinary likelihood at the fitted
    parameters; ``aic = -2 loglik + 2 (#fixed + #variance components)``.
    """
    prob = LmmProblem(y, W, re)
    theta, n = _optimize(prob, method)
    return _finish(prob, theta, method, None, n)


def fit_lmm_weighted(y, W, re: ReSpec, weights, method=Method.ML, dispersion=None,
                     theta0=None, restarts=3) -> ReFit:
    """As :func:`fit_lmm` with residual covariance ``s2 diag(1 / weights)``.

    ``dispersion`` fixes ``s2`` instead of estimating it (then ``D`` is on
    the absolute scale and ``method`` must be ML).
    """
    if dispersion is not None and Method(method) is not Method.ML:
        raise ValueError("a fixed dispersion is only supported with ML")
    prob = LmmProblem(y, W, re, weights)
    theta, n = _optimize(prob, method, dispersion, theta0, restarts)
    return _finish(prob, theta, method, dispersion, n)


def profiled_deviance(theta, y, W, re: ReSpec, method=Method.ML, weights=None) -> float:
    """-2 x profiled (restricted) log-likelihood at ``theta``; ``inf`` if inadmissible."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (re.n_theta,) or not np.all(np.isfinite(theta)):
        return float("inf")
    out = LmmProblem(y, W, re, weights).solve(theta, method)
    return float("inf") if out is None else out["deviance"]


def blup_offset(fit: ReFit) -> np.ndarray:
    """Random-effect contribution: full fitted values minus fixed-only fitted values."""
    return fit.fitted_full - fit.fitted_fixed
