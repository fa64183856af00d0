"""Generalized alternating maximization: greedy label moves plus inner EM."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize
from scipy.linalg import cho_factor, cho_solve

from .data import Dataset, Family, standardize
from .exceptions import NumericalFailure
from .families import fit_glm, get_family, working_response
from .mixture import (
    MOVE_ORDER,
    CrossProducts,
    MixtureState,
    ModelParams,
    build_workspace,
    log_likelihood,
    move_gains,
    prior_log_score,
)

__all__ = [
    "FitConfig",
    "SemmsFit",
    "init_active_set",
    "initial_params",
    "em_update",
    "greedy_step",
    "fit_semms",
    "fit_semms_glm",
]

log = logging.getLogger(__name__)

MU_MIN = 1e-6
S2E_MIN = 1e-12


@dataclass(frozen=True)
class FitConfig:
    nn: int = 5
    mincor: float = 0.7
    minchange: float = 1.0
    max_gam_iters: int = 100
    em_tol: float = 1e-6
    em_max_iters: int = 200
    max_glm_rounds: int = 10

    def __post_init__(self):
        if self.nn < 0:
            raise ValueError("nn must be non-negative")
        if not 0.0 < self.mincor < 1.0:
            raise ValueError("mincor must lie in (0, 1)")
        if not (self.minchange > 0 and self.em_tol > 0):
            raise ValueError("thresholds must be strictly positive")


@dataclass
class SemmsFit:
    state: MixtureState
    params: ModelParams
    trace: list[float]
    n_iters: int
    converged: bool
    moves: list[tuple[int, int]] = field(default_factory=list)
    glm_rounds: int = 0

    @property
    def selected(self) -> np.ndarray:
        return self.state.active


def _residualize(v, X):
    coef = np.linalg.lstsq(X, v, rcond=None)[0]
    return v - X @ coef


def init_active_set(d: Dataset, cfg: FitConfig) -> MixtureState:
    """Top-``nn`` candidates by absolute correlation with the response.

    The response is first residualized on ``X``. A candidate whose absolute
    correlation with an already chosen one exceeds ``mincor`` is skipped.
    Signs follow the sign of the correlation.
    """
    K = d.K
    if cfg.nn == 0 or K == 0:
        return MixtureState.empty(K)
    r = _residualize(d.y, d.X)
    Zc = d.Z - d.Z.mean(axis=0)
    zn = np.linalg.norm(Zc, axis=0)
    rn = np.linalg.norm(r)
    if rn == 0:
        return MixtureState.empty(K)
    cor = (Zc.T @ r) / (zn * rn)
    order = np.argsort(-np.abs(cor), kind="stable")
    chosen: list[int] = []
    for k in order:
        if len(chosen) >= min(cfg.nn, K):
            break
        if chosen:
            c = (Zc[:, chosen].T @ Zc[:, k]) / (zn[chosen] * zn[k])
            if np.max(np.abs(c)) > cfg.mincor:
                continue
        chosen.append(int(k))
    g = np.zeros(K, dtype=np.int8)
    g[chosen] = np.where(cor[chosen] >= 0, 1, -1)
    return MixtureState(g)


def initial_params(d: Dataset, state: MixtureState) -> ModelParams:
    """Least-squares starting values for the EM."""
    S = state.active
    X = d.X
    if state.L:
        ZG = d.Z[:, S] * state.gamma[S]
        H = np.hstack([X, ZG])
        coef, *_ = np.linalg.lstsq(H, d.y, rcond=None)
        beta, a = coef[: X.shape[1]], coef[X.shape[1]:]
        resid = d.y - H @ coef
        mu = max(float(np.mean(a)), 0.1 * float(np.mean(np.abs(a))), MU_MIN)
        s2r = max(float(np.var(a)), 0.1 * mu**2)
    else:
        beta = np.linalg.lstsq(X, d.y, rcond=None)[0]
        resid = d.y - X @ beta
        slopes = (d.Z.T @ resid) / np.maximum(np.sum(d.Z**2, axis=0), 1e-300)
        mu = max(float(np.max(np.abs(slopes))) if d.K else 1.0, MU_MIN)
        s2r = 0.1 * mu**2
    s2e = max(float(resid @ resid) / d.n, 1e-8 * max(float(np.var(d.y)), 1.0))
    return ModelParams(mu=mu, beta=beta, sigma2_e=s2e, sigma2_r=s2r)


def _gls_mean(w, ratio):
    """GLS estimate of (beta, mu) and the scaled quadratic form at ``ratio``.

    Covariance is ``s2e * Omega`` with ``Omega = I + ratio Z_G Z_G'``;
    returns ``(beta, mu, Q, logdet_A)`` with ``Q = r' Omega^-1 r`` at the
    estimate and ``mu`` constrained to ``mu >= MU_MIN``.
    """
    P, L = w.P, w.L
    T = np.zeros((P + L, P + 1))
    T[:P, :P] = np.eye(P)
    T[P:, P] = 1.0
    HtH_t = T.T @ w.HtH @ T
    Hty_t = T.T @ w.HtY
    U = w.HtH[P:] @ T                      # Z_G' H~
    ZtY = w.HtY[P:]
    A = np.eye(L) + ratio * w.ZtZ
    c = cho_factor(A, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(c[0]))))
    BU = cho_solve(c, U)
    BZy = cho_solve(c, ZtY)
    M = HtH_t - ratio * U.T @ BU
    v = Hty_t - ratio * U.T @ BZy
    yOy = w.yty - ratio * ZtY @ BZy
    theta = np.linalg.solve(M, v)
    if theta[P] < MU_MIN:
        theta = np.empty(P + 1)
        theta[P] = MU_MIN
        theta[:P] = np.linalg.solve(M[:P, :P], v[:P] - M[:P, P] * MU_MIN)
    Q = yOy - 2.0 * theta @ v + theta @ M @ theta
    return theta[:P], float(theta[P]), max(Q, 0.0), logdet


def _profile_loglik(w, ratio):
    beta, mu, Q, logdet = _gls_mean(w, ratio)
    s2e = max(Q / w.N, S2E_MIN)
    ll = -0.5 * (w.N * np.log(2.0 * np.pi * s2e) + logdet + w.N)
    return ll, ModelParams(mu=mu, beta=beta, sigma2_e=s2e, sigma2_r=ratio * s2e)


def _profile_polish(w, p, ll_current):
    """Maximize the likelihood profiled over (beta, mu, s2e) in the variance ratio."""
    grid = np.concatenate([[0.0], np.logspace(-6, 4, 21), [p.ratio]])
    vals = [(_profile_loglik(w, r)[0], r) for r in grid]
    ll0, r0 = max(vals)
    if r0 > 0:
        u0 = np.log(r0)
        res = optimize.minimize_scalar(lambda u: -_profile_loglik(w, np.exp(u))[0],
                                       bounds=(u0 - 1.2, u0 + 1.2), method="bounded",
                                       options={"xatol": 1e-9})
        if -res.fun > ll0:
            r0 = float(np.exp(res.x))
    ll, cand = _profile_loglik(w, r0)
    return (cand, ll) if ll > ll_current else (p, ll_current)


def em_update(d: Dataset | None, state: MixtureState, p: ModelParams, cfg: FitConfig,
              xp: CrossProducts | None = None, return_trace: bool = False):
    """Update (mu, beta, s2e, s2r) for a fixed active set.

    E-step: the active-coefficient deviations ``eta ~ N(0, s2r I)`` have a
    Gaussian posterior with covariance ``s2r B`` and mean
    ``(s2r/s2e) B Z_G' r``. M-step: closed forms for ``s2r``, then
    ``(beta, mu)`` by least squares on ``y - Z_G E[eta]`` (``mu`` held
    positive), then ``s2e``. After EM stalls, the likelihood profiled
    over (beta, mu, s2e) is maximized in the ratio ``s2r/s2e`` and the
    result kept only if it is higher.

    With an empty active set only ``beta`` and ``s2e`` are updated (OLS).
    """
    if xp is None:
        xp = CrossProducts.from_dataset(d)
    w = build_workspace(None, state, p, xp)
    trace = [log_likelihood(None, state, p, w)]
    if state.L == 0:
        beta = np.linalg.solve(xp.XtX, xp.Xty)
        rss = xp.yty - 2.0 * beta @ xp.Xty + beta @ xp.XtX @ beta
        s2e = rss / xp.N
        if not s2e > S2E_MIN:
            raise NumericalFailure("residual variance collapsed", {"sigma2_e": s2e})
        p = replace(p, beta=beta, sigma2_e=s2e)
        trace.append(log_likelihood(None, state, p, w))
        return (p, trace) if return_trace else p

    L, P, N = w.L, w.P, w.N
    ones = np.ones(L)
    for _ in range(cfg.em_max_iters):
        s2e, s2r = p.sigma2_e, p.sigma2_r
        w = w.with_ratio(p.ratio)
        theta = np.concatenate([p.beta, p.mu * ones])
        Ztr = w.HtY[P:] - w.HtH[P:] @ theta
        m = p.ratio * (w.B @ Ztr)
        V = s2r * w.B
        s2r_new = (m @ m + np.trace(V)) / L
        # (beta, mu) regress y - Z_G m on [X | Z_G 1]
        rhs = w.HtY - w.HtH[:, P:] @ m
        Xrhs, Zrhs = rhs[:P], rhs[P:].sum()
        XtX = w.HtH[:P, :P]
        XtZ1 = w.HtH[:P, P:].sum(axis=1)
        oZZo = w.ZtZ.sum()
        M = np.block([[XtX, XtZ1[:, None]], [XtZ1[None, :], np.array([[oZZo]])]])
        sol = np.linalg.solve(M, np.concatenate([Xrhs, [Zrhs]]))
        beta, mu = sol[:P], sol[P]
        if mu < MU_MIN:
            mu = MU_MIN
            beta = np.linalg.solve(XtX, Xrhs - mu * XtZ1)
        th = np.concatenate([beta, mu * ones + m])
        rss = w.yty - 2.0 * th @ w.HtY + th @ w.HtH @ th
        s2e_new = (max(rss, 0.0) + np.sum(w.ZtZ * V)) / N
        if not s2e_new > S2E_MIN:
            raise NumericalFailure("residual variance collapsed", {"sigma2_e": s2e_new})
        p = ModelParams(mu=mu, beta=beta, sigma2_e=s2e_new, sigma2_r=s2r_new)
        trace.append(log_likelihood(None, state, p, w))
        if abs(trace[-1] - trace[-2]) <= cfg.em_tol * max(1.0, abs(trace[-1])):
            break
    p, ll = _profile_polish(w, p, trace[-1])
    trace.append(ll)
    return (p, trace) if return_trace else p


def greedy_step(d: Dataset | None, state: MixtureState, p: ModelParams, cfg: FitConfig,
                xp: CrossProducts | None = None):
    """Apply the single best label reassignment if its gain exceeds ``minchange``.

    Returns ``(state, accepted, (k, s, gain))``.
    """
    if xp is None:
        xp = CrossProducts.from_dataset(d)
    G = move_gains(xp, state, p)
    flat = int(np.argmax(G))
    k, c = divmod(flat, G.shape[1])
    gain = float(G[k, c])
    s = MOVE_ORDER[c]
    if gain > cfg.minchange:
        return state.assign(k, s), True, (k, s, gain)
    return state, False, (k, s, gain)


def _ensure_standardized(d: Dataset) -> Dataset:
    return d if d.standardized else standardize(d)


def fit_semms(d: Dataset, cfg: FitConfig = FitConfig(), state0: MixtureState | None = None) -> SemmsFit:
    """Gaussian fit: greedy moves alternated with EM until no move is accepted."""
    d = _ensure_standardized(d)
    xp = CrossProducts.from_dataset(d)
    state = init_active_set(d, cfg) if state0 is None else state0
    p = em_update(None, state, initial_params(d, state), cfg, xp)
    trace = [prior_log_score(state) + log_likelihood(None, state, p, build_workspace(None, state, p, xp))]
    moves = []
    converged = False
    it = 0
    for it in range(1, cfg.max_gam_iters + 1):
        state_new, accepted, move = greedy_step(None, state, p, cfg, xp)
        if not accepted:
            converged = True
            break
        state = state_new
        moves.append(move[:2])
        p = em_update(None, state, p, cfg, xp)
        trace.append(prior_log_score(state)
                     + log_likelihood(None, state, p, build_workspace(None, state, p, xp)))
    log.debug("fit_semms: %d iterations, active=%s", it, state.active.tolist())
    return SemmsFit(state=state, params=p, trace=trace, n_iters=it, converged=converged,
                    moves=moves)


def fit_semms_glm(d: Dataset, cfg: FitConfig = FitConfig()) -> SemmsFit:
    """Poisson / binomial fit through an outer IRLS working-response loop.

    Each round forms ``eta + (y - mu) d eta/d mu`` from the current GLM
    fit, runs the Gaussian fitter on it, and refits the GLM on the
    selected columns. Stops when the selected set repeats.
    """
    fam = get_family(d.family)
    if fam.family is Family.GAUSSIAN:
        return fit_semms(d, cfg)
    d = _ensure_standardized(d)
    eta = fit_glm(d.y, d.X, fam).eta
    prev = None
    fit = None
    for rnd in range(1, cfg.max_glm_rounds + 1):
        W = working_response(d.y, fam.mean(eta), eta, fam)
        fit = fit_semms(d.with_response(W, Family.GAUSSIAN), cfg)
        S = fit.state.active
        eta = fit_glm(d.y, np.hstack([d.X, d.Z[:, S]]), fam, eta_start=eta).eta
        if prev is not None and fit.state == prev:
            fit.glm_rounds = rnd
            return fit
        prev = fit.state
    fit.glm_rounds = cfg.max_glm_rounds
    fit.converged = False
    return fit
