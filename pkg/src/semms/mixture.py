"""Three-component mixture model: labels, parameters, prior and likelihood.

The working model is

    y = X beta + Z_G mu 1_L + e,   e ~ N(0, s2e I + s2r Z_G Z_G'),

with ``Z_G = Z_S diag(gamma_S)`` the signed active columns. Every
likelihood evaluation goes through L x L algebra on cached
cross-products; nothing of size N x N is formed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data import Dataset
from .exceptions import NumericalFailure

__all__ = [
    "MixtureState",
    "ModelParams",
    "CrossProducts",
    "LikelihoodWorkspace",
    "prior_log_score",
    "build_workspace",
    "log_likelihood",
    "objective",
    "move_gains",
    "delta_score",
    "MOVE_ORDER",
]

LOG_2PI = np.log(2.0 * np.pi)

# column order of the gain matrix; also the tie-break order within one k
MOVE_ORDER = (1, -1, 0)


@dataclass(frozen=True)
class MixtureState:
    """Ternary labels ``gamma`` in {-1, 0, +1}, one per candidate."""

    gamma: np.ndarray

    def __post_init__(self):
        g = np.array(self.gamma, dtype=np.int8).reshape(-1)
        if not np.all(np.isin(g, (-1, 0, 1))):
            raise ValueError("labels must be -1, 0 or +1")
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    @classmethod
    def empty(cls, K: int) -> "MixtureState":
        return cls(np.zeros(K, dtype=np.int8))

    @classmethod
    def from_active(cls, K: int, idx, signs=None) -> "MixtureState":
        g = np.zeros(K, dtype=np.int8)
        idx = np.asarray(idx, dtype=int)
        g[idx] = 1 if signs is None else np.sign(signs)
        return cls(g)

    @property
    def K(self) -> int:
        return self.gamma.shape[0]

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.gamma)

    @property
    def L(self) -> int:
        return int(np.count_nonzero(self.gamma))

    @property
    def counts(self) -> tuple[int, int, int]:
        """``(L_minus, L_zero, L_plus)``."""
        g = self.gamma
        return int(np.sum(g == -1)), int(np.sum(g == 0)), int(np.sum(g == 1))

    def assign(self, k: int, s: int) -> "MixtureState":
        g = self.gamma.copy()
        g[k] = s
        return MixtureState(g)

    def __eq__(self, other):
        return isinstance(other, MixtureState) and np.array_equal(self.gamma, other.gamma)

    def __hash__(self):
        return hash(self.gamma.tobytes())


@dataclass(frozen=True)
class ModelParams:
    mu: float
    beta: np.ndarray
    sigma2_e: float
    sigma2_r: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(-1))
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "sigma2_e", float(self.sigma2_e))
        object.__setattr__(self, "sigma2_r", float(self.sigma2_r))

    @property
    def ratio(self) -> float:
        return self.sigma2_r / self.sigma2_e


class CrossProducts:
    """Gram blocks of ``[X | Z]`` with each other and with ``y``.

    Built once per (Z, X, y); every active set reads sub-blocks from it.
    """

    def __init__(self, y, X, Z):
        self.N = y.shape[0]
        self.G = Z.T @ Z
        self.ZtX = Z.T @ X
        self.Zty = Z.T @ y
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)

    @classmethod
    def from_dataset(cls, d: Dataset) -> "CrossProducts":
        return cls(d.y, d.X, d.Z)


def prior_log_score(state: MixtureState, K: int | None = None) -> float:
    """Multiplicity penalty ``sum_s L_s log(L_s / K)``, with 0 log 0 = 0."""
    K = state.K if K is None else K
    counts = state.counts
    if sum(counts) != K:
        raise ValueError(f"label counts {counts} inconsistent with K={K}")
    return float(sum(c * np.log(c / K) for c in counts if c > 0))


@dataclass(frozen=True)
class LikelihoodWorkspace:
    """Active-set-dependent blocks plus the ratio-dependent ``B`` matrix."""

    active: np.ndarray
    signs: np.ndarray
    ZG: np.ndarray | None
    ZtZ: np.ndarray
    HtH: np.ndarray
    HtY: np.ndarray
    yty: float
    N: int
    ratio: float
    B: np.ndarray
    logdet_A: float

    @property
    def L(self) -> int:
        return self.active.shape[0]

    @property
    def P(self) -> int:
        return self.HtH.shape[0] - self.L

    def with_ratio(self, ratio: float) -> "LikelihoodWorkspace":
        if ratio == self.ratio:
            return self
        B, logdet = _b_matrix(self.ZtZ, ratio)
        return replace(self, ratio=ratio, B=B, logdet_A=logdet)


def _b_matrix(ZtZ, ratio):
    L = ZtZ.shape[0]
    if L == 0:
        return np.zeros((0, 0)), 0.0
    A = np.eye(L) + ratio * ZtZ
    try:
        c = cho_factor(A, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("I + ratio*ZtZ is not positive definite",
                               {"ratio": ratio}) from exc
    logdet = 2.0 * float(np.sum(np.log(np.diag(c[0]))))
    return cho_solve(c, np.eye(L)), logdet


def build_workspace(d: Dataset | None, state: MixtureState, p: ModelParams,
                    xp: CrossProducts | None = None) -> LikelihoodWorkspace:
    """Assemble the L x L blocks for ``state`` and ``B`` for ``p``'s ratio.

    Pass ``xp`` to read the blocks from cached cross-products; ``d`` is
    then only used to materialize ``ZG`` (and may be ``None``).
    """
    S = state.active
    g = state.gamma[S].astype(float)
    if xp is None:
        ZG = d.Z[:, S] * g
        H = np.hstack([d.X, ZG])
        HtH = H.T @ H
        HtY = H.T @ d.y
        yty, N = float(d.y @ d.y), d.n
    else:
        ZG = d.Z[:, S] * g if d is not None else None
        ZtX = xp.ZtX[S] * g[:, None]
        ZtZ_ = xp.G[np.ix_(S, S)] * np.outer(g, g)
        HtH = np.block([[xp.XtX, ZtX.T], [ZtX, ZtZ_]])
        HtY = np.concatenate([xp.Xty, xp.Zty[S] * g])
        yty, N = xp.yty, xp.N
    P = HtH.shape[0] - S.shape[0]
    ZtZ = HtH[P:, P:]
    B, logdet = _b_matrix(ZtZ, p.ratio)
    return LikelihoodWorkspace(active=S, signs=g, ZG=ZG, ZtZ=ZtZ, HtH=HtH, HtY=HtY,
                               yty=yty, N=N, ratio=p.ratio, B=B, logdet_A=logdet)


def _residual_terms(w: LikelihoodWorkspace, p: ModelParams):
    """``(r'r, Z_G'r)`` for ``r = y - X beta - mu Z_G 1``."""
    theta = np.concatenate([p.beta, np.full(w.L, p.mu)])
    HtH_theta = w.HtH @ theta
    rtr = w.yty - 2.0 * theta @ w.HtY + theta @ HtH_theta
    Ztr = w.HtY[w.P:] - HtH_theta[w.P:]
    return max(rtr, 0.0), Ztr


def log_likelihood(d: Dataset | None, state: MixtureState, p: ModelParams,
                   w: LikelihoodWorkspace | None = None) -> float:
    """Gaussian marginal log-likelihood via Woodbury and the determinant lemma."""
    if w is None:
        w = build_workspace(d, state, p)
    w = w.with_ratio(p.ratio)
    if w.L != state.L:
        raise ValueError("workspace does not match state")
    s2e, s2r = p.sigma2_e, p.sigma2_r
    rtr, Ztr = _residual_terms(w, p)
    quad = rtr / s2e
    if w.L:
        quad -= (s2r / s2e**2) * (Ztr @ w.B @ Ztr)
    terms = {"logdet_sigma2e": w.N * np.log(s2e), "logdet_A": w.logdet_A, "quadratic": quad}
    for name, v in terms.items():
        if not np.isfinite(v):
            raise NumericalFailure(f"non-finite log-likelihood term {name}",
                                   {"term": name, "value": v})
    return -0.5 * (w.N * LOG_2PI + terms["logdet_sigma2e"] + w.logdet_A + quad)


def objective(d, state, p, w=None) -> float:
    """``prior_log_score + log_likelihood``."""
    return prior_log_score(state) + log_likelihood(d, state, p, w)


def move_gains(xp: CrossProducts, state: MixtureState, p: ModelParams,
               w: LikelihoodWorkspace | None = None) -> np.ndarray:
    """Objective change for every single reassignment, parameters held fixed.

    Returns a ``(K, 3)`` array whose columns follow :data:`MOVE_ORDER`
    (+1, -1, 0); the entry for a label's current value is ``-inf``.
    Additions, removals and sign flips are rank-one updates of
    ``Sigma`` (or leave it unchanged), so all ``2K`` gains come from
    ``z_k' Sigma^-1 z_k`` and ``z_k' Sigma^-1 r`` in one pass.
    """
    if w is None:
        w = build_workspace(None, state, p, xp)
    w = w.with_ratio(p.ratio)
    K = state.K
    gam = state.gamma.astype(float)
    S = state.active
    s2e, s2r, mu = p.sigma2_e, p.sigma2_r, p.mu

    rtr, Ztr = _residual_terms(w, p)
    C = w.signs[:, None] * xp.G[S, :]                # Z_G' z_k, L x K
    ztr = xp.Zty - xp.ZtX @ p.beta - mu * C.sum(axis=0)
    diagG = np.diag(xp.G)
    if w.L:
        BC = w.B @ C
        a = diagG / s2e - (s2r / s2e**2) * np.einsum("lk,lk->k", C, BC)
        b = ztr / s2e - (s2r / s2e**2) * (BC.T @ Ztr)
        Q = rtr / s2e - (s2r / s2e**2) * (Ztr @ w.B @ Ztr)
    else:
        a = diagG / s2e
        b = ztr / s2e
        Q = rtr / s2e

    gains_lik = np.full((K, 3), -np.inf)
    off = gam == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        for col, s in enumerate((1.0, -1.0)):
            # add: r' = r - s mu z, Sigma' = Sigma + s2r z z'
            q1 = Q - 2.0 * s * mu * b + mu**2 * a
            e = b - s * mu * a
            den = 1.0 + s2r * a
            dQ = q1 - s2r * e**2 / den - Q
            gl = -0.5 * (np.log(den) + dQ)
            # flip g -> -g: r' = r + 2 g mu z, Sigma unchanged
            fl = -0.5 * (4.0 * gam * mu * b + 4.0 * mu**2 * a)
            gains_lik[:, col] = np.where(off, gl, np.where(gam == -s, fl, -np.inf))
        # remove g -> 0: r' = r + g mu z, Sigma' = Sigma - s2r z z'
        q1 = Q + 2.0 * gam * mu * b + mu**2 * a
        e = b + gam * mu * a
        den = 1.0 - s2r * a
        dQ = q1 + s2r * e**2 / den - Q
        gains_lik[:, 2] = np.where(off, -np.inf, -0.5 * (np.log(den) + dQ))

    # prior: one unit leaves the current component and enters the new one
    Lm, L0, Lp = state.counts
    cnt = {-1: Lm, 0: L0, 1: Lp}
    def f(c):
        return c * np.log(c / K) if c > 0 else 0.0
    dprior = {}
    for g0 in (-1, 0, 1):
        for s in MOVE_ORDER:
            if s != g0:
                dprior[g0, s] = (f(cnt[g0] - 1) - f(cnt[g0]) + f(cnt[s] + 1) - f(cnt[s]))
    gains = gains_lik.copy()
    for col, s in enumerate(MOVE_ORDER):
        for g0 in (-1, 0, 1):
            if s == g0:
                continue
            m = state.gamma == g0
            gains[m, col] += dprior[g0, s]
    if np.isnan(gains).any():
        bad = np.argwhere(np.isnan(gains))
        raise NumericalFailure("non-finite move gain", {"entries": bad[:5].tolist()})
    return gains


def delta_score(d: Dataset, state: MixtureState, p: ModelParams, k: int, s: int,
                xp: CrossProducts | None = None) -> float:
    """Change in ``prior + likelihood`` from setting ``gamma_k = s``."""
    if s == state.gamma[k]:
        raise ValueError(f"label {k} already equals {s}")
    if xp is None:
        xp = CrossProducts.from_dataset(d)
    return float(move_gains(xp, state, p)[k, MOVE_ORDER.index(int(s))])
