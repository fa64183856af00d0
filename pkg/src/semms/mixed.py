"""Alternating fixed-effects selection / random-effects estimation.

Each outer iteration removes the current random-effect offset from the
response (Gaussian: ``y - u``; Poisson/binomial: the RE-adjusted working
response), runs the Gaussian selection fit on it, then refits the mixed
model with the selected candidates as fixed covariates and updates the
offset. The loop stops once the offset moves by less than ``conv_tol``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Family, standardize
from .exceptions import DataError, NumericalFailure
from .families import fit_glm, get_family, working_response
from .gam import FitConfig, SemmsFit, fit_semms
from .glmm import GlmmFit, fit_glmm_pql
from .lmm import Method, ReFit, ReSpec, fit_lmm
from .mixture import MixtureState

__all__ = ["MixedConfig", "MixedFit", "fit_semms_mixed", "run_final_model",
           "variance_inflation"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MixedConfig:
    intercept: bool = True
    slope: bool = True
    conv_tol: float = 1e-3
    max_outer: int = 10
    semms: FitConfig = field(default_factory=FitConfig)
    warm_start: bool = True

    def __post_init__(self):
        if not (self.intercept or self.slope):
            raise ValueError("at least one random effect must be requested")
        if not self.conv_tol > 0:
            raise ValueError("conv_tol must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")


@dataclass
class MixedFit:
    state: MixtureState
    final_model: ReFit | GlmmFit
    u_hat: np.ndarray
    outer_iters: int
    converged: bool
    u_trace: list[float]
    selected_trace: list[list[int]]
    loglik_trace: list[float]
    aic: float
    vif: dict[str, float]
    family: Family
    semms_fits: list[SemmsFit] = field(default_factory=list, repr=False)

    @property
    def selected(self) -> np.ndarray:
        return self.state.active


def _re_spec(d: Dataset, cfg: MixedConfig) -> ReSpec:
    if d.group is None:
        raise DataError("mixed fit needs a grouping column")
    if cfg.slope and d.slope_covariate is None:
        raise DataError("random slope requested but the dataset has no slope covariate")
    return ReSpec.from_dataset(d, cfg.intercept, cfg.slope)


def _refit(d: Dataset, S, re: ReSpec, method: Method):
    W = np.hstack([d.X, d.Z[:, S]])
    if d.family is Family.GAUSSIAN:
        return fit_lmm(d.y, W, re, method)
    return fit_glmm_pql(d.y, W, re, d.family)


def variance_inflation(W: np.ndarray, names) -> dict[str, float]:
    """VIF of each non-constant column of ``W`` against the others."""
    out = {}
    const = np.all(W == W[:1], axis=0)
    cols = np.flatnonzero(~const)
    for j in cols:
        others = np.column_stack([np.ones(W.shape[0])] + [W[:, k] for k in cols if k != j])
        coef, *_ = np.linalg.lstsq(others, W[:, j], rcond=None)
        r = W[:, j] - others @ coef
        c = W[:, j] - W[:, j].mean()
        r2 = 1.0 - (r @ r) / (c @ c)
        out[names[j]] = float(np.inf if r2 >= 1.0 else 1.0 / (1.0 - r2))
    return out


def run_final_model(d: Dataset, state: MixtureState, cfg: MixedConfig):
    """Refit with the selected candidates as fixed covariates.

    Gaussian: REML; Poisson/binomial: PQL (ML). Returns
    ``(model, aic, vif)``.
    """
    if not d.standardized:
        d = standardize(d)
    re = _re_spec(d, cfg)
    S = state.active
    model = _refit(d, S, re, Method.REML)
    W = np.hstack([d.X, d.Z[:, S]])
    vif = variance_inflation(W, list(d.x_names) + [d.z_names[k] for k in S])
    return model, model.aic, vif


def fit_semms_mixed(d: Dataset, cfg: MixedConfig = MixedConfig()) -> MixedFit:
    """Alternate selection on the RE-adjusted response with RE refits.

    Inside the loop random effects are refitted by ML (Gaussian) or PQL;
    the final model is a REML (Gaussian) or PQL refit on the last
    selected set.
    """
    d = standardize(d) if not d.standardized else d
    re = _re_spec(d, cfg)
    fam = get_family(d.family)
    gaussian = fam.family is Family.GAUSSIAN
    N = d.n

    if cfg.warm_start:
        null = _refit(d, np.array([], dtype=int), re, Method.ML)
        u = null.u_hat
        if not gaussian:
            mu_hat, eta_fixed = null.mu_hat, null.eta_fixed
    else:
        u = np.zeros(N)
        if not gaussian:
            eta_fixed = fit_glm(d.y, d.X, fam).eta
            mu_hat = fam.mean(eta_fixed)

    u_trace: list[float] = []
    sel_trace: list[list[int]] = []
    ll_trace: list[float] = []
    fits: list[SemmsFit] = []
    state = MixtureState.empty(d.K)
    converged = False
    t = 0
    for t in range(1, cfg.max_outer + 1):
        if gaussian:
            ystar = d.y - u
        else:
            ystar = working_response(d.y, mu_hat, eta_fixed, fam)
        sf = fit_semms(d.with_response(ystar, Family.GAUSSIAN), cfg.semms)
        fits.append(sf)
        state = sf.state
        sel_trace.append(state.active.tolist())
        try:
            model = _refit(d, state.active, re, Method.ML)
        except (NumericalFailure, DataError) as exc:
            exc.args = (f"random-effects refit failed at outer iteration {t}: {exc}",)
            if isinstance(exc, NumericalFailure):
                exc.detail.update({"last_state": sel_trace[-2] if len(sel_trace) > 1 else [],
                                   "u_trace": u_trace})
            raise
        ll_trace.append(model.loglik)
        u_new = model.u_hat
        delta = float(np.max(np.abs(u_new - u)))
        u_trace.append(delta)
        u = u_new
        if not gaussian:
            mu_hat, eta_fixed = model.mu_hat, model.eta_fixed
        log.debug("outer %d: selected=%s max|du|=%.3g", t, sel_trace[-1], delta)
        if delta < cfg.conv_tol:
            converged = True
            break

    final, aic, vif = run_final_model(d, state, cfg)
    return MixedFit(state=state, final_model=final, u_hat=final.u_hat, outer_iters=t,
                    converged=converged, u_trace=u_trace, selected_trace=sel_trace,
                    loglik_trace=ll_trace, aic=aic, vif=vif, family=fam.family,
                    semms_fits=fits)
