"""Empirical-Bayes mixture variable selection with random-effects adjustment."""

from .data import Dataset, Family, load_dataset, standardize, write_dataset
from .exceptions import ConvergenceFailure, DataError, NumericalFailure, SemmsError
from .gam import FitConfig, SemmsFit, fit_semms, fit_semms_glm
from .glmm import GlmmFit, fit_glmm_pql
from .lasso import LassoResult, fit_lasso_cv
from .lmm import Method, ReFit, ReSpec, VarComp, blup_offset, fit_lmm, fit_lmm_weighted
from .mixed import MixedConfig, MixedFit, fit_semms_mixed, run_final_model
from .mixture import MixtureState, ModelParams
from .sim import SCENARIOS, SimScenario, generate, get_scenario

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Family", "load_dataset", "standardize", "write_dataset",
    "SemmsError", "DataError", "NumericalFailure", "ConvergenceFailure",
    "FitConfig", "SemmsFit", "fit_semms", "fit_semms_glm",
    "GlmmFit", "fit_glmm_pql", "LassoResult", "fit_lasso_cv",
    "Method", "ReFit", "ReSpec", "VarComp", "blup_offset", "fit_lmm", "fit_lmm_weighted",
    "MixedConfig", "MixedFit", "fit_semms_mixed", "run_final_model",
    "MixtureState", "ModelParams", "SCENARIOS", "SimScenario", "generate", "get_scenario",
]
