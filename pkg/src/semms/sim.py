"""Simulation scenarios, the semi-synthetic augmentation and selection metrics."""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .data import Dataset, Family, encode_groups, standardize

__all__ = [
    "SimScenario",
    "SCENARIOS",
    "get_scenario",
    "read_scenario_file",
    "make_rng",
    "generate",
    "augment_semisynthetic",
    "load_sleepstudy",
    "SelectionMetrics",
    "score_selection",
    "design_effect",
    "icc_logistic",
]


@dataclass(frozen=True)
class SimScenario:
    """Parameters of one longitudinal simulation design.

    ``beta_true`` applies to candidates ``true_idx`` (0-based) in order;
    random intercepts and slopes are independent (rho = 0).
    """

    name: str
    m: int
    n: int
    K: int
    beta_true: tuple[float, ...]
    sigma_b0: float
    sigma_b1: float
    family: Family = Family.GAUSSIAN
    true_idx: tuple[int, ...] = ()
    random_intercept: bool = True
    random_slope: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        object.__setattr__(self, "beta_true", tuple(float(b) for b in self.beta_true))
        if not self.true_idx:
            object.__setattr__(self, "true_idx", tuple(range(len(self.beta_true))))
        if len(self.true_idx) != len(self.beta_true):
            raise ValueError("true_idx and beta_true differ in length")
        if max(self.true_idx, default=-1) >= self.K:
            raise ValueError("true_idx out of range")

    @property
    def N(self) -> int:
        return self.m * self.n

    def with_seed(self, seed: int) -> "SimScenario":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["family"] = self.family.value
        out["beta_true"] = list(self.beta_true)
        out["true_idx"] = list(self.true_idx)
        return out


SCENARIOS: dict[str, SimScenario] = {
    "sim1": SimScenario("sim1", 20, 10, 100, (1.5, -1.2, 1.0, -0.9, 0.8), 1.5, 0.5),
    "sim2": SimScenario("sim2", 20, 10, 100, (0.8, -0.7, 0.6, -0.6, 0.5), 3.0, 1.0),
    "sim3": SimScenario("sim3", 30, 3, 200, (2.0, -1.8, 1.5, -1.5, 1.2), 1.5, 0.5),
    "sim4": SimScenario("sim4", 30, 10, 100, (0.6, -0.5, 0.4, -0.4, 0.3), 1.0, 0.3,
                        family=Family.POISSON),
    "sim5": SimScenario("sim5", 30, 20, 100, (1.5, -1.3, 1.1, -1.0, 0.9), 3.0, 1.0,
                        family=Family.BINOMIAL),
    "sim6": SimScenario("sim6", 50, 20, 100, (0.8, -0.7, 0.6, -0.5, 0.5), 3.0, 0.0,
                        family=Family.BINOMIAL, random_slope=False),
}


def get_scenario(name: str) -> SimScenario:
    try:
        return SCENARIOS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; known: {', '.join(SCENARIOS)}") from None


def _parse_tuple(text, cast):
    text = text.strip().strip("()[]")
    return tuple(cast(v) for v in text.replace(",", " ").split()) if text else ()


def read_scenario_file(path) -> SimScenario:
    """Read ``key = value`` lines (an optional ``[scenario]`` header is allowed).

    A ``base`` key starts from a registered scenario and overrides the rest.
    """
    text = Path(path).read_text()
    cp = configparser.ConfigParser()
    if not text.lstrip().startswith("["):
        text = "[scenario]\n" + text
    cp.read_string(text)
    sec = cp[cp.sections()[0]]
    fields = {}
    if "base" in sec:
        fields = asdict(get_scenario(sec["base"]))
    casts = {"m": int, "n": int, "K": int, "seed": int, "sigma_b0": float, "sigma_b1": float,
             "name": str, "family": Family.parse}
    for key, raw in sec.items():
        if key == "base":
            continue
        key = "K" if key == "k" else key
        if key == "beta_true":
            fields[key] = _parse_tuple(raw, float)
        elif key == "true_idx":
            fields[key] = _parse_tuple(raw, int)
        elif key in ("random_intercept", "random_slope"):
            fields[key] = sec.getboolean(key)
        elif key in casts:
            fields[key] = casts[key](raw)
        else:
            raise ValueError(f"unknown scenario key {key!r}")
    if "name" not in sec:
        fields["name"] = Path(path).stem
    return SimScenario(**fields)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based stream (Philox) keyed by the integer seed."""
    return np.random.Generator(np.random.Philox(key=int(seed)))


def _standardized_time(n):
    t = np.arange(1, n + 1, dtype=float)
    return (t - t.mean()) / t.std(ddof=1) if n > 1 else np.zeros(1)


def generate(s: SimScenario) -> tuple[Dataset, np.ndarray]:
    """Draw one dataset; returns it with the 0-based true predictor indices.

    Draw order: Z (N x K), b0 (m), b1 (m), then the noise or outcome draw.
    """
    rng = make_rng(s.seed)
    N = s.N
    Z = rng.standard_normal((N, s.K))
    t = np.tile(_standardized_time(s.n), s.m)
    group = np.repeat(np.arange(s.m), s.n)
    b0 = rng.standard_normal(s.m) * s.sigma_b0
    b1 = rng.standard_normal(s.m) * s.sigma_b1
    truth = np.asarray(s.true_idx, dtype=int)
    eta = Z[:, truth] @ np.asarray(s.beta_true) + b0[group] + b1[group] * t
    if s.family is Family.GAUSSIAN:
        y = eta + rng.standard_normal(N)
    elif s.family is Family.POISSON:
        y = rng.poisson(np.exp(eta)).astype(float)
    else:
        y = (rng.random(N) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    d = Dataset(y=y, X=np.ones((N, 1)), Z=Z, group=group, slope_covariate=t, family=s.family,
                group_labels=tuple(f"S{i + 1}" for i in range(s.m)),
                meta={"scenario": s.to_dict()})
    return d, truth


def load_sleepstudy(days_from: int = 2) -> Dataset:
    """The lme4 ``sleepstudy`` table, Days < ``days_from`` dropped.

    ``X`` is ``[1, Days]``; Days is also the slope covariate. ``Z`` is empty.
    """
    path = resources.files("semms") / "data" / "sleepstudy.csv"
    raw = np.genfromtxt(str(path), delimiter=",", names=True)
    keep = raw["Days"] >= days_from
    y = raw["Reaction"][keep]
    days = raw["Days"][keep]
    group, labels = encode_groups([str(int(v)) for v in raw["Subject"][keep]])
    return Dataset(y=y, X=np.column_stack([np.ones(y.size), days]), Z=np.empty((y.size, 0)),
                   group=group, slope_covariate=days, group_labels=labels,
                   x_names=("(Intercept)", "Days"), meta={"source": "sleepstudy"})


def augment_semisynthetic(base: Dataset, K: int = 50, signal=((0, 20.0), (1, -15.0)),
                          seed: int = 20260314) -> tuple[Dataset, np.ndarray]:
    """Append ``K`` standardized N(0,1) predictors and add their signal to ``y``.

    ``signal`` lists ``(index, coefficient)`` pairs with 0-based indices into
    the new predictors; the default is ``+20 V1 - 15 V2``.
    """
    signal = tuple((int(k), float(c)) for k, c in signal)
    if any(not 0 <= k < K for k, _ in signal):
        raise ValueError("signal index out of range")
    rng = make_rng(seed)
    V = rng.standard_normal((base.n, K))
    V = (V - V.mean(axis=0)) / V.std(axis=0, ddof=1)
    y = np.array(base.y)
    for k, c in signal:
        y = y + c * V[:, k]
    d = replace(base, y=y, Z=V, z_names=tuple(f"V{k + 1}" for k in range(K)),
                standardized=False, meta={**base.meta, "augment_seed": seed})
    return d, np.array(sorted(k for k, _ in signal), dtype=int)


@dataclass(frozen=True)
class SelectionMetrics:
    tp: int
    fp: int
    exact: bool


def score_selection(selected, truth) -> SelectionMetrics:
    sel = {int(k) for k in selected}
    tru = {int(k) for k in truth}
    tp = len(sel & tru)
    fp = len(sel - tru)
    return SelectionMetrics(tp=tp, fp=fp, exact=(tp == len(tru) and fp == 0))


def design_effect(n_i: int, rho: float) -> float:
    """Variance inflation ``1 + (n_i - 1) rho`` of a cluster-ignorant analysis."""
    if n_i < 1 or not 0.0 <= rho <= 1.0:
        raise ValueError("need n_i >= 1 and rho in [0, 1]")
    return 1.0 + (n_i - 1) * rho


def icc_logistic(sigma_b0: float) -> float:
    """Latent-scale intraclass correlation of a random-intercept logit model."""
    v = sigma_b0**2
    return v / (v + math.pi**2 / 3.0)
