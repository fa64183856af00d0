"""Replicated benchmark runs over a simulation scenario.

Replicate ``r`` uses seed ``base_seed + r`` for the data; every method is
fitted to the same draw. A method that fails on a replicate becomes a
failed cell: it is counted, excluded from the means and never aborts the
table. Outputs contain no timings, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .data import Family, standardize
from .exceptions import SemmsError
from .gam import FitConfig, fit_semms, fit_semms_glm
from .lasso import fit_lasso_cv
from .mixed import MixedConfig, fit_semms_mixed
from .sim import SimScenario, generate, score_selection

__all__ = ["METHODS", "BenchmarkTable", "MethodSummary", "ReplicateRow", "run_benchmark",
           "parse_methods", "default_workers"]

METHODS = ("plain-semms", "mixed-semms", "lasso-cv")
_ALIASES = {"plain": "plain-semms", "mixed": "mixed-semms", "lasso": "lasso-cv"}
WORKERS_ENV = "SEMMS_WORKERS"

CSV_FIELDS = ("scenario", "replicate", "seed", "method", "status", "tp", "fp", "exact",
              "outer_iters", "converged", "selected", "error")


def parse_methods(spec) -> tuple[str, ...]:
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    out = []
    for raw in items:
        name = _ALIASES.get(raw.strip(), raw.strip())
        if name not in METHODS:
            raise ValueError(f"unknown method {raw!r}; known: {', '.join(METHODS)}")
        if name not in out:
            out.append(name)
    if not out:
        raise ValueError("no methods given")
    return tuple(out)


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


@dataclass(frozen=True)
class ReplicateRow:
    scenario: str
    replicate: int
    seed: int
    method: str
    status: str
    tp: int | None = None
    fp: int | None = None
    exact: bool | None = None
    outer_iters: int | None = None
    converged: bool | None = None
    selected: tuple[int, ...] = ()
    error: str = ""

    def as_csv(self) -> dict:
        def cell(v):
            if v is None:
                return ""
            if isinstance(v, bool):
                return "1" if v else "0"
            return str(v)
        row = {k: cell(getattr(self, k)) for k in CSV_FIELDS if k != "selected"}
        # 1-based candidate numbers, as on the command line
        row["selected"] = " ".join(str(k + 1) for k in self.selected)
        return row


@dataclass
class MethodSummary:
    method: str
    n_reps: int
    n_failed: int
    mean_tp: float | None
    mean_fp: float | None
    exact_rate: float | None
    mean_outer_iters: float | None = None
    max_outer_iters: int | None = None
    converged_rate: float | None = None


@dataclass
class BenchmarkTable:
    scenario: SimScenario
    base_seed: int
    reps: int
    methods: tuple[str, ...]
    summaries: dict[str, MethodSummary]
    rows: list[ReplicateRow] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        scen = self.scenario.to_dict()
        scen.pop("seed", None)
        return {
            "scenario": scen,
            "base_seed": self.base_seed,
            "reps": self.reps,
            "seeds": [self.base_seed + r for r in range(self.reps)],
            "methods": {m: vars(self.summaries[m]) for m in self.methods},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, json_path=None, csv_path=None) -> None:
        if json_path is not None:
            with open(json_path, "w") as fh:
                fh.write(self.to_json())
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
                w.writeheader()
                for row in self.rows:
                    w.writerow(row.as_csv())


def _run_method(method, d, truth, s: SimScenario, seed, cfg: FitConfig):
    if method == "plain-semms":
        fit = fit_semms(d, cfg) if d.family is Family.GAUSSIAN else fit_semms_glm(d, cfg)
        return fit.state.active, None, None
    if method == "mixed-semms":
        mcfg = MixedConfig(intercept=s.random_intercept, slope=s.random_slope, semms=cfg)
        fit = fit_semms_mixed(d, mcfg)
        return fit.state.active, fit.outer_iters, fit.converged
    res = fit_lasso_cv(d, seed=seed)
    return res.selected, None, None


def _replicate(args) -> list[ReplicateRow]:
    s, methods, r, seed, cfg = args
    with threadpool_limits(limits=1):
        d, truth = generate(s.with_seed(seed))
        d = standardize(d)
        rows = []
        for method in methods:
            try:
                sel, iters, conv = _run_method(method, d, truth, s, seed, cfg)
            except (SemmsError, ArithmeticError, np.linalg.LinAlgError) as exc:
                rows.append(ReplicateRow(s.name, r, seed, method, "failed",
                                         error=f"{type(exc).__name__}: {exc}"))
                continue
            m = score_selection(sel, truth)
            rows.append(ReplicateRow(s.name, r, seed, method, "ok", m.tp, m.fp, m.exact,
                                     iters, conv, tuple(int(k) for k in sel)))
    return rows


def _summarize(method, rows) -> MethodSummary:
    ok = [r for r in rows if r.status == "ok"]
    n_failed = len(rows) - len(ok)
    if not ok:
        return MethodSummary(method, len(rows), n_failed, None, None, None)
    out = MethodSummary(
        method, len(rows), n_failed,
        mean_tp=float(np.mean([r.tp for r in ok])),
        mean_fp=float(np.mean([r.fp for r in ok])),
        exact_rate=float(np.mean([r.exact for r in ok])),
    )
    iters = [r.outer_iters for r in ok if r.outer_iters is not None]
    if iters:
        out.mean_outer_iters = float(np.mean(iters))
        out.max_outer_iters = int(max(iters))
        out.converged_rate = float(np.mean([bool(r.converged) for r in ok]))
    return out


def run_benchmark(s: SimScenario, methods=METHODS, reps: int = 100, base_seed: int = 0,
                  workers: int | None = None, cfg: FitConfig = FitConfig()) -> BenchmarkTable:
    """Fit every method to ``reps`` replicates of scenario ``s``.

    ``workers`` > 1 spreads replicates over processes (BLAS limited to one
    thread each); results do not depend on the worker count.
    """
    methods = parse_methods(methods)
    if reps < 1:
        raise ValueError("reps must be at least 1")
    workers = default_workers() if workers is None else max(1, int(workers))
    tasks = [(s, methods, r, base_seed + r, cfg) for r in range(reps)]
    if workers == 1:
        chunks = [_replicate(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            chunks = list(ex.map(_replicate, tasks))
    rows = [row for chunk in chunks for row in chunk]
    summaries = {m: _summarize(m, [r for r in rows if r.method == m]) for m in methods}
    return BenchmarkTable(s, base_seed, reps, methods, summaries, rows)
