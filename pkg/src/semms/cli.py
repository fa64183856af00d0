"""Command-line interface: ``semms fit | fit-mixed | simulate | benchmark``.

Column flags are 1-based (``--zcols 4-103``). Reports are JSON; datasets
and replicate tables are CSV. Exit codes: 0 success, 2 usage or input
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .bench import METHODS, WORKERS_ENV, default_workers, parse_methods, run_benchmark
from .data import Family, load_dataset, standardize, write_dataset
from .exceptions import DataError, NumericalFailure
from .gam import FitConfig, fit_semms, fit_semms_glm
from .glmm import GlmmFit
from .mixed import MixedConfig, fit_semms_mixed
from .sim import SCENARIOS, generate, get_scenario, read_scenario_file

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("semms")


class UsageError(Exception):
    pass


def parse_columns(spec: str | None) -> list[int]:
    """``"4-103,105"`` (1-based, inclusive) -> 0-based indices."""
    if spec is None or str(spec).strip() == "":
        return []
    out: list[int] = []
    for part in str(spec).split(","):
        part = part.strip()
        try:
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
            else:
                lo = hi = int(part)
        except ValueError:
            raise UsageError(f"bad column spec {part!r} (expected e.g. 4-103,105)") from None
        if lo < 1 or hi < lo:
            raise UsageError(f"bad column range {part!r}; columns are numbered from 1")
        out.extend(range(lo - 1, hi))
    if len(set(out)) != len(out):
        raise UsageError(f"column spec {spec!r} repeats a column")
    return out


def parse_re(spec: str) -> tuple[bool, bool]:
    parts = {p.strip() for p in spec.split(",") if p.strip()}
    unknown = parts - {"intercept", "slope"}
    if unknown or not parts:
        raise UsageError(f"--re expects intercept and/or slope, got {spec!r}")
    return "intercept" in parts, "slope" in parts


# option name -> (type, default); None default means "not given"
_FIT_OPTS = {
    "input": (str, None), "ycol": (int, None), "zcols": (str, None), "xcols": (str, ""),
    "group_col": (int, None), "slope_col": (int, None), "family": (str, "gaussian"),
    "nn": (int, 5), "mincor": (float, 0.7), "minchange": (float, 1.0),
    "max_gam_iters": (int, 100), "em_tol": (float, 1e-6), "em_max_iters": (int, 200),
}
_MIXED_OPTS = {
    **_FIT_OPTS, "re": (str, "intercept,slope"), "conv_tol": (float, 1e-3),
    "max_outer": (int, 10), "warm_start": (bool, True),
}


def _add_fit_args(p: argparse.ArgumentParser, mixed: bool) -> None:
    p.add_argument("--config", help="JSON config or earlier report; flags must agree with it")
    p.add_argument("--input", help="CSV file with a header row")
    p.add_argument("--ycol", type=int, help="response column (1-based)")
    p.add_argument("--zcols", help="candidate columns, e.g. 4-103")
    p.add_argument("--xcols", help="extra unpenalized fixed covariates")
    p.add_argument("--group-col", type=int, dest="group_col", help="cluster column")
    p.add_argument("--slope-col", type=int, dest="slope_col", help="random-slope covariate column")
    p.add_argument("--family", choices=[f.value for f in Family])
    p.add_argument("--nn", type=int, help="size of the initial active set (default 5)")
    p.add_argument("--mincor", type=float, help="initialization correlation cap (default 0.7)")
    p.add_argument("--minchange", type=float, help="minimum accepted gain (default 1.0)")
    p.add_argument("--max-gam-iters", type=int, dest="max_gam_iters")
    p.add_argument("--em-tol", type=float, dest="em_tol")
    p.add_argument("--em-max-iters", type=int, dest="em_max_iters")
    if mixed:
        p.add_argument("--re", help="random effects: intercept,slope (default both)")
        p.add_argument("--conv-tol", type=float, dest="conv_tol", help="outer tolerance on max |du|")
        p.add_argument("--max-outer", type=int, dest="max_outer")
        p.add_argument("--no-warm-start", action="store_const", const=False, dest="warm_start")
    p.add_argument("--report", help="write the JSON report here instead of stdout")


def resolve_config(args: argparse.Namespace, opts: dict) -> dict:
    """Defaults, then the config file, then explicit flags.

    A flag that disagrees with a value from the config file is an error
    naming both sources.
    """
    from_file: dict = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        from_file = raw.get("config", raw) if isinstance(raw, dict) else None
        if not isinstance(from_file, dict):
            raise UsageError(f"config {args.config} is not a JSON object")
        unknown = sorted(set(from_file) - set(opts))
        if unknown:
            raise UsageError(f"config {args.config} has unknown keys: {', '.join(unknown)}")
    cfg = {}
    for key, (typ, default) in opts.items():
        flag = getattr(args, key, None)
        if key in from_file and from_file[key] is not None:
            try:
                val = typ(from_file[key])
            except (TypeError, ValueError):
                raise UsageError(f"config {args.config}: bad value for {key}: {from_file[key]!r}") from None
            if flag is not None and flag != val:
                raise UsageError(f"--{key.replace('_', '-')}={flag!r} conflicts with "
                                 f"{key}={val!r} from config {args.config}")
            cfg[key] = val
        else:
            cfg[key] = flag if flag is not None else default
    for key in ("input", "ycol", "zcols"):
        if cfg[key] is None:
            raise UsageError(f"--{key} is required (flag or config file)")
    return cfg


def _load(cfg: dict):
    def col(v):
        if v is None:
            return None
        if v < 1:
            raise UsageError("columns are numbered from 1")
        return v - 1
    d = load_dataset(cfg["input"], col(cfg["ycol"]), parse_columns(cfg["zcols"]),
                     group_col=col(cfg["group_col"]), slope_col=col(cfg["slope_col"]),
                     family=cfg["family"], x_cols=parse_columns(cfg["xcols"]))
    return standardize(d)


def _fit_config(cfg: dict) -> FitConfig:
    try:
        return FitConfig(nn=cfg["nn"], mincor=cfg["mincor"], minchange=cfg["minchange"],
                         max_gam_iters=cfg["max_gam_iters"], em_tol=cfg["em_tol"],
                         em_max_iters=cfg["em_max_iters"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _selected(d, state, zcols) -> list[dict]:
    return [{"column": zcols[k] + 1, "name": d.z_names[k], "sign": int(state.gamma[k])}
            for k in state.active]


def _varcomp_dict(vc) -> dict:
    return {k: v for k, v in asdict(vc).items()}


def _emit(report: dict, path) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _header(command: str, argv, cfg) -> dict:
    return {"command": command, "argv": list(argv), "config": cfg, "version": __version__,
            "seed": None}


def cmd_fit(args, argv) -> dict:
    cfg = resolve_config(args, _FIT_OPTS)
    d = _load(cfg)
    fc = _fit_config(cfg)
    t0 = time.perf_counter()
    fit = fit_semms(d, fc) if d.family is Family.GAUSSIAN else fit_semms_glm(d, fc)
    elapsed = time.perf_counter() - t0
    rep = _header("fit", argv, cfg)
    p = fit.params
    rep.update({
        "selected": _selected(d, fit.state, parse_columns(cfg["zcols"])),
        "params": {"mu": p.mu, "beta": np.asarray(p.beta), "sigma2_e": p.sigma2_e,
                   "sigma2_r": p.sigma2_r},
        "trace": fit.trace, "n_iters": fit.n_iters, "converged": fit.converged,
        "glm_rounds": fit.glm_rounds, "timings": {"fit_seconds": elapsed},
    })
    return rep


def cmd_fit_mixed(args, argv) -> dict:
    cfg = resolve_config(args, _MIXED_OPTS)
    d = _load(cfg)
    intercept, slope = parse_re(cfg["re"])
    if cfg["group_col"] is None:
        raise UsageError("fit-mixed needs --group-col")
    if slope and cfg["slope_col"] is None:
        raise UsageError("a random slope needs --slope-col")
    try:
        mc = MixedConfig(intercept=intercept, slope=slope, conv_tol=cfg["conv_tol"],
                         max_outer=cfg["max_outer"], semms=_fit_config(cfg),
                         warm_start=cfg["warm_start"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    t0 = time.perf_counter()
    fit = fit_semms_mixed(d, mc)
    elapsed = time.perf_counter() - t0
    fm = fit.final_model
    gaussian = not isinstance(fm, GlmmFit)
    names = list(d.x_names) + [d.z_names[k] for k in fit.state.active]
    rep = _header("fit-mixed", argv, cfg)
    rep.update({
        "selected": _selected(d, fit.state, parse_columns(cfg["zcols"])),
        "final_model": {
            "method": "REML" if gaussian else "PQL (ML)",
            "varcomp": _varcomp_dict(fm.varcomp),
            "fixed_coefs": dict(zip(names, np.asarray(fm.fixed_coefs).tolist())),
            "loglik": fm.loglik,
            "loglik_approximate": not gaussian,
            "aic": fit.aic,
            "aic_convention": "-2 loglik + 2 (fixed coefs + variance components"
                              + (" + residual variance)" if gaussian else ")"),
            "vif": fit.vif,
        },
        "outer_iters": fit.outer_iters, "converged": fit.converged,
        "u_trace": fit.u_trace, "loglik_trace": fit.loglik_trace,
        "selected_trace": [[d.z_names[k] for k in s] for s in fit.selected_trace],
        "timings": {"fit_seconds": elapsed},
    })
    return rep


def _scenario(args):
    if args.scenario_file:
        if args.scenario:
            raise UsageError(f"--scenario {args.scenario} conflicts with --scenario-file "
                             f"{args.scenario_file}; give one")
        return read_scenario_file(args.scenario_file)
    if not args.scenario:
        raise UsageError(f"--scenario is required; known: {', '.join(SCENARIOS)}")
    return get_scenario(args.scenario)


def cmd_simulate(args, argv) -> dict:
    s = _scenario(args)
    if args.seed is not None:
        s = s.with_seed(args.seed)
    d, truth = generate(s)
    write_dataset(d, args.out)
    n_lead = 1 + (d.group is not None) + (d.slope_covariate is not None)
    rep = _header("simulate", argv, s.to_dict())
    rep.update({"seed": s.seed, "out": args.out, "truth": [d.z_names[k] for k in truth],
                "layout": {"ycol": 1, "group_col": 2 if d.group is not None else None,
                           "slope_col": 3 if d.slope_covariate is not None else None,
                           "zcols": f"{n_lead + 1}-{n_lead + d.K}"}})
    return rep


def cmd_benchmark(args, argv) -> dict:
    s = _scenario(args)
    try:
        methods = parse_methods(args.methods)
        workers = default_workers() if args.workers is None else args.workers
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.reps < 1 or workers < 1:
        raise UsageError("--reps and --workers must be at least 1")
    tab = run_benchmark(s, methods, args.reps, args.base_seed, workers)
    tab.write(args.out_json, args.out_csv)
    out = tab.to_dict()
    out.update({"command": "benchmark", "version": __version__, "seed": args.base_seed,
                "out_json": args.out_json, "out_csv": args.out_csv})
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semms", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="plain selection (Gaussian, or IRLS for Poisson/binomial)")
    _add_fit_args(p, mixed=False)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("fit-mixed", help="selection alternating with random-effects refits")
    _add_fit_args(p, mixed=True)
    p.set_defaults(func=cmd_fit_mixed)

    for name, func, helptext in (("simulate", cmd_simulate, "write one simulated dataset"),
                                 ("benchmark", cmd_benchmark, "replicated method comparison")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--scenario", help=f"one of: {', '.join(SCENARIOS)}")
        p.add_argument("--scenario-file", dest="scenario_file",
                       help="key = value scenario definition")
        p.set_defaults(func=func)
        if name == "simulate":
            p.add_argument("--seed", type=int)
            p.add_argument("--out", required=True, help="CSV path")
            p.add_argument("--report")
        else:
            p.add_argument("--reps", type=int, default=100)
            p.add_argument("--base-seed", type=int, default=0, dest="base_seed")
            p.add_argument("--methods", default=",".join(METHODS),
                           help="comma list of plain, mixed, lasso")
            p.add_argument("--workers", type=int,
                           help=f"worker processes (default ${WORKERS_ENV} or 1)")
            p.add_argument("--out-json", dest="out_json")
            p.add_argument("--out-csv", dest="out_csv")
            p.add_argument("--report")
    return ap


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        report = args.func(args, argv)
    except NumericalFailure as exc:
        print(f"semms: numerical failure: {exc}", file=sys.stderr)
        if exc.detail:
            print(json.dumps(exc.detail, default=_json_default), file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, DataError, ValueError, OSError) as exc:
        print(f"semms: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyError as exc:
        print(f"semms: error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_USAGE
    _emit(report, getattr(args, "report", None))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
