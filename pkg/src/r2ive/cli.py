"""Command-line interface: ``r2ive estimate|baselines|simulate``."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import warnings
from dataclasses import replace

import numpy as np

from .data import CsvSchema, load_csv, residualize
from .errors import R2iveError
from .estimator import (BASELINE_TAGS, DISPLAY_NAMES, ORACLE_TSLS, R2iveConfig, baselines, r2ive_fit)
from .simulation import PRESETS, SimConfig, dump_records, format_report, preset, run_monte_carlo

SEED_ENV = "R2IVE_SEED"
FORMATS = ("markdown", "csv", "json")


def _split(text):
    if text is None or isinstance(text, (list, tuple)):
        return text
    return [t.strip() for t in text.split(",") if t.strip()]


def _ints(text):
    if text is None or isinstance(text, (list, tuple)):
        return text
    return [int(t) for t in _split(text)]


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("output")
    g.add_argument("--format", choices=FORMATS, help="report format (default: markdown)")
    g.add_argument("--output", help="write the report (simulate) or the full JSON result (estimate) here")
    g.add_argument("--config", help="JSON file of option defaults; flags override it")
    t = p.add_argument_group("tuning")
    t.add_argument("--degree", type=int, help="spline degree h (default 3)")
    t.add_argument("--mn-grid", help="comma-separated basis sizes m_n (default: data-driven grid)")
    t.add_argument("--n-lambda", type=int, help="points on each penalty path (default 50)")
    t.add_argument("--lambda-ratio", type=float, help="smallest/largest penalty on each path (default 1e-3)")
    t.add_argument("--lambda2-grid", help="comma-separated ridge penalties (default: {0,.01,.1,1,10} * n/100)")
    t.add_argument("--ebic-gamma", type=float, help="EBIC model-space weight (default 0.5)")
    t.add_argument("--tau-mode", choices=("body", "appendix"),
                   help="adaptive exponent rule: ceil(2eta/(1-eta)) [+1 for appendix] (default appendix)")
    t.add_argument("--no-standardize", dest="standardize", action="store_const", const=False,
                   help="keep annihilated instruments on their own scale in the Elastic-Net")


def _data(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--input", help="CSV file with a header row")
    g.add_argument("--outcome", help="outcome column (default y)")
    g.add_argument("--treatment", help="endogenous treatment column (default d)")
    g.add_argument("--instruments", help="instrument columns: comma list and/or globs (default z*)")
    g.add_argument("--exogenous", help="exogenous covariate columns partialled out first: comma list and/or globs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="r2ive", allow_abbrev=False,
        description="IV estimation robust to irrelevant and invalid instruments, plus a Monte Carlo harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", allow_abbrev=False, help="fit the robust IV estimator on a CSV file")
    _data(est)
    _common(est)

    base = sub.add_parser("baselines", allow_abbrev=False, help="fit the comparison estimators on a CSV file")
    _data(base)
    _common(base)

    sim = sub.add_parser("simulate", allow_abbrev=False, help="run a Monte Carlo study")
    g = sim.add_argument_group("design")
    g.add_argument("--preset", help=f"named design: {', '.join(PRESETS)}")
    g.add_argument("--n", type=int, help="sample size")
    g.add_argument("--L", type=int, help="number of candidate instruments")
    g.add_argument("--s1", type=int, help="number of relevant instruments")
    g.add_argument("--s2", type=int, help="number of invalid instruments")
    g.add_argument("--q", type=int, help="index of the first invalid instrument")
    g.add_argument("--model", choices=("linear", "nonlinear"), help="reduced-form model")
    g.add_argument("--reps", type=int, help="replications R (default 200)")
    g.add_argument("--seed", type=int, help=f"base seed (default: ${SEED_ENV}, else 0)")
    g.add_argument("--workers", type=int, help="worker processes (default: available cores)")
    g.add_argument("--estimators", help="comma list of estimator tags (default: all)")
    g.add_argument("--dump", help="write per-replication records (CSV) here")
    _common(sim)
    return parser


def _merge(args: argparse.Namespace) -> dict:
    """Flags override the config file, which overrides defaults."""
    opts = {}
    if args.config:
        with open(args.config) as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {args.config} must hold a JSON object")
        opts.update({k.replace("-", "_"): v for k, v in loaded.items()})
    known = set(vars(args))
    unknown = sorted(set(opts) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    opts.update({k: v for k, v in vars(args).items() if v is not None})
    return opts


def _tuning(opts: dict) -> R2iveConfig:
    cfg = R2iveConfig()
    updates = {}
    for key, field_name in (("degree", "degree"), ("n_lambda", "n_lambda"), ("ebic_gamma", "gamma_ebic"),
                            ("tau_mode", "tau_mode"), ("standardize", "standardize")):
        if key in opts:
            updates[field_name] = opts[key]
    if "lambda_ratio" in opts:
        updates["lambda_ratio"] = updates["enet_lambda_ratio"] = float(opts["lambda_ratio"])
    if "n_lambda" in opts:
        updates["enet_n_lambda"] = opts["n_lambda"]
    if "mn_grid" in opts:
        updates["mn_grid"] = _ints(opts["mn_grid"])
    if "lambda2_grid" in opts:
        updates["lambda2_grid"] = [float(v) for v in _split(opts["lambda2_grid"])]
    return replace(cfg, **updates)


def _load(opts: dict):
    if "input" not in opts:
        raise ValueError("--input is required")
    schema = CsvSchema(outcome=opts.get("outcome", "y"), treatment=opts.get("treatment", "d"),
                       instruments=tuple(_split(opts.get("instruments", "z*"))),
                       exogenous=tuple(_split(opts.get("exogenous", "")) or ()))
    return load_csv(opts["input"], schema)


def _emit(text: str, path: str | None = None) -> None:
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _num(x) -> str:
    return "-" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6g}"


def cmd_estimate(opts: dict) -> int:
    ds = _load(opts)
    res = r2ive_fit(ds, _tuning(opts))
    out = res.to_dict()
    fmt = opts.get("format", "markdown")
    if "output" in opts:
        with open(opts["output"], "w") as fh:
            json.dump(out, fh, indent=2)
    if fmt == "json":
        brief = {k: v for k, v in out.items() if k != "d_hat"}
        _emit(json.dumps(brief, indent=2) + "\n")
        return 0
    rows = [("beta_hat", _num(res.beta_hat)), ("se_homoscedastic", _num(res.se_homoscedastic)),
            ("se_heteroscedastic", _num(res.se_heteroscedastic)),
            ("relevant_set", " ".join(out["relevant_set"]) or "(none)"),
            ("invalid_set", " ".join(out["invalid_set"]) or "(none)")]
    rows += [(k, _num(v) if isinstance(v, float) else str(v)) for k, v in res.tuning.items()]
    if fmt == "csv":
        _emit("field,value\n" + "".join(f"{k},{v}\n" for k, v in rows))
    else:
        _emit("| field | value |\n|---|---|\n" + "".join(f"| {k} | {v} |\n" for k, v in rows))
    return 0


def cmd_baselines(opts: dict) -> int:
    ds = _load(opts)
    cds = residualize(ds)
    tags = [t for t in BASELINE_TAGS if t != ORACLE_TSLS]
    res = baselines(cds, config=_tuning(opts), tags=tags)
    names = cds.instrument_names
    fmt = opts.get("format", "markdown")
    if fmt == "json":
        text = json.dumps([b.to_dict(names) for b in res], indent=2) + "\n"
    else:
        rows = []
        for b in res:
            sel = b.relevant_set if b.relevant_set is not None else b.invalid_set
            rows.append((DISPLAY_NAMES[b.tag], _num(b.beta_hat), _num(b.se),
                         " ".join(names[j] for j in sel) if sel else ""))
        if fmt == "csv":
            text = "estimator,beta_hat,se,selected\n" + "".join(",".join(r) + "\n" for r in rows)
        else:
            text = ("| estimator | beta_hat | se | selected |\n|---|---:|---:|---|\n"
                    + "".join("| " + " | ".join(r) + " |\n" for r in rows))
    _emit(text, opts.get("output"))
    return 0


def _sim_config(opts: dict) -> SimConfig:
    seed = opts.get("seed")
    if seed is None:
        env = os.environ.get(SEED_ENV)
        seed = int(env) if env not in (None, "") else 0
    fields = {k: opts[k] for k in ("n", "L", "s1", "s2", "q", "model") if k in opts}
    if "reps" in opts:
        fields["R"] = opts["reps"]
    fields["seed"] = int(seed)
    if "preset" in opts:
        return preset(opts["preset"], **fields)
    missing = [k for k in ("n", "L", "s1", "s2", "q") if k not in fields]
    if missing:
        raise ValueError("simulate needs --preset or all of --n --L --s1 --s2 --q (missing: "
                         + ", ".join("--" + m for m in missing) + ")")
    return SimConfig(**fields)


def cmd_simulate(opts: dict) -> int:
    cfg = _sim_config(opts)
    tags = _split(opts.get("estimators")) or None
    kwargs = {} if tags is None else {"estimators": tags}
    report = run_monte_carlo(cfg, workers=opts.get("workers"), config=_tuning(opts), **kwargs)
    _emit(format_report(report, opts.get("format", "markdown")), opts.get("output"))
    if "dump" in opts:
        with open(opts["dump"], "w") as fh:
            fh.write(dump_records(report))
    return 0


COMMANDS = {"estimate": cmd_estimate, "baselines": cmd_baselines, "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    def show(message, category, filename, lineno, file=None, line=None):
        print(f"warning: {message}", file=sys.stderr)

    with warnings.catch_warnings():
        warnings.simplefilter("always")
        warnings.showwarning = show
        try:
            return COMMANDS[args.command](_merge(args))
        except KeyError as exc:
            print(f"error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        except (R2iveError, ValueError, OSError, np.linalg.LinAlgError, json.JSONDecodeError) as exc:
            print(f"error: {' '.join(str(exc).split())}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
