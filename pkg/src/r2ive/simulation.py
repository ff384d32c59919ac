"""Simulation designs, the Monte Carlo runner, and report tables."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset, residualize
from .errors import HarnessError, IdentificationWarning, R2iveError
from .estimator import (ALL_TAGS, DISPLAY_NAMES, NAIVE, ORACLE_TSLS, R2IVE, SISVIVE, SISVIVE_POST,
                        R2iveConfig, baselines, r2ive_fit)
from .grouplasso import tune_first_stage

LINEAR = "linear"
NONLINEAR = "nonlinear"
GAMMA_CYCLE = (2.0, 0.75, 1.5, 1.0)
MAX_FAILURE_RATE = 0.05


@dataclass(frozen=True)
class SimConfig:
    n: int
    L: int
    s1: int
    s2: int
    q: int
    model: str = LINEAR
    beta_star: float = 0.75
    rho: float = 0.5
    error_corr: float = 0.8
    R: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.model not in (LINEAR, NONLINEAR):
            raise ValueError(f"model must be {LINEAR!r} or {NONLINEAR!r}, got {self.model!r}")
        if self.n < 2 or self.L < 1 or self.R < 1:
            raise ValueError("need n >= 2, L >= 1 and R >= 1")
        if min(self.s1, self.s2, self.q) < 0:
            raise ValueError("s1, s2 and q must be nonnegative")
        if self.s1 > self.L:
            raise ValueError(f"s1={self.s1} exceeds L={self.L}")
        if self.q + self.s2 > self.L:
            raise ValueError(f"q + s2 = {self.q + self.s2} exceeds L={self.L}")
        if self.model == NONLINEAR and self.s1 % 4:
            raise ValueError("the nonlinear design needs s1 to be a multiple of 4")
        if not -1 < self.error_corr < 1 or not -1 < self.rho < 1:
            raise ValueError("correlations must lie in (-1, 1)")
        if self.s2 >= self.L / 2:
            warnings.warn(f"s2={self.s2} is not below L/2; the valid instruments are not a majority",
                          IdentificationWarning, stacklevel=3)

    @property
    def relevant(self) -> tuple[int, ...]:
        return tuple(range(self.s1))

    @property
    def invalid(self) -> tuple[int, ...]:
        return tuple(range(self.q, self.q + self.s2))

    @property
    def valid(self) -> tuple[int, ...]:
        bad = set(self.invalid)
        return tuple(j for j in range(self.L) if j not in bad)

    def partition(self) -> tuple[int, int, int, int]:
        """Sizes of (relevant valid, relevant invalid, irrelevant valid, irrelevant invalid)."""
        rel, inv = set(self.relevant), set(self.invalid)
        iv2 = len(rel & inv)
        iv1 = len(rel) - iv2
        iv4 = len(inv) - iv2
        return iv1, iv2, self.L - iv1 - iv2 - iv4, iv4

    def gamma(self) -> np.ndarray:
        g = np.zeros(self.L)
        g[: self.s1] = [GAMMA_CYCLE[j % 4] for j in range(self.s1)]
        return g

    def alpha(self) -> np.ndarray:
        a = np.zeros(self.L)
        a[list(self.invalid)] = 1.0
        return a


def _preset(n, s1, s2, q, model=LINEAR) -> SimConfig:
    return SimConfig(n=n, L=100, s1=s1, s2=s2, q=q, model=model)


PRESETS: dict[str, SimConfig] = {
    "linear-s2-0": _preset(200, 10, 0, 10),
    "linear-s2-10": _preset(200, 10, 10, 7),
    "linear-s2-30": _preset(200, 10, 30, 7),
    "linear-s1-4": _preset(200, 4, 30, 2),
    "linear-s1-10": _preset(200, 10, 30, 7),
    "linear-s1-20": _preset(200, 20, 30, 14),
    "linear-n200": _preset(200, 20, 20, 14),
    "linear-n500": _preset(500, 20, 20, 14),
    "linear-n1000": _preset(1000, 20, 20, 14),
    "nonlinear-s2-0-n500": _preset(500, 4, 0, 4, NONLINEAR),
    "nonlinear-s2-0-n200": _preset(200, 4, 0, 4, NONLINEAR),
    "nonlinear-s2-20-n200": _preset(200, 4, 20, 2, NONLINEAR),
    "nonlinear-s2-20-n500": _preset(500, 4, 20, 2, NONLINEAR),
    "nonlinear-s1-12": _preset(500, 12, 20, 9, NONLINEAR),
}


def preset(name: str, **overrides) -> SimConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return replace(PRESETS[name], **overrides)


@dataclass(frozen=True)
class Truth:
    relevant: tuple[int, ...]
    invalid: tuple[int, ...]
    valid: tuple[int, ...]
    beta_star: float


def _rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(rep)]))


def generate_dataset(cfg: SimConfig, rep: int) -> tuple[Dataset, Truth]:
    """Draw replication ``rep``; the stream depends only on ``(cfg.seed, rep)``."""
    rng = _rng(cfg.seed, rep)
    idx = np.arange(cfg.L)
    sigma = cfg.rho ** np.abs(idx[:, None] - idx[None, :])
    Z = rng.standard_normal((cfg.n, cfg.L)) @ np.linalg.cholesky(sigma).T
    c = cfg.error_corr
    e = rng.standard_normal((cfg.n, 2))
    eps = e[:, 0]
    xi = c * e[:, 0] + math.sqrt(1 - c * c) * e[:, 1]
    if cfg.model == LINEAR:
        D = Z @ cfg.gamma() + xi
    else:
        D = xi.copy()
        for base in range(0, cfg.s1, 4):
            z1, z2, z3, z4 = (Z[:, base + k] for k in range(4))
            D += 2 * z1 ** 2 + 0.75 * z2 ** 2 + 1.5 * z3 ** 2 + 3 * np.sin(np.pi * z4)
    Y = D * cfg.beta_star + Z @ cfg.alpha() + eps
    truth = Truth(relevant=cfg.relevant, invalid=cfg.invalid, valid=cfg.valid, beta_star=cfg.beta_star)
    return Dataset(Y=Y, D=D, Z=Z), truth


RECORD_FIELDS = ("rep", "estimator", "beta_hat", "se", "n_relevant", "n_invalid", "captured_relevant",
                 "captured_invalid", "exact_invalid", "error")


def _record(rep, tag, beta=math.nan, se=math.nan, relevant=None, invalid=None, truth=None, error=""):
    rec = dict(rep=rep, estimator=tag, beta_hat=beta, se=se, n_relevant=-1, n_invalid=-1,
               captured_relevant=-1, captured_invalid=-1, exact_invalid=-1, error=error)
    if relevant is not None:
        rec["n_relevant"] = len(relevant)
        rec["captured_relevant"] = len(set(relevant) & set(truth.relevant))
    if invalid is not None:
        rec["n_invalid"] = len(invalid)
        rec["captured_invalid"] = len(set(invalid) & set(truth.invalid))
        rec["exact_invalid"] = int(set(invalid) == set(truth.invalid))
    return rec


def run_replication(cfg: SimConfig, rep: int, estimators: Sequence[str] = ALL_TAGS,
                    config: R2iveConfig | None = None) -> list[dict]:
    """Fit every requested estimator on replication ``rep``; failures become error records."""
    ds, truth = generate_dataset(cfg, rep)
    cds = residualize(ds)
    rcfg = config or R2iveConfig()
    out: dict[str, dict] = {}
    fs = None
    if R2IVE in estimators or NAIVE in estimators:
        try:
            fs = tune_first_stage(cds.D, cds, rcfg.mn_grid, rcfg.degree, rcfg.n_lambda, rcfg.lambda_ratio,
                                  rcfg.gamma_ebic, rcfg.tol, rcfg.max_iter)
        except R2iveError as exc:
            for tag in (R2IVE, NAIVE):
                out[tag] = _record(rep, tag, truth=truth, error=f"{type(exc).__name__}: {exc}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IdentificationWarning)
        if R2IVE in estimators and R2IVE not in out:
            try:
                res = r2ive_fit(cds, rcfg, first_stage=fs)
                out[R2IVE] = _record(rep, R2IVE, res.beta_hat, res.se_heteroscedastic, res.relevant_set,
                                     res.invalid_set, truth)
            except (R2iveError, np.linalg.LinAlgError) as exc:
                out[R2IVE] = _record(rep, R2IVE, truth=truth, error=f"{type(exc).__name__}: {exc}")
        todo = [t for t in estimators if t != R2IVE and t not in out]
        try:
            fitted = {b.tag: b for b in baselines(cds, truth.relevant, truth.valid, fs, rcfg, todo)}
        except (R2iveError, np.linalg.LinAlgError):
            fitted = {}
        for tag in todo:
            try:
                b = fitted[tag] if tag in fitted else baselines(cds, truth.relevant, truth.valid, fs, rcfg, [tag])[0]
            except (R2iveError, np.linalg.LinAlgError) as exc:
                out[tag] = _record(rep, tag, truth=truth, error=f"{type(exc).__name__}: {exc}")
                continue
            se = math.nan if b.se is None else b.se
            rel = b.relevant_set if tag == NAIVE else None
            inv = b.invalid_set if tag in (SISVIVE, SISVIVE_POST) else None
            out[tag] = _record(rep, tag, b.beta_hat, se, rel, inv, truth)
    return [out[t] for t in estimators]


@dataclass
class SelectionStats:
    mean: float
    median: float
    max: float
    min: float
    freq: float


@dataclass
class EstimatorSummary:
    estimator: str
    bias: float
    std_dev: float
    mse: float
    n_ok: int
    n_failed: int
    relevant: SelectionStats | None = None
    invalid: SelectionStats | None = None
    exact_invalid_rate: float | None = None
    mean_se: float | None = None
    coverage: float | None = None


@dataclass
class SimulationReport:
    config: SimConfig
    estimators: list[str]
    summaries: dict[str, EstimatorSummary]
    records: list[dict] = field(repr=False, default_factory=list)
    std_dev_defined: bool = True
    elapsed: float = 0.0

    def __getitem__(self, tag: str) -> EstimatorSummary:
        return self.summaries[tag]


def _selection(counts: np.ndarray, captured: np.ndarray, n_true: int) -> SelectionStats | None:
    if counts.size == 0 or np.any(counts < 0):
        return None
    freq = float(np.mean(captured / n_true)) if n_true else math.nan
    return SelectionStats(mean=float(counts.mean()), median=float(np.median(counts)), max=float(counts.max()),
                          min=float(counts.min()), freq=freq)


def summarize(cfg: SimConfig, records: list[dict], estimators: Sequence[str]) -> SimulationReport:
    """Reduce per-replication records (sorted by replication first, so order of arrival is irrelevant)."""
    records = sorted(records, key=lambda r: (r["rep"], list(estimators).index(r["estimator"])))
    summaries = {}
    for tag in estimators:
        rows = [r for r in records if r["estimator"] == tag]
        ok = [r for r in rows if not r["error"]]
        failed = len(rows) - len(ok)
        if rows and failed / len(rows) > MAX_FAILURE_RATE:
            first = next(r["error"] for r in rows if r["error"])
            raise HarnessError(f"{tag} failed in {failed} of {len(rows)} replications; first error: {first}")
        err = np.array([r["beta_hat"] for r in ok]) - cfg.beta_star
        if err.size:
            bias, mse = float(err.mean()), float(np.mean(err ** 2))
            std = float(err.std(ddof=1)) if err.size > 1 else 0.0
        else:
            bias = mse = std = math.nan
        arr = lambda key: np.array([r[key] for r in ok], dtype=float)
        se = arr("se")
        summary = EstimatorSummary(tag, bias, std, mse, len(ok), failed,
                                   _selection(arr("n_relevant"), arr("captured_relevant"), cfg.s1),
                                   _selection(arr("n_invalid"), arr("captured_invalid"), cfg.s2))
        if summary.invalid is not None:
            summary.exact_invalid_rate = float(np.mean(arr("exact_invalid")))
        if se.size and np.all(np.isfinite(se)):
            summary.mean_se = float(se.mean())
            summary.coverage = float(np.mean(np.abs(err) <= 1.96 * se))
        summaries[tag] = summary
    n_reps = len({r["rep"] for r in records})
    return SimulationReport(cfg, list(estimators), summaries, records, std_dev_defined=n_reps > 1)


def _run_chunk(args):
    cfg, reps, estimators, config = args
    return [rec for rep in reps for rec in run_replication(cfg, rep, estimators, config)]


def run_monte_carlo(cfg: SimConfig, estimators: Sequence[str] = ALL_TAGS, workers: int | None = 1,
                    config: R2iveConfig | None = None, reps: Sequence[int] | None = None) -> SimulationReport:
    """Run replications ``0..R-1`` (or ``reps``) and summarize.

    ``workers=None`` uses every available core; results do not depend on it.
    """
    estimators = list(estimators)
    unknown = [t for t in estimators if t not in ALL_TAGS]
    if unknown:
        raise ValueError(f"unknown estimators {unknown}; choose from {', '.join(ALL_TAGS)}")
    reps = list(range(cfg.R)) if reps is None else list(reps)
    if workers is None:
        workers = len(os.sched_getaffinity(0))
    start = time.perf_counter()
    if workers <= 1 or len(reps) <= 1:
        records = _run_chunk((cfg, reps, estimators, config))
    else:
        chunks = [reps[i::workers * 4] for i in range(min(len(reps), workers * 4))]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = [rec for part in pool.map(_run_chunk, [(cfg, c, estimators, config) for c in chunks])
                       for rec in part]
    report = summarize(cfg, records, estimators)
    report.elapsed = time.perf_counter() - start
    return report


TABLE_COLUMNS = ("Estimator", "Bias", "std dev", "MSE", "mean", "median", "max", "min", "freq")
CSV_COLUMNS = ("estimator", "bias", "std_dev", "mse", "n_ok", "n_failed",
               "relevant_mean", "relevant_median", "relevant_max", "relevant_min", "relevant_freq",
               "invalid_mean", "invalid_median", "invalid_max", "invalid_min", "invalid_freq",
               "exact_invalid_rate", "mean_se", "coverage")


def _fmt(x, digits=4) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "-"
    return f"{x:.{digits}f}"


def _fmt_count(x) -> str:
    return "-" if x is None or math.isnan(x) else (f"{x:.0f}" if float(x).is_integer() else f"{x:.1f}")


def _fmt_freq(x) -> str:
    if x is None or math.isnan(x):
        return "-"
    s = f"{x:.3f}".rstrip("0").rstrip(".")
    return s


def _table_stats(s: EstimatorSummary) -> SelectionStats | None:
    # NAIVE selects relevant instruments; every other selector reports its invalid set
    return s.relevant if s.estimator == NAIVE else s.invalid


def _cfg_line(cfg: SimConfig) -> str:
    return (f"model={cfg.model} n={cfg.n} L={cfg.L} s1={cfg.s1} s2={cfg.s2} q={cfg.q} "
            f"beta*={cfg.beta_star} R={cfg.R} seed={cfg.seed}")


def format_report(report: SimulationReport, style: str = "markdown") -> str:
    """Render one row per estimator.  ``csv`` keeps full precision; ``markdown`` rounds to 4 decimals."""
    if style == "json":
        payload = {"config": asdict(report.config), "std_dev_defined": report.std_dev_defined,
                   "estimators": {t: asdict(report.summaries[t]) for t in report.estimators}}
        return json.dumps(payload, indent=2, allow_nan=True) + "\n"
    if style == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for tag in report.estimators:
            s = report.summaries[tag]
            row = [tag, s.bias, s.std_dev, s.mse, s.n_ok, s.n_failed]
            for stats in (s.relevant, s.invalid):
                row += [""] * 5 if stats is None else [stats.mean, stats.median, stats.max, stats.min, stats.freq]
            row += ["" if v is None else v for v in (s.exact_invalid_rate, s.mean_se, s.coverage)]
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()
    if style != "markdown":
        raise ValueError(f"unknown report style {style!r}")
    lines = [f"<!-- {_cfg_line(report.config)} -->"]
    if not report.std_dev_defined:
        lines.append("<!-- single replication: std dev undefined, shown as 0 -->")
    lines.append("| " + " | ".join(TABLE_COLUMNS) + " |")
    lines.append("|" + "|".join(["---"] + ["---:"] * (len(TABLE_COLUMNS) - 1)) + "|")
    for tag in report.estimators:
        s = report.summaries[tag]
        st = _table_stats(s)
        sel = ([_fmt(st.mean, 2), _fmt_count(st.median), _fmt_count(st.max), _fmt_count(st.min),
                _fmt_freq(st.freq)] if st else [""] * 5)
        lines.append("| " + " | ".join([DISPLAY_NAMES[tag], _fmt(s.bias), _fmt(s.std_dev), _fmt(s.mse)] + sel)
                     + " |")
    failed = {t: report.summaries[t].n_failed for t in report.estimators if report.summaries[t].n_failed}
    if failed:
        lines.append("")
        lines.append("failed replications: " + ", ".join(f"{DISPLAY_NAMES[t]} {k}" for t, k in failed.items()))
    return "\n".join(lines) + "\n"


def dump_records(report: SimulationReport) -> str:
    """Per-replication CSV: one row per (replication, estimator)."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RECORD_FIELDS, lineterminator="\n")
    w.writeheader()
    for rec in report.records:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})
    return buf.getvalue()
