"""The three-step robust IV estimator, its standard errors, and comparison estimators."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .data import Annihilator, CenteredDataset, Dataset, residualize
from .elasticnet import (LAMBDA_RATIO as ENET_RATIO, N_LAMBDA as ENET_NLAMBDA, enet_lambda_max, enet_path,
                         select_invalid)
from .errors import (CollinearityError, DegenerateFirstStageError, DimensionError, IdentificationWarning,
                     InputError, SingularDesignError)
from .grouplasso import LAMBDA_RATIO, MAX_ITER, N_LAMBDA, TOL_CD, FirstStageResult, tune_first_stage
from .ic import argmin_first, information_criterion, log_grid, use_ebic

RANK_TOL = 1e-10

OLS = "OLS"
TSLS = "TSLS"
ORACLE_TSLS = "ORACLE_TSLS"
NAIVE = "NAIVE"
SISVIVE = "SISVIVE"
SISVIVE_POST = "SISVIVE_POST"
R2IVE = "R2IVE"
BASELINE_TAGS = (OLS, TSLS, ORACLE_TSLS, NAIVE, SISVIVE, SISVIVE_POST)
ALL_TAGS = BASELINE_TAGS + (R2IVE,)
DISPLAY_NAMES = {OLS: "OLS", TSLS: "2SLS", ORACLE_TSLS: "Oracle 2SLS", NAIVE: "NAIVE",
                 SISVIVE: "sisVIVE", SISVIVE_POST: "sisVIVE.post", R2IVE: "R2IVE"}


@dataclass
class R2iveConfig:
    """Tuning knobs for :func:`r2ive_fit`; ``None`` means the data-driven default."""

    degree: int = 3
    mn_grid: Sequence[int] | None = None
    n_lambda: int = N_LAMBDA
    lambda_ratio: float = LAMBDA_RATIO
    gamma_ebic: float = 0.5
    tau: float | None = None
    tau_mode: str = "appendix"
    lambda2_grid: Sequence[float] | None = None
    enet_n_lambda: int = ENET_NLAMBDA
    enet_lambda_ratio: float = ENET_RATIO
    tol: float = TOL_CD
    max_iter: int = MAX_ITER
    # "structural": y - D b - Z_I a (observed treatment); "fitted": y - d_hat b - Z_I a
    se_residuals: str = "structural"
    # rescale annihilated instruments to unit mean square before the Elastic-Net
    standardize: bool = True

    def __post_init__(self):
        if self.se_residuals not in ("structural", "fitted"):
            raise ValueError(f"se_residuals must be 'structural' or 'fitted', got {self.se_residuals!r}")


@dataclass
class R2iveResult:
    beta_hat: float
    se_homoscedastic: float
    se_heteroscedastic: float
    relevant_set: tuple[int, ...]
    invalid_set: tuple[int, ...]
    d_hat: np.ndarray
    alpha_hat: np.ndarray
    tuning: dict
    diagnostics: dict
    instrument_names: tuple[str, ...] = ()
    first_stage: FirstStageResult | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        names = self.instrument_names
        return {
            "beta_hat": self.beta_hat,
            "se_homoscedastic": self.se_homoscedastic,
            "se_heteroscedastic": self.se_heteroscedastic,
            "relevant_set": [names[j] for j in self.relevant_set],
            "invalid_set": [names[j] for j in self.invalid_set],
            "alpha_hat": {names[j]: float(self.alpha_hat[j]) for j in range(len(names))},
            "tuning": self.tuning,
            "diagnostics": self.diagnostics,
            "d_hat": self.d_hat.tolist(),
        }


@dataclass
class BaselineResult:
    tag: str
    beta_hat: float
    se: float | None = None
    relevant_set: tuple[int, ...] | None = None
    invalid_set: tuple[int, ...] | None = None

    def to_dict(self, names: Sequence[str] | None = None) -> dict:
        out = asdict(self)
        if names is not None:
            for key in ("relevant_set", "invalid_set"):
                if out[key] is not None:
                    out[key] = [names[j] for j in out[key]]
        return out


def annihilator_transform(y: np.ndarray, Z: np.ndarray, d_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project ``y`` and the columns of ``Z`` off ``d_hat`` with a rank-one update."""
    d_hat = np.asarray(d_hat, dtype=float)
    dd = float(d_hat @ d_hat)
    if not dd > 0:
        raise DegenerateFirstStageError("fitted treatment is identically zero; no relevant instrument selected")
    y = np.asarray(y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if y.shape[0] != d_hat.shape[0] or Z.shape[0] != d_hat.shape[0]:
        raise InputError("length mismatch between y, Z and d_hat")
    y_t = y - d_hat * (d_hat @ y) / dd
    Z_t = Z - np.outer(d_hat, d_hat @ Z) / dd
    return y_t, Z_t


@dataclass
class PostFit:
    beta_hat: float
    alpha: np.ndarray
    residuals: np.ndarray
    joint_beta: float


def _as_matrix(Z_invalid, n: int) -> np.ndarray:
    if Z_invalid is None:
        return np.zeros((n, 0))
    Z_invalid = np.asarray(Z_invalid, dtype=float)
    return Z_invalid[:, None] if Z_invalid.ndim == 1 else Z_invalid


def beta_post(y: np.ndarray, d_hat: np.ndarray, Z_invalid: np.ndarray | None,
              names: Sequence[str] | None = None) -> PostFit:
    """Least squares of ``y`` on ``d_hat`` with the selected invalid instruments as covariates.

    ``beta_hat`` is the partialled-out ratio ``d' M y / d' M d`` (``M`` annihilates
    ``Z_invalid``); ``joint_beta`` is the same coefficient from the joint regression.
    """
    y = np.asarray(y, dtype=float)
    d_hat = np.asarray(d_hat, dtype=float)
    n = y.shape[0]
    Zi = _as_matrix(Z_invalid, n)
    k = Zi.shape[1]
    if n <= k + 1:
        raise DimensionError(f"n={n} must exceed |A_I|+1={k + 1}")
    labels = ["d_hat"] + (list(names) if names is not None else [f"invalid[{j}]" for j in range(k)])
    X = np.column_stack([d_hat, Zi])
    Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    bad = diag < RANK_TOL * diag[0] if diag[0] > 0 else np.ones(diag.size, bool)
    if np.any(bad):
        cols = [labels[int(piv[i])] for i in np.flatnonzero(bad)]
        raise CollinearityError(f"post-selection regressors are collinear: {', '.join(cols)}", cols)
    coef = np.empty(k + 1)
    coef[piv] = scipy.linalg.solve_triangular(R, Q.T @ y)
    M = Annihilator(Zi)
    w = M(d_hat)
    beta = float(w @ y / (w @ w))
    alpha = coef[1:]
    resid = y - d_hat * beta - Zi @ alpha
    return PostFit(beta_hat=beta, alpha=alpha, residuals=resid, joint_beta=float(coef[0]))


def variance(beta_hat: float, d_hat: np.ndarray, Z_invalid: np.ndarray | None, residuals: np.ndarray,
             mode: str = "heteroscedastic") -> float:
    """Standard error of ``beta_hat`` from the sample analog of its asymptotic variance.

    With ``w = M d_hat`` and ``Q = w'w / n``: homoscedastic ``sigma^2 = s_nu^2 / Q``
    where ``s_nu^2 = sum(nu^2) / (n - |A_I| - 1)``; heteroscedastic
    ``sigma^2 = (sum w_i^2 nu_i^2 / n) / Q^2``.  Returns ``sigma / sqrt(n)``.
    """
    d_hat = np.asarray(d_hat, dtype=float)
    nu = np.asarray(residuals, dtype=float)
    n = d_hat.shape[0]
    Zi = _as_matrix(Z_invalid, n)
    k = Zi.shape[1]
    if n <= k + 1:
        raise DimensionError(f"n={n} must exceed |A_I|+1={k + 1}")
    w = Annihilator(Zi)(d_hat)
    Q = float(w @ w) / n
    if not Q > 0:
        raise SingularDesignError("d_hat is annihilated by the invalid instruments")
    if mode == "homoscedastic":
        s2 = float(nu @ nu) / (n - k - 1)
        sigma2 = s2 / Q
    elif mode == "heteroscedastic":
        meat = float(np.sum(w ** 2 * nu ** 2)) / n
        sigma2 = meat / Q ** 2
    else:
        raise ValueError(f"unknown variance mode {mode!r}")
    return float(np.sqrt(sigma2 / n))


def _center(ds: Dataset | CenteredDataset) -> CenteredDataset:
    return ds if isinstance(ds, CenteredDataset) else residualize(ds)


def r2ive_fit(ds: Dataset | CenteredDataset, config: R2iveConfig | None = None,
              first_stage: FirstStageResult | None = None) -> R2iveResult:
    """Run the full pipeline: residualize, first stage, invalid selection, post-selection LS.

    A precomputed ``first_stage`` for the same data may be passed to skip step one.
    """
    cfg = config or R2iveConfig()
    cds = _center(ds)
    n, L = cds.n, cds.L
    notes: list[str] = []
    fs = first_stage or tune_first_stage(cds.D, cds, cfg.mn_grid, cfg.degree, cfg.n_lambda, cfg.lambda_ratio,
                                         cfg.gamma_ebic, cfg.tol, cfg.max_iter)
    notes.extend(fs.warnings)
    d_hat = fs.d_hat
    y_t, Z_t = annihilator_transform(cds.Y, cds.Z, d_hat)
    tuning = {"m_n": fs.m_n, "lambda_n0": fs.lambda_pilot, "lambda_n": fs.lambda_adaptive,
              "lambda2": None, "lambda1": None, "lambda1_star": None, "tau": None}
    if L == 1:
        msg = "only one instrument: invalid-instrument selection is vacuous, treating it as valid"
        warnings.warn(msg, IdentificationWarning, stacklevel=2)
        notes.append(msg)
        invalid: tuple[int, ...] = ()
        converged = [fs.pilot.converged, fs.adaptive.converged]
    else:
        sel = select_invalid(y_t, Z_t, n, L, cfg.tau, cfg.tau_mode, cfg.lambda2_grid, cfg.enet_n_lambda,
                             cfg.enet_lambda_ratio, cfg.gamma_ebic, cfg.tol, cfg.max_iter, cfg.standardize)
        invalid = sel.invalid_set
        notes.extend(sel.warnings)
        tuning.update(lambda2=sel.lambda2, lambda1=sel.lambda1, lambda1_star=sel.lambda1_star, tau=sel.tau)
        converged = [fs.pilot.converged, fs.adaptive.converged, sel.pilot.converged, sel.adaptive.converged]
    Zi = cds.Z[:, list(invalid)]
    post = beta_post(cds.Y, d_hat, Zi, [cds.instrument_names[j] for j in invalid])
    resid = post.residuals
    if cfg.se_residuals == "structural":
        resid = cds.Y - cds.D * post.beta_hat - Zi @ post.alpha
    se_ho = variance(post.beta_hat, d_hat, Zi, resid, "homoscedastic")
    se_he = variance(post.beta_hat, d_hat, Zi, resid, "heteroscedastic")
    alpha = np.zeros(L)
    alpha[list(invalid)] = post.alpha
    diagnostics = {"converged": bool(all(converged)), "warnings": notes,
                   "beta_joint_gap": abs(post.beta_hat - post.joint_beta),
                   "residualization": cds.residualization}
    return R2iveResult(beta_hat=post.beta_hat, se_homoscedastic=se_ho, se_heteroscedastic=se_he,
                       relevant_set=fs.relevant_set, invalid_set=tuple(invalid), d_hat=d_hat,
                       alpha_hat=alpha, tuning=tuning, diagnostics=diagnostics,
                       instrument_names=cds.instrument_names, first_stage=fs)


def _projector(Z: np.ndarray):
    """Orthonormal basis of the column space of ``Z`` (rank-revealing)."""
    Q, R, _ = scipy.linalg.qr(Z, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    keep = diag > RANK_TOL * diag[0] if diag.size and diag[0] > 0 else np.zeros(diag.size, bool)
    return Q[:, keep]


def _tsls(y, D, Z, W=None) -> tuple[float, float]:
    """2SLS of ``y`` on ``D`` with instruments ``Z`` and exogenous controls ``W``."""
    if W is not None and W.shape[1]:
        M = Annihilator(W)
        y, D, Z = M(y), M(D), M(Z)
        k = W.shape[1]
    else:
        k = 0
    Q = _projector(Z)
    d_hat = Q @ (Q.T @ D)
    denom = float(d_hat @ D)
    if not abs(denom) > 0:
        raise SingularDesignError("instruments are orthogonal to the treatment")
    beta = float(d_hat @ y) / denom
    resid = y - D * beta
    s2 = float(resid @ resid) / max(len(y) - k - 1, 1)
    return beta, float(np.sqrt(s2 / (d_hat @ d_hat)))


def _sisvive(cds: CenteredDataset, Qz: np.ndarray, gamma_ebic: float, n_lambda: int, ratio: float,
             tol: float, max_iter: int):
    n, L = cds.n, cds.L
    d_t = Qz @ (Qz.T @ cds.D)
    y_p = Qz @ (Qz.T @ cds.Y)
    y_t, Z_t = annihilator_transform(y_p, cds.Z, d_t)
    norms = np.sqrt(np.einsum("ij,ij->j", Z_t, Z_t) / n)
    zero = norms <= 1e-12 * max(norms.max(initial=0.0), 1e-300)
    scale = np.where(zero, 1.0, norms)
    Zs = np.asfortranarray(Z_t / scale)
    w = np.where(zero, np.inf, 1.0)
    fits = enet_path(y_t, Zs, log_grid(enet_lambda_max(y_t, Zs, w), n_lambda, ratio), 0.0, w, n / 2, tol, max_iter)
    # score each path point on the structural equation: the projected problem has only L
    # effective observations and its residual vanishes as the support grows
    A = np.array([f.alpha for f in fits]) / scale
    betas = (d_t @ (y_p[:, None] - cds.Z @ A.T)) / (d_t @ d_t)
    rss = np.sum((cds.Y[:, None] - np.outer(cds.D, betas) - cds.Z @ A.T) ** 2, axis=0)
    high = use_ebic(L, n)
    scores = [information_criterion(float(rss[k]), n, len(f.active_set), L, high, gamma_ebic)
              if f.converged else np.inf for k, f in enumerate(fits)]
    fit = fits[argmin_first(scores)]
    alpha = fit.alpha / scale
    beta = float(d_t @ (y_p - cds.Z @ alpha) / (d_t @ d_t))
    return beta, fit.active_set, d_t


def baselines(ds: Dataset | CenteredDataset, oracle_relevant: Iterable[int] | None = None,
              oracle_valid: Iterable[int] | None = None, first_stage: FirstStageResult | None = None,
              config: R2iveConfig | None = None, tags: Sequence[str] | None = None) -> list[BaselineResult]:
    """Comparison estimators on the residualized data.

    ``ORACLE_TSLS`` uses the relevant-and-valid instruments and controls for the
    invalid ones; it is skipped unless both oracle sets are supplied.  ``SISVIVE``
    picks its penalty by the same BIC/EBIC rule as the main pipeline.
    """
    cfg = config or R2iveConfig()
    cds = _center(ds)
    L = cds.L
    tags = list(BASELINE_TAGS if tags is None else tags)
    out: list[BaselineResult] = []
    Qz = _projector(cds.Z) if any(t in tags for t in (TSLS, SISVIVE, SISVIVE_POST)) else None
    if NAIVE in tags and first_stage is None:
        first_stage = tune_first_stage(cds.D, cds, cfg.mn_grid, cfg.degree, cfg.n_lambda, cfg.lambda_ratio,
                                       cfg.gamma_ebic, cfg.tol, cfg.max_iter)
    sis = None
    for tag in tags:
        if tag == OLS:
            beta = float(cds.D @ cds.Y / (cds.D @ cds.D))
            resid = cds.Y - cds.D * beta
            se = float(np.sqrt(resid @ resid / (cds.n - 1) / (cds.D @ cds.D)))
            out.append(BaselineResult(OLS, beta, se))
        elif tag == TSLS:
            beta, se = _tsls(cds.Y, cds.D, cds.Z)
            out.append(BaselineResult(TSLS, beta, se))
        elif tag == ORACLE_TSLS:
            if oracle_relevant is None or oracle_valid is None:
                continue
            valid = set(oracle_valid)
            strong_valid = sorted(set(oracle_relevant) & valid)
            if not strong_valid:
                raise InputError("oracle 2SLS needs at least one relevant and valid instrument")
            invalid = [j for j in range(L) if j not in valid]
            beta, se = _tsls(cds.Y, cds.D, cds.Z[:, strong_valid], cds.Z[:, invalid])
            out.append(BaselineResult(ORACLE_TSLS, beta, se, tuple(strong_valid), tuple(invalid)))
        elif tag == NAIVE:
            d_hat = first_stage.d_hat
            if not float(d_hat @ d_hat) > 0:
                raise DegenerateFirstStageError("NAIVE: no relevant instrument selected")
            post = beta_post(cds.Y, d_hat, None)
            se = variance(post.beta_hat, d_hat, None, cds.Y - cds.D * post.beta_hat, "heteroscedastic")
            out.append(BaselineResult(NAIVE, post.beta_hat, se, first_stage.relevant_set, ()))
        elif tag in (SISVIVE, SISVIVE_POST):
            if sis is None:
                sis = _sisvive(cds, Qz, cfg.gamma_ebic, cfg.enet_n_lambda, cfg.enet_lambda_ratio, cfg.tol,
                               cfg.max_iter)
            beta, active, d_t = sis
            if tag == SISVIVE:
                out.append(BaselineResult(SISVIVE, beta, None, None, tuple(active)))
            else:
                post = beta_post(cds.Y, d_t, cds.Z[:, list(active)])
                out.append(BaselineResult(SISVIVE_POST, post.beta_hat, None, None, tuple(active)))
        else:
            raise ValueError(f"unknown baseline {tag!r}")
    return out
