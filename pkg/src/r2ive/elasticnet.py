"""Second stage: (adaptive) Elastic-Net selection of invalid instruments.

Fits minimize ``||y - Z b||^2 + lambda2 ||b||^2 + lambda1 * sum_j w_j |b_j|`` and
report ``alpha = (1 + lambda2 / n) * b``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _cd
from .errors import IdentificationWarning, InputError, TuningError
from .ic import argmin_first, information_criterion, log_grid, use_ebic

TOL_CD = 1e-7
MAX_ITER = 10_000
N_LAMBDA = 50
LAMBDA_RATIO = 1e-3
LAMBDA2_FACTORS = (0.0, 0.01, 0.1, 1.0, 10.0)


@dataclass
class EnetFit:
    alpha: np.ndarray
    coef: np.ndarray
    lambda1: float
    lambda2: float
    weights: np.ndarray
    rescaled: bool
    objective: float
    iterations: int
    converged: bool
    active_set: tuple[int, ...]
    objective_trace: np.ndarray = field(repr=False, default=None)


def _check_weights(weights, p: int) -> np.ndarray:
    w = np.ones(p) if weights is None else np.asarray(weights, dtype=float).copy()
    if w.shape != (p,):
        raise InputError(f"expected {p} weights, got shape {w.shape}")
    if np.any(np.isnan(w)) or np.any(w < 0):
        raise InputError("weights must be nonnegative (inf allowed)")
    return w


def enet_lambda_max(y: np.ndarray, Z: np.ndarray, weights=None) -> float:
    """Smallest ``lambda1`` with the all-zero solution optimal."""
    w = _check_weights(weights, Z.shape[1])
    ok = (w > 0) & np.isfinite(w)
    if not np.any(ok):
        return 0.0
    return float(np.max(2.0 * np.abs(Z[:, ok].T @ y) / w[ok]))


def fit_elastic_net(y: np.ndarray, Z: np.ndarray, lambda1: float, lambda2: float = 0.0, weights=None,
                    coef0=None, rescale: bool = True, tol: float = TOL_CD,
                    max_iter: int = MAX_ITER) -> EnetFit:
    """Cyclic coordinate descent with soft-thresholding.

    ``weights`` entries equal to ``inf`` pin the coefficient at zero.  The
    reported ``alpha`` carries the ``(1 + lambda2/n)`` correction when
    ``rescale`` is set; ``coef`` is always the raw minimizer.
    """
    y = np.asarray(y, dtype=float)
    Z = np.asfortranarray(Z, dtype=float)
    n, p = Z.shape
    if y.shape != (n,):
        raise InputError(f"y has shape {y.shape}, expected ({n},)")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(Z))):
        raise InputError("non-finite values in second-stage inputs")
    for name, v in (("lambda1", lambda1), ("lambda2", lambda2)):
        if not (v >= 0 and np.isfinite(v)):
            raise InputError(f"{name} must be finite and nonnegative, got {v}")
    w = _check_weights(weights, p)
    with np.errstate(invalid="ignore"):
        pen = np.where(np.isinf(w), np.inf, lambda1 * w)
    coef = np.zeros(p) if coef0 is None else np.array(coef0, dtype=float)
    r = y - Z @ coef
    colsq = np.einsum("ij,ij->j", Z, Z)
    trace = np.empty(max_iter)
    if lambda1 > 0 and not np.any(coef) and lambda1 >= enet_lambda_max(y, Z, w):
        # zero satisfies the KKT conditions; skipping the sweep keeps rounding from leaking 1e-16 entries
        it, conv = 0, True
    else:
        it, conv = _cd.enet_cd(Z, r, coef, colsq, pen, float(lambda2), max_iter, tol, trace)
    trace = trace[:it].copy()
    factor = 1.0 + lambda2 / n if rescale else 1.0
    return EnetFit(alpha=factor * coef, coef=coef, lambda1=float(lambda1), lambda2=float(lambda2),
                   weights=w, rescaled=rescale, objective=float(trace[-1]) if it else float(r @ r),
                   iterations=int(it), converged=bool(conv),
                   active_set=tuple(int(j) for j in np.flatnonzero(coef)), objective_trace=trace)


def enet_kkt_violation(y: np.ndarray, Z: np.ndarray, fit: EnetFit) -> float:
    """Largest violation of the optimality conditions of the raw minimizer."""
    b = fit.coef
    grad = 2.0 * Z.T @ (y - Z @ b) - 2.0 * fit.lambda2 * b
    pen = fit.lambda1 * fit.weights
    active = b != 0
    worst = 0.0
    if np.any(active & np.isinf(fit.weights)):
        return np.inf
    if np.any(active):
        worst = np.max(np.abs(grad[active] - pen[active] * np.sign(b[active])))
    inactive = ~active & np.isfinite(fit.weights)
    if np.any(inactive):
        worst = max(worst, np.max(np.maximum(np.abs(grad[inactive]) - pen[inactive], 0.0)))
    return float(worst)


def adaptive_enet_weights(pilot: EnetFit | np.ndarray, tau: float) -> np.ndarray:
    """``|alpha_j|^(-tau)`` for nonzero pilot coefficients, ``inf`` otherwise."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    a = np.abs(pilot.alpha if isinstance(pilot, EnetFit) else np.asarray(pilot, dtype=float))
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(a > 0, a ** (-float(tau)), np.inf)


def default_tau(n: int, L: int, mode: str = "appendix") -> int:
    """Adaptive exponent from ``eta = log L / log n`` clipped to ``[0, 0.99]``.

    ``mode="appendix"`` gives ``ceil(2 eta / (1 - eta)) + 1``; ``mode="body"``
    drops the ``+ 1`` but never returns less than 1.
    """
    eta = min(max(math.log(L) / math.log(n), 0.0), 0.99) if n > 1 and L > 0 else 0.0
    base = math.ceil(round(2 * eta / (1 - eta), 12))
    if mode == "appendix":
        return base + 1
    if mode == "body":
        return max(base, 1)
    raise ValueError(f"unknown tau mode {mode!r}")


def enet_path(y, Z, lambdas, lambda2=0.0, weights=None, df_max=None,
              tol: float = TOL_CD, max_iter: int = MAX_ITER, gram=None) -> list[EnetFit]:
    """Warm-started fits along a decreasing ``lambdas`` grid.

    Runs on the Gram matrix (``gram=(Z'Z, Z'y)`` may be passed in when reused)
    and stops once more than ``df_max`` coefficients are active.  The fits carry
    no per-sweep objective trace.
    """
    y = np.asarray(y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    n, p = Z.shape
    w = _check_weights(weights, p)
    G, c = (Z.T @ Z, Z.T @ y) if gram is None else gram
    lambdas = np.asarray(lambdas, dtype=float)
    coefs, its, conv, objs = _cd.enet_path_gram(np.ascontiguousarray(G), c, float(y @ y), w, lambdas,
                                                float(lambda2), max_iter, tol,
                                                np.inf if df_max is None else float(df_max))
    factor = 1.0 + lambda2 / n
    return [EnetFit(alpha=factor * coefs[k], coef=coefs[k], lambda1=float(lambdas[k]), lambda2=float(lambda2),
                    weights=w, rescaled=True, objective=float(objs[k]), iterations=int(its[k]),
                    converged=bool(conv[k]), active_set=tuple(np.flatnonzero(coefs[k]).tolist()))
            for k in range(coefs.shape[0])]


def adaptive_grid(lam_max: float, weights: np.ndarray, lam_max0: float, n_lambda: int = N_LAMBDA,
                  lambda_ratio: float = LAMBDA_RATIO) -> np.ndarray:
    """Decreasing grid for the weighted path, long enough for every finite weight to matter.

    The usual grid stops at ``lambda_ratio * lam_max``.  With steep weights that
    can leave the most heavily weighted candidates penalized out along the whole
    path, so the grid is extended until ``lambda * max(w)`` falls to
    ``lambda_ratio * lam_max0`` (the floor of the unit-weight path), keeping the
    same number of points per decade.
    """
    if lam_max <= 0:
        return np.zeros(1)
    finite = weights[np.isfinite(weights) & (weights > 0)]
    lam_min = lambda_ratio * lam_max
    if finite.size and lam_max0 > 0:
        lam_min = min(lam_min, lambda_ratio * lam_max0 / finite.max())
    decades = math.log10(lam_max / lam_min)
    per_decade = (n_lambda - 1) / math.log10(1 / lambda_ratio)
    points = max(n_lambda, int(math.ceil(decades * per_decade)) + 1)
    return lam_max * np.logspace(0.0, -decades, points)


@dataclass
class InvalidSelection:
    invalid_set: tuple[int, ...]
    alpha: np.ndarray
    pilot: EnetFit | None
    adaptive: EnetFit | None
    lambda2: float
    lambda1: float
    lambda1_star: float
    tau: float
    ic: float
    scale: np.ndarray
    warnings: tuple[str, ...] = ()


def select_invalid(y_tilde: np.ndarray, Z_tilde: np.ndarray, n: int | None = None, L: int | None = None,
                   tau: float | None = None, tau_mode: str = "appendix", lambda2_grid=None,
                   n_lambda: int = N_LAMBDA, lambda_ratio: float = LAMBDA_RATIO,
                   gamma_ebic: float = 0.5, tol: float = TOL_CD, max_iter: int = MAX_ITER,
                   standardize: bool = True) -> InvalidSelection:
    """Adaptive Elastic-Net selection of the invalid instruments.

    Columns are rescaled to unit mean square (``||z_j||^2 = n``); all-zero columns
    are pinned at zero.  For every ``lambda2``: the pilot path picks ``lambda1``
    by BIC/EBIC, the pilot coefficients give the adaptive weights, and the
    adaptive path picks ``lambda1*``.  The ``lambda2`` whose adaptive winner has
    the smallest criterion is kept.  ``alpha`` is returned on the scale of
    ``Z_tilde``.
    """
    y = np.asarray(y_tilde, dtype=float)
    Z = np.asarray(Z_tilde, dtype=float)
    n = Z.shape[0] if n is None else n
    L = Z.shape[1] if L is None else L
    tau = default_tau(n, L, tau_mode) if tau is None else tau
    norms = np.sqrt(np.einsum("ij,ij->j", Z, Z) / n)
    zero = norms <= 1e-12 * max(norms.max(initial=0.0), 1e-300)
    scale = np.where(zero | (not standardize), 1.0, norms)
    Zs = np.asfortranarray(Z / scale)
    base_w = np.where(zero, np.inf, 1.0)
    gram = (Zs.T @ Zs, Zs.T @ y)
    lambda2_grid = [f * n / 100 for f in LAMBDA2_FACTORS] if lambda2_grid is None else list(lambda2_grid)
    high = use_ebic(L, n)
    df_max = n / 2

    def scores(fits):
        A = np.array([f.alpha for f in fits])
        rss = np.sum((y[:, None] - Zs @ A.T) ** 2, axis=0)
        return [information_criterion(float(rss[k]), n, len(f.active_set), L, high, gamma_ebic)
                if f.converged else np.inf for k, f in enumerate(fits)]

    best, failed = None, []
    lam_max0 = enet_lambda_max(y, Zs, base_w)
    for lam2 in lambda2_grid:
        grid = log_grid(lam_max0, n_lambda, lambda_ratio)
        pfits = enet_path(y, Zs, grid, lam2, base_w, df_max, tol, max_iter, gram)
        ps = scores(pfits)
        if not np.isfinite(min(ps)):
            failed.append(f"pilot lambda2={lam2:.4g}")
            continue
        pilot = pfits[argmin_first(ps)]
        w = adaptive_enet_weights(pilot, tau)
        grid = adaptive_grid(enet_lambda_max(y, Zs, w), w, lam_max0, n_lambda, lambda_ratio)
        afits = enet_path(y, Zs, grid, lam2, w, df_max, tol, max_iter, gram)
        as_ = scores(afits)
        if not np.isfinite(min(as_)):
            failed.append(f"adaptive lambda2={lam2:.4g}")
            continue
        k = argmin_first(as_)
        if best is None or as_[k] < best[0]:
            best = (as_[k], lam2, pilot, afits[k])
    if best is None:
        raise TuningError("invalid-instrument selection failed at every grid point: " + "; ".join(failed))
    ic, lam2, pilot, ada = best
    invalid = ada.active_set
    notes = []
    if len(invalid) >= L / 2:
        msg = f"{len(invalid)} of {L} instruments selected as invalid; identification needs fewer than half"
        notes.append(msg)
        warnings.warn(msg, IdentificationWarning, stacklevel=2)
    return InvalidSelection(invalid_set=tuple(invalid), alpha=ada.alpha / scale, pilot=pilot, adaptive=ada,
                            lambda2=lam2, lambda1=pilot.lambda1, lambda1_star=ada.lambda1, tau=tau,
                            ic=ic, scale=scale, warnings=tuple(notes))
