"""First stage: group Lasso, adaptive group Lasso and the fitted optimal instrument.

The objective is the unscaled ``||d - U g||^2 + lam * sum_j w_j ||g_j||_2``, so
penalty levels grow with ``n``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _cd
from .data import CenteredDataset
from .errors import InputError, TuningError
from .ic import argmin_first, information_criterion, log_grid, use_ebic
from .splines import SplineDesign, SplineSpec, assemble_design, default_mn_grid, feasible_mn

log = logging.getLogger(__name__)

TOL_CD = 1e-7
MAX_ITER = 10_000
N_LAMBDA = 50
LAMBDA_RATIO = 1e-3


class BlockDesign:
    """Design matrix with contiguous column groups and cached per-block eigenfactors."""

    def __init__(self, U: np.ndarray, group_index: Sequence[slice], orthonormal: bool = False):
        self.U = np.asfortranarray(U, dtype=float)
        self._gram = None
        self.group_index = tuple(group_index)
        self.starts = np.array([g.start for g in self.group_index] + [self.group_index[-1].stop], dtype=np.int64)
        sizes = np.diff(self.starts)
        self.voff = np.concatenate([[0], np.cumsum(sizes ** 2)]).astype(np.int64)
        self.evals = np.empty(self.U.shape[1])
        self.evecs = np.empty(int(self.voff[-1]))
        if orthonormal:
            self.evals[:] = 1.0
            for j, m in enumerate(sizes):
                self.evecs[self.voff[j]:self.voff[j + 1]] = np.eye(m).ravel()
            return
        for j, g in enumerate(self.group_index):
            Uj = self.U[:, g]
            w, V = np.linalg.eigh(Uj.T @ Uj)
            w = np.maximum(w, 0.0)
            self.evals[g] = w
            self.evecs[self.voff[j]:self.voff[j + 1]] = np.ascontiguousarray(V).ravel()

    def gram(self) -> np.ndarray:
        if self._gram is None:
            self._gram = np.ascontiguousarray(self.U.T @ self.U)
        return self._gram

    @classmethod
    def of(cls, design) -> "BlockDesign":
        if isinstance(design, BlockDesign):
            return design
        return cls(design.U, design.group_index)

    @property
    def n_groups(self) -> int:
        return len(self.group_index)

    @property
    def group_sizes(self) -> np.ndarray:
        return np.diff(self.starts)


@dataclass
class GroupPenaltyFit:
    gamma: np.ndarray
    lam: float
    weights: np.ndarray
    objective: float
    iterations: int
    converged: bool
    active_groups: tuple[int, ...]
    group_index: tuple[slice, ...]
    objective_trace: np.ndarray = field(repr=False, default=None)

    def group_norms(self) -> np.ndarray:
        starts = [g.start for g in self.group_index]
        return np.sqrt(np.add.reduceat(self.gamma ** 2, starts)) if starts else np.zeros(0)


def _check_weights(weights, G: int) -> np.ndarray:
    w = np.ones(G) if weights is None else np.asarray(weights, dtype=float).copy()
    if w.shape != (G,):
        raise InputError(f"expected {G} group weights, got shape {w.shape}")
    if np.any(np.isnan(w)) or np.any(w < 0):
        raise InputError("group weights must be nonnegative (inf allowed)")
    return w


def group_lambda_max(d: np.ndarray, design, weights=None) -> float:
    """Smallest penalty at which the all-zero solution satisfies the KKT conditions."""
    bd = BlockDesign.of(design)
    w = _check_weights(weights, bd.n_groups)
    vals = [2.0 * np.linalg.norm(bd.U[:, g].T @ d) / w[j]
            for j, g in enumerate(bd.group_index) if 0 < w[j] < np.inf]
    return float(max(vals)) if vals else 0.0


def fit_group_lasso(d: np.ndarray, design, lam: float, weights=None, gamma0=None,
                    tol: float = TOL_CD, max_iter: int = MAX_ITER) -> GroupPenaltyFit:
    """Minimize ``||d - U g||^2 + lam * sum_j w_j ||g_j||_2`` by block coordinate descent.

    Each block subproblem is solved exactly: in closed form when the block is
    orthonormal, otherwise by a scalar Newton iteration on the block norm.
    Non-convergence is reported through ``converged=False`` rather than raised.
    """
    bd = BlockDesign.of(design)
    d = np.asarray(d, dtype=float)
    if d.shape != (bd.U.shape[0],):
        raise InputError(f"d has shape {d.shape}, expected ({bd.U.shape[0]},)")
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(bd.U))):
        raise InputError("non-finite values in first-stage inputs")
    if not (lam >= 0 and np.isfinite(lam)):
        raise InputError(f"lambda must be finite and nonnegative, got {lam}")
    w = _check_weights(weights, bd.n_groups)
    with np.errstate(invalid="ignore"):
        pen = np.where(np.isinf(w), np.inf, lam * w)
    coef = np.zeros(bd.U.shape[1]) if gamma0 is None else np.array(gamma0, dtype=float)
    r = d - bd.U @ coef
    trace = np.empty(max_iter)
    it, conv = _cd.group_cd(bd.U, r, coef, bd.starts, bd.evals, bd.evecs, bd.voff,
                            pen, max_iter, tol, trace)
    trace = trace[:it].copy()
    nz = np.add.reduceat((coef != 0.0).astype(np.int64), bd.starts[:-1]) if coef.size else np.zeros(0)
    active = tuple(int(j) for j in np.flatnonzero(nz))
    return GroupPenaltyFit(gamma=coef, lam=float(lam), weights=w,
                           objective=float(trace[-1]) if it else float(r @ r),
                           iterations=int(it), converged=bool(conv), active_groups=active,
                           group_index=bd.group_index, objective_trace=trace)


def group_kkt_violation(d: np.ndarray, design, fit: GroupPenaltyFit) -> float:
    """Largest violation of the group-Lasso optimality conditions."""
    bd = BlockDesign.of(design)
    r = d - bd.U @ fit.gamma
    worst = 0.0
    for j, g in enumerate(bd.group_index):
        w = fit.weights[j]
        grad = 2.0 * bd.U[:, g].T @ r
        gj = fit.gamma[g]
        nrm = np.linalg.norm(gj)
        if np.isinf(w):
            v = 0.0 if nrm == 0 else np.inf
        elif nrm > 0:
            v = np.linalg.norm(grad - fit.lam * w * gj / nrm)
        else:
            v = max(0.0, np.linalg.norm(grad) - fit.lam * w)
        worst = max(worst, v)
    return worst


def adaptive_group_weights(pilot: GroupPenaltyFit) -> np.ndarray:
    """``1 / ||g_j||`` for nonzero pilot groups, ``inf`` for zero ones."""
    norms = pilot.group_norms()
    with np.errstate(divide="ignore"):
        return np.where(norms > 0, 1.0 / norms, np.inf)


def group_lasso_path(d: np.ndarray, design, lambdas, weights=None, df_sizes=None, df_max=None,
                     tol: float = TOL_CD, max_iter: int = MAX_ITER) -> list[GroupPenaltyFit]:
    """Warm-started fits over a decreasing ``lambdas`` grid.

    The path stops early once the degrees of freedom (sum of ``df_sizes`` over
    active groups) exceed ``df_max``.  The fits carry no per-sweep objective trace.
    """
    bd = BlockDesign.of(design)
    d = np.asarray(d, dtype=float)
    w = _check_weights(weights, bd.n_groups)
    sizes = bd.group_sizes if df_sizes is None else np.asarray(df_sizes)
    lambdas = np.asarray(lambdas, dtype=float)
    cap = np.inf if df_max is None else float(df_max)
    n, P = bd.U.shape
    if P < n:
        coefs, its, conv, objs = _cd.group_path_gram(bd.gram(), float(d @ d), bd.U.T @ d, bd.starts, bd.evals,
                                                     bd.evecs, bd.voff, w, lambdas, max_iter, tol,
                                                     sizes.astype(float), cap)
    else:
        coefs, its, conv, objs = _cd.group_path(bd.U, d, bd.starts, bd.evals, bd.evecs, bd.voff, w, lambdas,
                                                max_iter, tol, sizes.astype(float), cap)
    nz = np.add.reduceat(coefs != 0.0, bd.starts[:-1], axis=1)
    return [GroupPenaltyFit(gamma=coefs[k], lam=float(lambdas[k]), weights=w, objective=float(objs[k]),
                            iterations=int(its[k]), converged=bool(conv[k]),
                            active_groups=tuple(np.flatnonzero(nz[k]).tolist()), group_index=bd.group_index)
            for k in range(coefs.shape[0])]


@dataclass
class OrthoBlocks:
    """Per-block orthonormal bases ``U_j = Q_j S_j V_j'`` and the map back to spline coordinates."""

    design: BlockDesign
    back: list[np.ndarray]
    source: SplineDesign

    def to_spline_coef(self, theta: np.ndarray) -> np.ndarray:
        out = np.zeros(self.source.U.shape[1])
        for j, (g_src, g_o) in enumerate(zip(self.source.group_index, self.design.group_index)):
            out[g_src] = self.back[j] @ theta[g_o]
        return out


def orthonormalize(design: SplineDesign, rank_tol: float = 1e-10) -> OrthoBlocks:
    """Replace each block by an orthonormal basis of its column space.

    Centered B-spline blocks sum to zero across columns, so a block of ``m_n``
    columns has rank ``m_n - 1``; the orthonormal block keeps only the rank.
    """
    sizes = {g.stop - g.start for g in design.group_index}
    if len(sizes) == 1:
        m = sizes.pop()
        stack = design.U.reshape(design.U.shape[0], -1, m).transpose(1, 0, 2)
        Qs, Ss, Vts = np.linalg.svd(stack, full_matrices=False)
    else:
        Qs = Ss = Vts = None
    cols, back, index, start = [], [], [], 0
    for j, g in enumerate(design.group_index):
        if Qs is None:
            Q, s, Vt = np.linalg.svd(design.U[:, g], full_matrices=False)
        else:
            Q, s, Vt = Qs[j], Ss[j], Vts[j]
        keep = s > rank_tol * s[0] if s.size and s[0] > 0 else np.zeros(s.size, bool)
        if not np.any(keep):
            keep = np.zeros(s.size, bool)
            keep[0] = True
            Q = np.zeros_like(Q)
            s = np.ones_like(s)
        cols.append(Q[:, keep])
        back.append(Vt[keep].T / s[keep])
        r = int(keep.sum())
        index.append(slice(start, start + r))
        start += r
    bd = BlockDesign(np.hstack(cols), index, orthonormal=True)
    return OrthoBlocks(design=bd, back=back, source=design)


@dataclass
class FirstStageResult:
    relevant_set: tuple[int, ...]
    d_hat: np.ndarray
    m_n: int
    lambda_pilot: float
    lambda_adaptive: float
    pilot: GroupPenaltyFit
    adaptive: GroupPenaltyFit
    design: SplineDesign
    gamma: np.ndarray
    ic: float
    ic_by_mn: dict = field(default_factory=dict)
    warnings: tuple[str, ...] = ()


def _fit_one_mn(d, ds, m_n, degree, n_lambda, ratio, gamma_ebic, tol, max_iter):
    n, L = ds.n, ds.L
    design = assemble_design(ds, SplineSpec(m_n, degree))
    ob = orthonormalize(design)
    bd = ob.design
    df_sizes = np.array([s.m_n for s in design.specs])
    high = use_ebic(m_n * L, n)
    df_max = n / 2

    def choose(fits):
        C = np.array([f.gamma for f in fits])
        rss = np.sum((d[:, None] - bd.U @ C.T) ** 2, axis=0)
        return [information_criterion(float(rss[k]), n, float(df_sizes[list(f.active_groups)].sum()), L, high,
                                      gamma_ebic) if f.converged else np.inf for k, f in enumerate(fits)]

    lam_max = group_lambda_max(d, bd)
    pilot_fits = group_lasso_path(d, bd, log_grid(lam_max, n_lambda, ratio), None, df_sizes, df_max, tol, max_iter)
    scores = choose(pilot_fits)
    if not np.isfinite(min(scores)):
        return None, [f"m_n={m_n} pilot lambda={f.lam:.4g}" for f in pilot_fits]
    pilot = pilot_fits[argmin_first(scores)]

    w = adaptive_group_weights(pilot)
    lam_max_a = group_lambda_max(d, bd, w)
    ada_fits = group_lasso_path(d, bd, log_grid(lam_max_a, n_lambda, ratio), w, df_sizes, df_max, tol, max_iter)
    scores = choose(ada_fits)
    if not np.isfinite(min(scores)):
        return None, [f"m_n={m_n} adaptive lambda={f.lam:.4g}" for f in ada_fits]
    k = argmin_first(scores)
    ada = ada_fits[k]
    return dict(design=design, ortho=ob, pilot=pilot, adaptive=ada, ic=scores[k]), []


def tune_first_stage(d: np.ndarray, ds: CenteredDataset, mn_grid: Sequence[int] | None = None,
                     degree: int = 3, n_lambda: int = N_LAMBDA, lambda_ratio: float = LAMBDA_RATIO,
                     gamma_ebic: float = 0.5, tol: float = TOL_CD, max_iter: int = MAX_ITER) -> FirstStageResult:
    """Select ``m_n``, the pilot and adaptive penalties by BIC/EBIC and return the fitted instrument.

    For every ``m_n``: the pilot group-Lasso path (unit weights) picks its penalty by
    the information criterion, its group norms give the adaptive weights, and the
    adaptive path picks its penalty the same way.  The ``m_n`` with the smallest
    criterion wins; ties go to the smaller ``m_n``.  Blocks are orthonormalized
    before fitting.
    """
    d = np.asarray(d, dtype=float)
    grid = default_mn_grid(ds.n, degree) if mn_grid is None else sorted(set(mn_grid))
    grid = [m for m in grid if feasible_mn(m, degree)]
    if not grid:
        raise TuningError(f"no feasible m_n in grid for degree {degree}")
    best, failed, ic_by_mn = None, [], {}
    for m_n in grid:
        res, fails = _fit_one_mn(d, ds, m_n, degree, n_lambda, lambda_ratio, gamma_ebic, tol, max_iter)
        failed.extend(fails)
        if res is None:
            continue
        ic_by_mn[m_n] = res["ic"]
        if best is None or res["ic"] < best[1]["ic"]:
            best = (m_n, res)
    if best is None:
        raise TuningError("first-stage tuning failed at every grid point: " + "; ".join(failed))
    m_n, res = best
    ob, ada = res["ortho"], res["adaptive"]
    d_hat = ob.design.U @ ada.gamma
    gamma = ob.to_spline_coef(ada.gamma)
    log.debug("first stage: m_n=%d, |A_R|=%d", m_n, len(ada.active_groups))
    return FirstStageResult(relevant_set=tuple(ada.active_groups), d_hat=d_hat, m_n=m_n,
                            lambda_pilot=res["pilot"].lam, lambda_adaptive=ada.lam,
                            pilot=res["pilot"], adaptive=ada, design=res["design"], gamma=gamma,
                            ic=res["ic"], ic_by_mn=ic_by_mn, warnings=res["design"].warnings)
