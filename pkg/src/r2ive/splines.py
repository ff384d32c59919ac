"""Centered B-spline expansions of the instruments.

The basis dimension ``m_n`` counts ``degree + 1`` boundary functions plus one
per interior knot, so a cubic basis with ``m_n = 4`` has no interior knots.
``m_n = 1`` is the degenerate linear basis (the centered raw instrument).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import CenteredDataset
from .errors import DegenerateInstrumentError, DegenerateInstrumentWarning

QUANTILE_KNOTS = "quantile"


@dataclass(frozen=True)
class SplineSpec:
    m_n: int
    degree: int = 3
    knot_rule: str = QUANTILE_KNOTS

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError(f"spline degree must be >= 1, got {self.degree}")
        if self.m_n < 1:
            raise ValueError(f"m_n must be >= 1, got {self.m_n}")
        if self.m_n > 1 and self.m_n < self.degree + 1:
            raise ValueError(f"m_n={self.m_n} is not a valid spline space for degree {self.degree}")
        if self.knot_rule != QUANTILE_KNOTS:
            raise ValueError(f"unknown knot rule {self.knot_rule!r}")

    @property
    def n_interior(self) -> int:
        return 0 if self.m_n == 1 else self.m_n - self.degree - 1

    @property
    def linear(self) -> bool:
        return self.m_n == 1


def feasible_mn(m_n: int, degree: int) -> bool:
    return m_n == 1 or m_n >= degree + 1


def default_mn_grid(n: int, degree: int = 3) -> list[int]:
    """``{1, 2, 4, 5, 6, ceil(n^(1/5)) + 4}`` restricted to feasible values."""
    cands = {1, 2, 4, 5, 6, math.ceil(n ** 0.2) + 4}
    return sorted(m for m in cands if feasible_mn(m, degree))


def build_knots(z: np.ndarray, spec: SplineSpec) -> np.ndarray:
    """Clamped knot vector with interior knots at equally spaced empirical quantiles.

    The k-th of K interior knots is the order statistic ``z_(ceil(n k/(K+1)))``
    (inverted-CDF quantile, so every knot is a sample value).  Boundary knots
    ``min(z)`` and ``max(z)`` are repeated ``degree + 1`` times.
    """
    z = np.asarray(z, dtype=float)
    if spec.linear:
        return np.array([z.min(), z.max()])
    n = z.shape[0]
    if n < spec.m_n:
        raise DegenerateInstrumentError(f"n={n} is smaller than m_n={spec.m_n}")
    if np.unique(z).size < spec.m_n:
        raise DegenerateInstrumentError(f"fewer than m_n={spec.m_n} distinct values")
    lo, hi = z.min(), z.max()
    K = spec.n_interior
    probs = np.arange(1, K + 1) / (K + 1)
    interior = np.quantile(z, probs, method="inverted_cdf") if K else np.empty(0)
    if K and (np.any(np.diff(interior) <= 0) or interior[0] <= lo or interior[-1] >= hi):
        raise DegenerateInstrumentError("interior quantile knots are not distinct")
    p = spec.degree
    return np.concatenate([np.full(p + 1, lo), interior, np.full(p + 1, hi)])


def bspline_basis(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    """Uncentered B-spline basis by the Cox-de Boor recursion.

    ``x`` is clamped to ``[knots[0], knots[-1]]``.  The last non-empty knot span
    is closed on the right so the basis sums to one at the upper boundary.
    Batched use: ``x`` of shape (n, L) with ``knots`` of shape (L, T) returns
    an (n, L, T - degree - 1) array.
    """
    t = np.asarray(knots, dtype=float)
    single = t.ndim == 1
    x = np.asarray(x, dtype=float)
    if single:
        x, t = x[:, None], t[None, :]
    x = np.clip(x, t[:, 0], t[:, -1])
    spans = t.shape[1] - 1
    B = np.zeros(x.shape + (spans,))
    for i in range(spans):
        B[..., i] = (t[:, i] <= x) & (x < t[:, i + 1])
    # last non-empty span per row of knots
    nonempty = t[:, :-1] < t[:, 1:]
    last = spans - 1 - np.argmax(nonempty[:, ::-1], axis=1)
    at_end = x == t[:, -1]
    rows, cols = np.nonzero(at_end)
    B[rows, cols, :] = 0.0
    B[rows, cols, last[cols]] = 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(1, degree + 1):
            nxt = np.zeros(x.shape + (spans - k,))
            for i in range(spans - k):
                left_den = t[:, i + k] - t[:, i]
                right_den = t[:, i + k + 1] - t[:, i + 1]
                left = np.where(left_den > 0, (x - t[:, i]) / left_den, 0.0)
                right = np.where(right_den > 0, (t[:, i + k + 1] - x) / right_den, 0.0)
                nxt[..., i] = left * B[..., i] + right * B[..., i + 1]
            B = nxt
    return B[:, 0, :] if single else B


def evaluate_basis(z: np.ndarray, knots: np.ndarray, spec: SplineSpec, center: bool = True) -> np.ndarray:
    """Basis matrix (n x m_n); columns are mean-centered over ``z`` unless ``center`` is False."""
    z = np.asarray(z, dtype=float)
    if spec.linear:
        B = z[:, None].copy()
    else:
        B = bspline_basis(z, knots, spec.degree)
    if center:
        B -= B.mean(axis=0)
    return B


@dataclass(frozen=True)
class SplineDesign:
    """First-stage design ``U = (U_1, ..., U_L)`` with contiguous instrument blocks."""

    U: np.ndarray
    group_index: tuple[slice, ...]
    knots: tuple[np.ndarray, ...]
    specs: tuple[SplineSpec, ...]
    degenerate: tuple[int, ...] = ()
    warnings: tuple[str, ...] = field(default_factory=tuple)

    @property
    def n_groups(self) -> int:
        return len(self.group_index)

    @property
    def group_sizes(self) -> np.ndarray:
        return np.array([s.stop - s.start for s in self.group_index])

    def block(self, j: int) -> np.ndarray:
        return self.U[:, self.group_index[j]]


def assemble_design(ds: CenteredDataset | np.ndarray, spec: SplineSpec | list[SplineSpec]) -> SplineDesign:
    """Expand every instrument and stack the centered blocks in instrument order.

    An instrument failing the knot preconditions is degraded to ``m_n = 1`` and
    reported in ``degenerate`` with a :class:`DegenerateInstrumentWarning`.
    """
    Z = ds.Z if isinstance(ds, CenteredDataset) else np.asarray(ds, dtype=float)
    names = ds.instrument_names if isinstance(ds, CenteredDataset) else tuple(f"z{j + 1}" for j in range(Z.shape[1]))
    L = Z.shape[1]
    specs = list(spec) if isinstance(spec, (list, tuple)) else [spec] * L
    if len(specs) != L:
        raise ValueError(f"got {len(specs)} spline specs for {L} instruments")
    blocks, knots, used, degenerate, notes = [None] * L, [None] * L, list(specs), [], []
    pending = list(range(L))
    if len(set(specs)) == 1 and not specs[0].linear:
        pending = _assemble_batch(Z, specs[0], blocks, knots)
    for j in pending:
        s = specs[j]
        z = Z[:, j]
        try:
            t = build_knots(z, s)
        except DegenerateInstrumentError as exc:
            s = SplineSpec(1, s.degree)
            t = build_knots(z, s)
            degenerate.append(j)
            msg = f"instrument {names[j]!r} degraded to linear basis: {exc}"
            notes.append(msg)
            warnings.warn(msg, DegenerateInstrumentWarning, stacklevel=2)
        blocks[j] = evaluate_basis(z, t, s)
        knots[j] = t
        used[j] = s
    sizes = [b.shape[1] for b in blocks]
    starts = np.concatenate([[0], np.cumsum(sizes)])
    U = np.hstack(blocks)
    U.setflags(write=False)
    index = tuple(slice(int(starts[j]), int(starts[j + 1])) for j in range(L))
    return SplineDesign(U=U, group_index=index, knots=tuple(knots), specs=tuple(used),
                        degenerate=tuple(sorted(degenerate)), warnings=tuple(notes))


def _assemble_batch(Z: np.ndarray, spec: SplineSpec, blocks: list, knots: list) -> list[int]:
    """Fill ``blocks``/``knots`` for every well-behaved instrument at once; return the rest."""
    n, L = Z.shape
    K, p = spec.n_interior, spec.degree
    lo, hi = Z.min(axis=0), Z.max(axis=0)
    n_distinct = np.array([np.unique(Z[:, j]).size for j in range(L)])
    if K:
        interior = np.quantile(Z, np.arange(1, K + 1) / (K + 1), axis=0, method="inverted_cdf").T
        ok = (np.all(np.diff(interior, axis=1) > 0, axis=1) & (interior[:, 0] > lo) & (interior[:, -1] < hi))
    else:
        interior = np.empty((L, 0))
        ok = np.ones(L, dtype=bool)
    ok &= (n_distinct >= spec.m_n) & (n >= spec.m_n)
    good = np.flatnonzero(ok)
    if good.size:
        T = np.hstack([np.repeat(lo[good, None], p + 1, axis=1), interior[good],
                       np.repeat(hi[good, None], p + 1, axis=1)])
        B = bspline_basis(Z[:, good], T, p)
        B -= B.mean(axis=0)
        for k, j in enumerate(good):
            blocks[j] = B[:, k, :]
            knots[j] = T[k]
    return [int(j) for j in np.flatnonzero(~ok)]
