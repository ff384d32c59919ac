"""Dataset containers, CSV ingestion and residualization on exogenous covariates."""

from __future__ import annotations

import csv
import fnmatch
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .errors import DimensionError, InputError, ParseError, SchemaError, SingularDesignError

RANK_TOL = 1e-10


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if arr.ndim == 1 and ndim == 2:
        arr = arr[:, None]
    if arr.ndim != ndim:
        raise InputError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """Outcome, treatment, candidate instruments and optional exogenous covariates.

    Arrays are copied and made read-only at construction.
    """

    Y: np.ndarray
    D: np.ndarray
    Z: np.ndarray
    X: np.ndarray | None = None
    instrument_names: tuple[str, ...] = ()

    def __post_init__(self):
        Y = _frozen(self.Y, 1, "Y")
        D = _frozen(self.D, 1, "D")
        Z = _frozen(self.Z, 2, "Z")
        X = None if self.X is None else _frozen(self.X, 2, "X")
        n = Y.shape[0]
        if n < 2:
            raise InputError(f"need at least 2 observations, got {n}")
        if Z.shape[1] < 1:
            raise InputError("need at least one instrument")
        for name, arr in (("D", D), ("Z", Z), ("X", X)):
            if arr is not None and arr.shape[0] != n:
                raise InputError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if X is not None and X.shape[1] == 0:
            X = None
        names = tuple(self.instrument_names) or tuple(f"z{j + 1}" for j in range(Z.shape[1]))
        if len(names) != Z.shape[1]:
            raise InputError(f"got {len(names)} instrument names for {Z.shape[1]} instruments")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "instrument_names", names)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def L(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True)
class CenteredDataset:
    """Residualized outcome, treatment and instruments.

    ``residualization`` is ``"intercept"`` when only the constant was partialled
    out and ``"exogenous"`` when user covariates were included as well.
    """

    Y: np.ndarray
    D: np.ndarray
    Z: np.ndarray
    instrument_names: tuple[str, ...]
    residualization: str
    n_partialled: int = 1

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def L(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for :func:`load_csv`.

    ``instruments`` and ``exogenous`` entries may be exact names or shell-style
    globs such as ``"z*"``; glob matches keep file column order.
    """

    outcome: str
    treatment: str
    instruments: Sequence[str]
    exogenous: Sequence[str] = field(default_factory=tuple)


def _expand(patterns: Sequence[str], header: list[str], role: str) -> list[str]:
    out: list[str] = []
    for pat in patterns:
        if any(ch in pat for ch in "*?["):
            hits = [h for h in header if fnmatch.fnmatchcase(h, pat)]
            if not hits:
                raise SchemaError(f"{role} pattern {pat!r} matches no column")
        else:
            if pat not in header:
                raise SchemaError(f"missing column {pat!r} ({role})")
            hits = [pat]
        out.extend(h for h in hits if h not in out)
    return out


def load_csv(path: str | Path, schema: CsvSchema | Mapping) -> Dataset:
    """Read a headed CSV file into a :class:`Dataset`.

    Rows are kept in file order.  Row numbers in error messages count data rows
    from 1 (the header is row 0).
    """
    if isinstance(schema, Mapping):
        schema = CsvSchema(**schema)
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path} is empty") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not rows:
        raise InputError(f"{path} has a header but no data rows")

    outcome = _expand([schema.outcome], header, "outcome")[0]
    treatment = _expand([schema.treatment], header, "treatment")[0]
    instruments = _expand(list(schema.instruments), header, "instrument")
    exogenous = _expand(list(schema.exogenous), header, "exogenous")
    if not instruments:
        raise SchemaError("schema names no instrument column")

    wanted = [outcome, treatment, *instruments, *exogenous]
    idx = {name: header.index(name) for name in wanted}
    values = {name: np.empty(len(rows)) for name in wanted}
    for i, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise InputError(f"row {i} has {len(row)} fields, header has {len(header)}")
        for name in wanted:
            cell = row[idx[name]].strip()
            try:
                values[name][i - 1] = float(cell)
            except ValueError:
                raise ParseError(i, name, cell) from None

    X = np.column_stack([values[c] for c in exogenous]) if exogenous else None
    return Dataset(
        Y=values[outcome],
        D=values[treatment],
        Z=np.column_stack([values[c] for c in instruments]),
        X=X,
        instrument_names=tuple(instruments),
    )


def write_csv(ds: Dataset, path: str | Path, outcome: str = "y", treatment: str = "d",
              exogenous_prefix: str = "x") -> CsvSchema:
    """Write ``ds`` with full round-trip precision and return the matching schema."""
    exo = [] if ds.X is None else [f"{exogenous_prefix}{k + 1}" for k in range(ds.X.shape[1])]
    header = [outcome, treatment, *ds.instrument_names, *exo]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(ds.n):
            row = [ds.Y[i], ds.D[i], *ds.Z[i]]
            if ds.X is not None:
                row.extend(ds.X[i])
            w.writerow([repr(float(v)) for v in row])
    return CsvSchema(outcome, treatment, tuple(ds.instrument_names), tuple(exo))


class Annihilator:
    """Apply ``M_A = I - A (A'A)^{-1} A'`` through a thin QR factorization of ``A``."""

    def __init__(self, A: np.ndarray, names: Sequence[str] | None = None):
        A = np.asarray(A, dtype=float)
        if A.ndim == 1:
            A = A[:, None]
        self.shape = A.shape
        if A.shape[1] == 0:
            self.Q = np.zeros((A.shape[0], 0))
            return
        if A.shape[1] >= A.shape[0]:
            raise DimensionError(f"{A.shape[1]} columns leave no residual degrees of freedom with n={A.shape[0]}")
        Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        bad = diag < RANK_TOL * diag[0] if diag[0] > 0 else np.ones_like(diag, dtype=bool)
        if np.any(bad):
            cols = sorted(int(piv[k]) for k in np.flatnonzero(bad))
            labels = [names[c] for c in cols] if names is not None else [str(c) for c in cols]
            raise SingularDesignError(f"design is rank deficient; dependent columns: {', '.join(labels)}")
        self.Q = Q

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.Q.shape[1] == 0:
            return v.copy()
        return v - self.Q @ (self.Q.T @ v)


def residualize(ds: Dataset) -> CenteredDataset:
    """Partial the intercept (and ``X`` when present) out of ``Y``, ``D`` and ``Z``."""
    n = ds.n
    if ds.X is None:
        def center(a):
            return a - a.mean(axis=0)
        Y, D, Z = center(ds.Y), center(ds.D), center(ds.Z)
        kind, k = "intercept", 1
    else:
        W = np.column_stack([np.ones(n), ds.X])
        if W.shape[1] >= n:
            raise DimensionError(f"p+1={W.shape[1]} exogenous columns need more than n={n} rows")
        names = ["intercept"] + [f"x{j + 1}" for j in range(ds.X.shape[1])]
        M = Annihilator(W, names)
        Y, D, Z = M(ds.Y), M(ds.D), M(ds.Z)
        kind, k = "exogenous", W.shape[1]
    for a in (Y, D, Z):
        a.setflags(write=False)
    return CenteredDataset(Y=Y, D=D, Z=Z, instrument_names=ds.instrument_names,
                           residualization=kind, n_partialled=k)
