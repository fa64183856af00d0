"""Tabular ingestion: response, fixed design, candidate predictors, clusters.

Column indices are 0-based here; the CLI converts from 1-based.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DataError

__all__ = [
    "Family",
    "Dataset",
    "load_dataset",
    "standardize",
    "write_dataset",
    "encode_groups",
]


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    POISSON = "poisson"
    BINOMIAL = "binomial"

    @classmethod
    def parse(cls, value) -> "Family":
        if isinstance(value, Family):
            return value
        key = str(value).strip().lower()
        aliases = {"n": "gaussian", "normal": "gaussian", "p": "poisson",
                   "b": "binomial", "bernoulli": "binomial", "logistic": "binomial"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise DataError(f"unknown family {value!r}") from None


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Response, fixed design ``X``, candidate predictors ``Z`` and clustering.

    ``group`` holds dense integer codes (0..m-1, first-appearance order);
    the original labels are kept in ``group_labels``.
    """

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    group: np.ndarray | None = None
    slope_covariate: np.ndarray | None = None
    family: Family = Family.GAUSSIAN
    z_names: tuple[str, ...] = ()
    x_names: tuple[str, ...] = ()
    group_labels: tuple[str, ...] = ()
    standardized: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        y = _frozen(self.y).reshape(-1)
        n = y.shape[0]
        X = _frozen(self.X)
        if X.ndim == 1:
            X = _frozen(X.reshape(-1, 1))
        Z = _frozen(self.Z)
        if Z.ndim == 1:
            Z = _frozen(Z.reshape(n, -1))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "family", Family.parse(self.family))
        if X.shape[0] != n or Z.shape[0] != n:
            raise DataError(f"row mismatch: y has {n}, X has {X.shape[0]}, Z has {Z.shape[0]}")
        if self.group is not None:
            g = np.asarray(self.group)
            if g.shape != (n,):
                raise DataError(f"group has shape {g.shape}, expected ({n},)")
            if not np.issubdtype(g.dtype, np.integer):
                g, labels = encode_groups(g)
                object.__setattr__(self, "group_labels", labels)
            g = np.array(g, dtype=np.int64)
            g.setflags(write=False)
            object.__setattr__(self, "group", g)
            if not self.group_labels:
                object.__setattr__(self, "group_labels", tuple(str(i) for i in range(g.max() + 1)))
        if self.slope_covariate is not None:
            t = _frozen(self.slope_covariate).reshape(-1)
            if t.shape != (n,):
                raise DataError(f"slope covariate has length {t.shape[0]}, expected {n}")
            object.__setattr__(self, "slope_covariate", t)
        if not self.z_names:
            object.__setattr__(self, "z_names", tuple(f"V{k + 1}" for k in range(Z.shape[1])))
        if not self.x_names:
            names = tuple("(Intercept)" if np.all(X[:, j] == 1.0) else f"X{j + 1}"
                          for j in range(X.shape[1]))
            object.__setattr__(self, "x_names", names)
        if len(self.z_names) != Z.shape[1]:
            raise DataError("z_names length does not match Z columns")
        if self.family is Family.BINOMIAL and not np.all((y == 0) | (y == 1)):
            raise DataError("binomial response must be coded 0/1")
        if self.family is Family.POISSON and (np.any(y < 0) or np.any(y != np.round(y))):
            raise DataError("Poisson response must be non-negative integers")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def K(self) -> int:
        return self.Z.shape[1]

    @property
    def n_groups(self) -> int:
        return 0 if self.group is None else int(self.group.max()) + 1

    def with_response(self, y, family=None) -> "Dataset":
        """Copy with ``y`` replaced (the working responses are Gaussian)."""
        return replace(self, y=y, family=self.family if family is None else family)


def encode_groups(labels) -> tuple[np.ndarray, tuple[str, ...]]:
    """Map opaque labels to dense codes ordered by first appearance."""
    codes: dict[str, int] = {}
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        key = str(lab)
        if key not in codes:
            codes[key] = len(codes)
        out[i] = codes[key]
    return out, tuple(codes)


def _to_float(cell: str, row: int, col: int, header: Sequence[str]) -> float:
    try:
        v = float(cell)
    except ValueError:
        v = float("nan")
    if not np.isfinite(v):
        raise DataError(
            f"non-numeric or missing value {cell!r} at data row {row + 1}, "
            f"column {col + 1} ({header[col]!r})"
        )
    return v


def load_dataset(
    path,
    y_col: int,
    z_cols: Sequence[int],
    group_col: int | None = None,
    slope_col: int | None = None,
    family: Family | str = Family.GAUSSIAN,
    x_cols: Sequence[int] = (),
) -> Dataset:
    """Read a comma-delimited file with a header row into a :class:`Dataset`.

    All indices are 0-based. ``X`` is an intercept column followed by any
    ``x_cols``. Group and slope columns never enter ``Z``.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path} is empty")
    header, body = rows[0], [r for r in rows[1:] if r]
    ncol = len(header)

    roles: dict[int, list[str]] = {}
    def claim(idx, role):
        if not 0 <= idx < ncol:
            raise DataError(f"column {idx + 1} ({role}) out of range 1..{ncol}")
        roles.setdefault(idx, []).append(role)

    claim(y_col, "y")
    for c in z_cols:
        claim(c, "z")
    for c in x_cols:
        claim(c, "x")
    if group_col is not None:
        claim(group_col, "group")
    if slope_col is not None:
        claim(slope_col, "slope")
    clashes = sorted(c for c, r in roles.items() if len(r) > 1)
    if clashes:
        detail = ", ".join(f"column {c + 1} ({'/'.join(roles[c])})" for c in clashes)
        raise DataError(f"overlapping column assignments: {detail}")

    for i, r in enumerate(body):
        if len(r) != ncol:
            raise DataError(f"data row {i + 1} has {len(r)} fields, header has {ncol}")

    def numeric(col):
        return np.array([_to_float(r[col], i, col, header) for i, r in enumerate(body)])

    y = numeric(y_col)
    Z = np.column_stack([numeric(c) for c in z_cols]) if z_cols else np.empty((len(body), 0))
    X = np.column_stack([np.ones(len(body))] + [numeric(c) for c in x_cols])
    group = labels = None
    if group_col is not None:
        group, labels = encode_groups([r[group_col] for r in body])
    slope = numeric(slope_col) if slope_col is not None else None

    return Dataset(
        y=y, X=X, Z=Z, group=group, slope_covariate=slope, family=Family.parse(family),
        z_names=tuple(header[c] for c in z_cols),
        x_names=("(Intercept)",) + tuple(header[c] for c in x_cols),
        group_labels=labels or (),
        meta={"source": str(path)},
    )


def standardize(d: Dataset, slope: bool = False) -> Dataset:
    """Center and scale every ``Z`` column to mean 0 and sample SD 1.

    With ``slope=True`` the slope covariate is standardized too.
    """
    Z = np.array(d.Z)
    mean = Z.mean(axis=0)
    Z -= mean
    sd = Z.std(axis=0, ddof=1)
    bad = np.flatnonzero(~(sd > 1e-12 * np.maximum(1.0, np.abs(mean))))
    if bad.size:
        raise DataError(f"constant candidate column(s): {[d.z_names[k] for k in bad]}")
    Z /= sd
    # second pass removes the residual rounding left by the first
    Z -= Z.mean(axis=0)
    Z /= Z.std(axis=0, ddof=1)
    t = d.slope_covariate
    if slope and t is not None:
        s = t.std(ddof=1)
        if not s > 0:
            raise DataError("slope covariate is constant")
        t = (t - t.mean()) / s
    return replace(d, Z=Z, slope_covariate=t, standardized=True)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_dataset(d: Dataset, path) -> None:
    """Write ``y, group, t, extra X columns, Z`` as CSV (17 significant digits).

    Absent group/slope columns are omitted, so the layout for a full
    longitudinal dataset is ``y=1, group=2, slope=3, Z=4..``.
    """
    header = ["y"]
    cols = [[_fmt(v) if d.family is Family.GAUSSIAN else str(int(v)) for v in d.y]]
    if d.group is not None:
        header.append("group")
        cols.append([d.group_labels[g] for g in d.group])
    if d.slope_covariate is not None:
        header.append("t")
        cols.append([_fmt(v) for v in d.slope_covariate])
    for j, name in enumerate(d.x_names):
        if name == "(Intercept)":
            continue
        header.append(name)
        cols.append([_fmt(v) for v in d.X[:, j]])
    for k, name in enumerate(d.z_names):
        header.append(name)
        cols.append([_fmt(v) for v in d.Z[:, k]])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(zip(*cols))
