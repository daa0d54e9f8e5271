"""Immutable datasets of mismeasured covariates and side variables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np


class DataError(ValueError):
    """Raised when a dataset violates its construction invariants."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """A sample of n observations: mismeasured covariates plus named side columns.

    ``x`` is the n-by-d matrix of error-laden covariates; ``s`` maps column
    names (outcome ``y``, clean covariates ``w*``, instruments ``z*``, second
    measurement ``q``, ...) to length-n arrays.  All arrays are validated and
    frozen at construction; evaluation code treats rows independently.
    """

    x: np.ndarray
    s: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[1] < 1:
            raise DataError("x must be an n-by-d matrix with d >= 1")
        if x.shape[0] < 1:
            raise DataError("empty dataset")
        if not np.all(np.isfinite(x)):
            bad = int(np.where(~np.isfinite(x).all(axis=1))[0][0])
            raise DataError(f"non-finite value in x at row {bad}")
        n = x.shape[0]
        cols = {}
        for name, col in dict(self.s).items():
            col = np.asarray(col, dtype=float)
            if col.shape != (n,):
                raise DataError(
                    f"column {name!r} has shape {col.shape}, expected ({n},)"
                )
            if not np.all(np.isfinite(col)):
                bad = int(np.where(~np.isfinite(col))[0][0])
                raise DataError(f"non-finite value in column {name!r} at row {bad}")
            cols[name] = _readonly(col)
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "s", MappingProxyType(cols))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.s[name]
        except KeyError:
            raise DataError(f"dataset has no column {name!r}") from None

    def require_columns(self, names: Sequence[str]) -> None:
        missing = [c for c in names if c not in self.s]
        if missing:
            raise DataError(f"dataset is missing columns {missing}")


def read_csv(path: str, roles: Mapping[str, object]) -> Dataset:
    """Load a dataset from a headed CSV file using a column-role map.

    ``roles`` assigns CSV header names to roles: ``{"x": ["inc"], "y": "wage",
    "z": ["iv1"], "w": ["educ"], "q": "inc2"}``.  The ``x`` entry lists the
    mismeasured columns in coordinate order; list-valued roles become columns
    ``z1, z2, ...`` / ``w1, w2, ...``; scalar roles keep their role name.
    Missing or non-numeric cells are rejected.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: no data rows")
    index = {name: i for i, name in enumerate(header)}

    def pull(colname: str) -> np.ndarray:
        if colname not in index:
            raise DataError(f"{path}: no column {colname!r} in header")
        j = index[colname]
        out = np.empty(len(rows))
        for i, r in enumerate(rows):
            cell = r[j].strip() if j < len(r) else ""
            if not cell:
                raise DataError(f"{path}: missing value in {colname!r} at data row {i}")
            try:
                out[i] = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: non-numeric value {cell!r} in {colname!r} at data row {i}"
                ) from None
        if not np.all(np.isfinite(out)):
            bad = int(np.where(~np.isfinite(out))[0][0])
            raise DataError(f"{path}: non-finite value in {colname!r} at data row {bad}")
        return out

    x_names = roles.get("x")
    if not x_names:
        raise DataError("column-role map must assign at least one 'x' column")
    if isinstance(x_names, str):
        x_names = [x_names]
    x = np.column_stack([pull(c) for c in x_names])

    s: dict[str, np.ndarray] = {}
    for role, value in roles.items():
        if role == "x":
            continue
        if isinstance(value, str):
            s[role] = pull(value)
        else:
            names = list(value)
            if len(names) == 1:
                s[role] = pull(names[0])
                s[f"{role}1"] = s[role]
            else:
                for k, c in enumerate(names, start=1):
                    s[f"{role}{k}"] = pull(c)
    return Dataset(x=x, s=s)
