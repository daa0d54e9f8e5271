"""Polynomial instrument bases phi(x, s-columns) with x-derivatives."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..moments import basis_terms


@dataclass(frozen=True)
class BasisColumn:
    """One basis entry: (x / x_scale)**x_pow times a product of s-columns."""

    x_pow: int = 0
    s_pows: tuple[tuple[str, int], ...] = ()


@dataclass(frozen=True)
class PolyBasis:
    """A vector of basis columns, differentiable in x to any order.

    Basis matrices depend on the data only, not on theta, so evaluations are
    memoized per (x array, order); entries hold a strong reference to x, which
    makes id-keying sound, and the cache is capped to stay small under
    finite-difference stencil sweeps.
    """

    columns: tuple[BasisColumn, ...]
    x_scale: float = 1.0
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.columns)

    def value(self, x: np.ndarray, s, k: int = 0) -> np.ndarray:
        """k-th x-derivative of the basis, shape (n, len(columns))."""
        key = (id(x), k)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is x:
            return hit[1]
        out = self._compute(x, s, k)
        if len(self._cache) > 48:
            self._cache.clear()
        self._cache[key] = (x, out)
        return out

    def _compute(self, x: np.ndarray, s, k: int) -> np.ndarray:
        x1 = x[:, 0] / self.x_scale
        n = x1.shape[0]
        out = np.empty((n, len(self.columns)))
        for idx, col in enumerate(self.columns):
            a = col.x_pow
            if k > a:
                out[:, idx] = 0.0
                continue
            coef = math.prod(range(a - k + 1, a + 1)) / self.x_scale**k
            vals = coef * x1 ** (a - k)
            for name, p in col.s_pows:
                vals = vals * s[name] ** p
            out[:, idx] = vals
        out.setflags(write=False)
        return out


def xz_basis(kind: str, z_column: str = "z", degree: int | None = None,
             extras: tuple[str, ...] = (), x_scale: float = 1.0) -> PolyBasis:
    """Named polynomial basis in (x, z) plus appended plain s-columns."""
    cols = [
        BasisColumn(x_pow=a, s_pows=((z_column, b),) if b else ())
        for a, b in basis_terms(kind, degree)
    ]
    cols += [BasisColumn(x_pow=0, s_pows=((name, 1),)) for name in extras]
    return PolyBasis(columns=tuple(cols), x_scale=x_scale)
