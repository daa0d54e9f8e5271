"""Moment functions, their evaluation, and derivative providers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Literal, Mapping, Sequence

import numpy as np

from . import numdiff
from .dataset import Dataset


class MomentError(ValueError):
    """Dimension mismatches and evaluation failures of moment functions."""


@dataclass(frozen=True)
class MultiIndex:
    """A vector of per-coordinate derivative orders."""

    kappa: tuple[int, ...]

    def __post_init__(self):
        k = tuple(int(v) for v in self.kappa)
        if any(v < 0 for v in k):
            raise ValueError("multi-index entries must be non-negative")
        object.__setattr__(self, "kappa", k)

    @property
    def order(self) -> int:
        return sum(self.kappa)

    @property
    def factorial(self) -> int:
        out = 1
        for v in self.kappa:
            out *= math.factorial(v)
        return out

    def __len__(self) -> int:
        return len(self.kappa)

    def __iter__(self):
        return iter(self.kappa)

    def __le__(self, other: "MultiIndex") -> bool:
        return len(self.kappa) == len(other.kappa) and all(
            a <= b for a, b in zip(self.kappa, other.kappa)
        )

    def __sub__(self, other: "MultiIndex") -> "MultiIndex":
        return MultiIndex(tuple(a - b for a, b in zip(self.kappa, other.kappa)))


def multi_index_set(d: int, k: int) -> list[MultiIndex]:
    """All multi-indices of dimension d with total order k, graded-lex order.

    The count is C(k+d-1, d-1); the ordering is deterministic and puts weight
    on leading coordinates first, e.g. (d=2, k=2) -> [(2,0), (1,1), (0,2)].
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if k < 0:
        raise ValueError("k must be >= 0")

    def gen(dim: int, total: int):
        if dim == 1:
            yield (total,)
            return
        for head in range(total, -1, -1):
            for tail in gen(dim - 1, total - head):
                yield (head,) + tail

    return [MultiIndex(t) for t in gen(d, k)]


@dataclass(frozen=True)
class DerivativeRequest:
    """Which derivative of the moment function to evaluate."""

    kappa: MultiIndex
    target: Literal["g", "theta_jacobian"] = "g"


class NumericProvider:
    """Finite-difference fallback provider built on the raw evaluator.

    Pure x-derivatives and mixed partials use the central tensor stencil of
    :mod:`merm.numdiff`; theta-Jacobians use central differences in theta.
    """

    def __init__(self, eval_fn, max_order: int = 6, step_scale: float = 2.0):
        self._eval = eval_fn
        self.max_order = int(max_order)
        self.step_scale = float(step_scale)

    def deriv_x(self, x, s, theta, kappa: MultiIndex) -> np.ndarray:
        if kappa.order > self.max_order:
            raise MomentError(
                f"derivative order {kappa.order} exceeds provider maximum {self.max_order}"
            )
        if kappa.order == 0:
            return self._eval(x, s, theta)
        return numdiff.derivative_x(
            lambda xx: self._eval(xx, s, theta), x, kappa.kappa, self.step_scale
        )

    def dtheta(self, x, s, theta) -> np.ndarray:
        return numdiff.jacobian(lambda t: self._eval(x, s, t), theta)

    def deriv_x_dtheta(self, x, s, theta, kappa: MultiIndex) -> np.ndarray:
        return numdiff.jacobian(lambda t: self.deriv_x(x, s, t, kappa), theta)

    def mean_dtheta(self, x, s, theta) -> np.ndarray:
        return self.dtheta(x, s, theta).mean(axis=0)

    def mean_deriv_x_dtheta(self, x, s, theta, kappa: MultiIndex) -> np.ndarray:
        return self.deriv_x_dtheta(x, s, theta, kappa).mean(axis=0)


class AnalyticProvider:
    """Closed-form derivatives supplied as closures.

    ``deriv_x_fn(x, s, theta, kappa) -> (n, m)`` must cover all orders up to
    ``max_order``; the theta-Jacobian closures are optional, with numeric
    fallbacks filled in from ``eval_fn`` when omitted.
    """

    def __init__(
        self,
        eval_fn,
        deriv_x_fn,
        max_order: int,
        dtheta_fn=None,
        deriv_x_dtheta_fn=None,
        mean_dtheta_fn=None,
        mean_deriv_x_dtheta_fn=None,
    ):
        self._eval = eval_fn
        self._deriv_x = deriv_x_fn
        self.max_order = int(max_order)
        self._dtheta = dtheta_fn
        self._deriv_x_dtheta = deriv_x_dtheta_fn
        self._mean_dtheta = mean_dtheta_fn
        self._mean_deriv_x_dtheta = mean_deriv_x_dtheta_fn
        self._fallback = NumericProvider(eval_fn, max_order)

    def deriv_x(self, x, s, theta, kappa: MultiIndex) -> np.ndarray:
        if kappa.order == 0:
            return self._eval(x, s, theta)
        if kappa.order > self.max_order:
            raise MomentError(
                f"derivative order {kappa.order} exceeds provider maximum {self.max_order}"
            )
        return self._deriv_x(x, s, theta, kappa)

    def dtheta(self, x, s, theta) -> np.ndarray:
        if self._dtheta is not None:
            return self._dtheta(x, s, theta)
        return self._fallback.dtheta(x, s, theta)

    def deriv_x_dtheta(self, x, s, theta, kappa: MultiIndex) -> np.ndarray:
        if kappa.order == 0:
            return self.dtheta(x, s, theta)
        if self._deriv_x_dtheta is not None:
            return self._deriv_x_dtheta(x, s, theta, kappa)
        return numdiff.jacobian(lambda t: self.deriv_x(x, s, t, kappa), theta)

    def mean_dtheta(self, x, s, theta) -> np.ndarray:
        if self._mean_dtheta is not None:
            return self._mean_dtheta(x, s, theta)
        return self.dtheta(x, s, theta).mean(axis=0)

    def mean_deriv_x_dtheta(self, x, s, theta, kappa: MultiIndex) -> np.ndarray:
        if kappa.order == 0:
            return self.mean_dtheta(x, s, theta)
        if self._mean_deriv_x_dtheta is not None:
            return self._mean_deriv_x_dtheta(x, s, theta, kappa)
        return self.deriv_x_dtheta(x, s, theta, kappa).mean(axis=0)


@dataclass(frozen=True)
class MomentSpec:
    """A vector-valued moment function with dimension metadata and derivatives.

    ``eval(x, s, theta)`` evaluates all rows at once: ``x`` is (n, d), ``s``
    maps side-column names to length-n arrays, and the result is (n, m) with
    row i equal to g(X_i, S_i, theta).  ``deriv`` supplies derivatives in the
    mismeasured coordinates and theta-Jacobians.
    """

    m: int
    dim_theta: int
    d: int
    eval: Callable[[np.ndarray, Mapping[str, np.ndarray], np.ndarray], np.ndarray]
    deriv: Any
    required_columns: tuple[str, ...] = ()
    meta: Mapping[str, Any] = field(default_factory=dict)

    @property
    def max_order(self) -> int:
        return self.deriv.max_order


def _check_theta(spec: MomentSpec, theta: np.ndarray) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (spec.dim_theta,):
        raise MomentError(
            f"theta has shape {theta.shape}, spec expects ({spec.dim_theta},)"
        )
    return theta


def _check_data(spec: MomentSpec, data: Dataset) -> None:
    if data.d != spec.d:
        raise MomentError(f"data has d={data.d}, spec expects d={spec.d}")
    data.require_columns(spec.required_columns)


def evaluate_moments(spec: MomentSpec, data: Dataset, theta: np.ndarray) -> np.ndarray:
    """Evaluate the n-by-m matrix of moment rows g(X_i, S_i, theta)."""
    theta = _check_theta(spec, theta)
    _check_data(spec, data)
    out = np.asarray(spec.eval(data.x, data.s, theta), dtype=float)
    if out.shape != (data.n, spec.m):
        raise MomentError(f"eval returned shape {out.shape}, expected {(data.n, spec.m)}")
    if not np.all(np.isfinite(out)):
        bad = int(np.where(~np.isfinite(out).all(axis=1))[0][0])
        raise MomentError(f"non-finite moment value at row {bad}")
    return out


def derivative_x(
    spec: MomentSpec, data: Dataset, theta: np.ndarray, req: DerivativeRequest
) -> np.ndarray:
    """Evaluate d^kappa g (or its theta-Jacobian) row by row.

    Returns (n, m) for target "g" and (n, m, dim_theta) for
    "theta_jacobian".
    """
    theta = _check_theta(spec, theta)
    _check_data(spec, data)
    kappa = req.kappa
    if len(kappa) != spec.d:
        raise MomentError(f"kappa has length {len(kappa)}, spec expects {spec.d}")
    if req.target == "g":
        out = spec.deriv.deriv_x(data.x, data.s, theta, kappa)
        expected = (data.n, spec.m)
    elif req.target == "theta_jacobian":
        out = spec.deriv.deriv_x_dtheta(data.x, data.s, theta, kappa)
        expected = (data.n, spec.m, spec.dim_theta)
    else:
        raise MomentError(f"unknown derivative target {req.target!r}")
    out = np.asarray(out, dtype=float)
    if out.shape != expected:
        raise MomentError(f"derivative has shape {out.shape}, expected {expected}")
    return out


# Frozen polynomial instrument bases in (x, z).  Each term is (x-power,
# z-power); orderings are fixed so runs are bit-reproducible.
BASIS_TERMS: dict[str, tuple[tuple[int, int], ...]] = {
    "K2-basis": ((0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (3, 0), (0, 3)),
    "K4-basis": (
        (0, 0),
        (1, 0),
        (0, 1),
        (2, 0),
        (1, 1),
        (0, 2),
        (3, 0),
        (2, 1),
        (1, 2),
        (0, 3),
    ),
}


def basis_terms(kind: str, degree: int | None = None) -> tuple[tuple[int, int], ...]:
    """Exponent pairs (a, b) for the named basis, term i being x**a * z**b."""
    if kind in BASIS_TERMS:
        return BASIS_TERMS[kind]
    if kind == "custom":
        if degree is None or degree < 1:
            raise MomentError("custom basis needs degree >= 1")
        terms = []
        for total in range(degree + 1):
            for a in range(total, -1, -1):
                terms.append((a, total - a))
        return tuple(terms)
    raise MomentError(f"unknown basis kind {kind!r}")


def build_instrument_basis(
    kind: str,
    x: float,
    z: float,
    extra: Sequence[float] = (),
    degree: int | None = None,
) -> np.ndarray:
    """Evaluate the named polynomial basis phi(x, z), appending any extras."""
    terms = basis_terms(kind, degree)
    vals = [float(x) ** a * float(z) ** b for a, b in terms]
    return np.array(vals + [float(e) for e in extra])
