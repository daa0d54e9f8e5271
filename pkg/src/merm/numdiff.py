"""High-order central finite differences for moment functions.

Derivatives in the mismeasured coordinates are taken per observation with a
tensor-product central stencil; derivative order k uses a symmetric
(2*ceil(k/2)+1)-point stencil per axis, giving O(h^2) truncation error.  Step
sizes follow h_j = c * max(1, |x_j|) * eps**(1/(k+2)), which balances
truncation against round-off for orders up to 6.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np

_EPS = float(np.finfo(float).eps)


@lru_cache(maxsize=None)
def stencil_weights(order: int) -> tuple[tuple[int, ...], tuple[float, ...]]:
    """Central-difference offsets and weights for a pure derivative of `order`.

    Weights are computed with Fornberg's algorithm on the symmetric integer
    grid -m..m with m = ceil(order/2); multiply by h**-order to apply.
    """
    if order < 0:
        raise ValueError("derivative order must be >= 0")
    if order == 0:
        return (0,), (1.0,)
    m = (order + 1) // 2
    offsets = tuple(range(-m, m + 1))
    w = _fornberg(np.array(offsets, dtype=float), order)
    return offsets, tuple(w)


def _fornberg(grid: np.ndarray, order: int) -> np.ndarray:
    # B. Fornberg (1988), weights for derivative `order` at 0 on `grid`.
    n = len(grid)
    c = np.zeros((n, order + 1))
    c[0, 0] = 1.0
    c1 = 1.0
    c4 = grid[0]
    for i in range(1, n):
        mn = min(i, order)
        c2 = 1.0
        c5 = c4
        c4 = grid[i]
        for j in range(i):
            c3 = grid[i] - grid[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, order]


def step_sizes(x: np.ndarray, order: int, scale: float = 1.0) -> np.ndarray:
    """Per-entry step h = scale * max(1, |x|) * eps**(1/(order+2))."""
    return scale * np.maximum(1.0, np.abs(x)) * _EPS ** (1.0 / (order + 2))


def derivative_x(
    f: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    kappa: Sequence[int],
    scale: float = 2.0,
) -> np.ndarray:
    """Mixed partial d^kappa f by tensor-product central differences.

    ``f`` maps an (n, d) matrix to an (n, ...) array evaluated row-wise;
    ``kappa`` gives per-axis derivative orders.  Rows are differentiated
    independently with per-row, per-axis steps.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    kappa = tuple(int(k) for k in kappa)
    if len(kappa) != x.shape[1]:
        raise ValueError(f"kappa has length {len(kappa)}, expected {x.shape[1]}")
    if any(k < 0 for k in kappa):
        raise ValueError("kappa entries must be non-negative")
    total = sum(kappa)
    if total == 0:
        return f(x)

    axes = [j for j, k in enumerate(kappa) if k > 0]
    per_axis = []
    h = {}
    for j in axes:
        offs, wts = stencil_weights(kappa[j])
        per_axis.append((j, offs, wts))
        hj = step_sizes(x[:, j], total, scale)
        if np.any(hj == 0.0):
            raise FloatingPointError("step underflow in finite differences")
        h[j] = hj

    out = None
    # Tensor product over the active axes: sum_w (prod weights) f(x + sum off*h).
    def recurse(level: int, shift: np.ndarray, weight: np.ndarray):
        nonlocal out
        if level == len(per_axis):
            val = f(x + shift)
            term = weight.reshape((-1,) + (1,) * (val.ndim - 1)) * val
            out = term if out is None else out + term
            return
        j, offs, wts = per_axis[level]
        for off, w in zip(offs, wts):
            if w == 0.0:
                continue
            delta = np.zeros_like(x)
            delta[:, j] = off * h[j]
            recurse(level + 1, shift + delta, weight * (w / h[j] ** kappa[j]))

    recurse(0, np.zeros_like(x), np.ones(x.shape[0]))
    return out


def jacobian(
    f: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    rel_step: float | None = None,
) -> np.ndarray:
    """Central-difference Jacobian of f with respect to the parameter vector.

    Returns an array of shape f(theta).shape + (len(theta),).
    """
    theta = np.asarray(theta, dtype=float)
    if rel_step is None:
        rel_step = _EPS ** (1.0 / 3.0)
    base = np.asarray(f(theta))
    out = np.empty(base.shape + (theta.size,))
    for j in range(theta.size):
        hj = rel_step * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += hj
        tm[j] -= hj
        out[..., j] = (np.asarray(f(tp)) - np.asarray(f(tm))) / (2.0 * hj)
    return out
