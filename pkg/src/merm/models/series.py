"""Truncated power-series arithmetic, vectorized over observations.

A series is an (order+1, n) array of Taylor coefficients in a scalar
perturbation t; coefficient i multiplies t**i.  Utilities are affine in the
mismeasured coordinate, so choice probabilities along x + t are ratios of
exponential series, and their division gives every x-derivative to machine
precision in one pass.
"""

from __future__ import annotations

import math

import numpy as np


def exp_affine(u: np.ndarray, a, order: int) -> np.ndarray:
    """Coefficients of exp(u + a*t): exp(u) * a^i / i!."""
    n = u.shape[0]
    out = np.empty((order + 1, n))
    base = np.exp(u)
    out[0] = base
    ai = np.ones(n) if np.isscalar(a) else np.ones_like(u)
    for i in range(1, order + 1):
        ai = ai * a / i
        out[i] = base * ai
    return out


def mul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Truncated Cauchy product of two series of equal order."""
    order = A.shape[0] - 1
    out = np.zeros_like(A)
    for i in range(order + 1):
        for j in range(i + 1):
            out[i] += A[j] * B[i - j]
    return out


def div(N: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Series quotient Q with N = Q * D (D_0 must be nonzero everywhere)."""
    order = N.shape[0] - 1
    out = np.empty_like(N)
    inv0 = 1.0 / D[0]
    out[0] = N[0] * inv0
    for i in range(1, order + 1):
        acc = N[i].copy()
        for j in range(1, i + 1):
            acc -= D[j] * out[i - j]
        out[i] = acc * inv0
    return out


def shift_x(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Series of (x + t) * A(t)."""
    out = np.empty_like(A)
    out[0] = x * A[0]
    for i in range(1, A.shape[0]):
        out[i] = x * A[i] + A[i - 1]
    return out


def deriv(A: np.ndarray, k: int) -> np.ndarray:
    """k-th derivative at t = 0: k! times coefficient k."""
    return math.factorial(k) * A[k]
