"""Scalar regression functions rho(x, s, theta) with closed-form derivatives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..corrected import ScalarMomentFn


def _falling(a: int, k: int) -> int:
    # a * (a-1) * ... * (a-k+1); zero once k exceeds a
    if k > a:
        return 0
    return math.prod(range(a - k + 1, a + 1))


class RegressionFunction:
    """rho(x, s, theta) with x-derivatives, theta-gradient, and their mix."""

    max_order: int = 6
    dim_theta: int

    def value(self, x, s, theta) -> np.ndarray:
        raise NotImplementedError

    def dx(self, x, s, theta, k: int) -> np.ndarray:
        raise NotImplementedError

    def dtheta(self, x, s, theta) -> np.ndarray:
        raise NotImplementedError

    def dx_dtheta(self, x, s, theta, k: int) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class PolynomialRegression(RegressionFunction):
    """rho = theta_1 + theta_2 x + ... + theta_{deg+1} x^deg."""

    degree: int

    @property
    def dim_theta(self) -> int:
        return self.degree + 1

    def value(self, x, s, theta):
        x1 = x[:, 0]
        return sum(theta[j] * x1**j for j in range(self.degree + 1))

    def dx(self, x, s, theta, k):
        x1 = x[:, 0]
        out = np.zeros_like(x1)
        for j in range(k, self.degree + 1):
            out += theta[j] * _falling(j, k) * x1 ** (j - k)
        return out

    def dtheta(self, x, s, theta):
        x1 = x[:, 0]
        return np.column_stack([x1**j for j in range(self.degree + 1)])

    def dx_dtheta(self, x, s, theta, k):
        x1 = x[:, 0]
        cols = []
        for j in range(self.degree + 1):
            c = _falling(j, k)
            cols.append(c * x1 ** (j - k) if c else np.zeros_like(x1))
        return np.column_stack(cols)


def _rational_kernel_coeffs(max_order: int) -> list[np.ndarray]:
    # h = (1+x^2)^-2; h^(k) = P_k(x) / (1+x^2)^(k+2) with
    # P_{k+1} = P_k' (1+x^2) - 2(k+2) x P_k  (poly coeffs, ascending powers)
    polys = [np.array([1.0])]
    for k in range(max_order):
        p = polys[-1]
        dp = np.polynomial.polynomial.polyder(p) if p.size > 1 else np.array([0.0])
        term1 = np.polynomial.polynomial.polymul(dp, np.array([1.0, 0.0, 1.0]))
        term2 = -2.0 * (k + 2) * np.polynomial.polynomial.polymul(np.array([0.0, 1.0]), p)
        size = max(term1.size, term2.size)
        nxt = np.zeros(size)
        nxt[: term1.size] += term1
        nxt[: term2.size] += term2
        polys.append(nxt)
    return polys


_RATIONAL_P = _rational_kernel_coeffs(6)


def _rational_kernel(x1: np.ndarray, k: int) -> np.ndarray:
    num = np.polynomial.polynomial.polyval(x1, _RATIONAL_P[k])
    return num / (1.0 + x1**2) ** (k + 2)


@dataclass(frozen=True)
class RationalFractionRegression(RegressionFunction):
    """rho = theta_1 + theta_2 x + theta_3 / (1 + x^2)^2."""

    dim_theta: int = 3

    def value(self, x, s, theta):
        x1 = x[:, 0]
        return theta[0] + theta[1] * x1 + theta[2] * _rational_kernel(x1, 0)

    def dx(self, x, s, theta, k):
        x1 = x[:, 0]
        out = theta[2] * _rational_kernel(x1, k)
        if k == 1:
            out = out + theta[1]
        return out

    def dtheta(self, x, s, theta):
        x1 = x[:, 0]
        return np.column_stack([np.ones_like(x1), x1, _rational_kernel(x1, 0)])

    def dx_dtheta(self, x, s, theta, k):
        x1 = x[:, 0]
        z = np.zeros_like(x1)
        return np.column_stack([z, np.ones_like(x1) if k == 1 else z, _rational_kernel(x1, k)])


def _hermite(u: np.ndarray, j: int) -> np.ndarray:
    # physicists' Hermite polynomials H_j(u)
    if j == 0:
        return np.ones_like(u)
    hm, h = np.ones_like(u), 2.0 * u
    for i in range(1, j):
        hm, h = h, 2.0 * u * h - 2.0 * i * hm
    return h


_SQRT_PI = math.sqrt(math.pi)


@dataclass(frozen=True)
class ProbitRegression(RegressionFunction):
    """rho = (1 + erf(theta_1 + theta_2 x)) / 2."""

    dim_theta: int = 2

    def _u(self, x, theta):
        return theta[0] + theta[1] * x[:, 0]

    def value(self, x, s, theta):
        from scipy.special import erf

        return 0.5 * (1.0 + erf(self._u(x, theta)))

    def dx(self, x, s, theta, k):
        u = self._u(x, theta)
        return theta[1] ** k * (-1.0) ** (k - 1) * _hermite(u, k - 1) * np.exp(-(u**2)) / _SQRT_PI

    def dtheta(self, x, s, theta):
        u = self._u(x, theta)
        kern = np.exp(-(u**2)) / _SQRT_PI
        return np.column_stack([kern, x[:, 0] * kern])

    def dx_dtheta(self, x, s, theta, k):
        u = self._u(x, theta)
        e = np.exp(-(u**2)) / _SQRT_PI
        dk = theta[1] ** k * (-1.0) ** k * _hermite(u, k) * e
        dkm1 = theta[1] ** (k - 1) * (-1.0) ** (k - 1) * _hermite(u, k - 1) * e
        return np.column_stack([dk, x[:, 0] * dk + k * dkm1])


@dataclass(frozen=True)
class NlrResidual(ScalarMomentFn):
    """u = y - rho(x, s, theta), the nonlinear-regression moment residual."""

    rho: RegressionFunction
    y_column: str = "y"

    @property
    def max_order(self) -> int:
        return self.rho.max_order

    def value(self, x, s, theta):
        return s[self.y_column] - self.rho.value(x, s, theta)

    def dx(self, x, s, theta, k):
        return -self.rho.dx(x, s, theta, k)

    def dtheta(self, x, s, theta):
        return -self.rho.dtheta(x, s, theta)

    def dx_dtheta(self, x, s, theta, k):
        return -self.rho.dx_dtheta(x, s, theta, k)
