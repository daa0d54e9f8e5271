"""Three-option multinomial logit models with x entering utilities linearly.

Because the mismeasured covariate enters each utility with a constant slope,
choice probabilities along x + t are ratios of exponential power series;
series division yields every x-derivative of p_j, and products of probability
series yield the x-derivatives of the theta-gradients.  This keeps high-order
corrected moments exact without symbolic algebra.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.optimize

from ..corrected import ScalarMomentFn
from . import series


@dataclass(frozen=True)
class UtilitySpec:
    """theta-parameterization of one option's utility.

    ``slope`` is the index of the theta entry multiplying x (None if x is
    absent); ``terms`` lists (theta index, s-column or None) products added to
    the utility, None meaning a constant 1 (an intercept).
    """

    slope: Optional[int] = None
    terms: tuple[tuple[int, Optional[str]], ...] = ()


@dataclass(frozen=True)
class MnlModel:
    """Utility layout for options (1, 2, 0); option order fixed for moments."""

    dim_theta: int
    options: tuple[UtilitySpec, UtilitySpec, UtilitySpec]  # j = 1, 2, 0

    def utilities(self, x1, s, theta):
        """Option utility levels (3, n) and x-slopes (3,)."""
        n = x1.shape[0]
        u = np.zeros((3, n))
        a = np.zeros(3)
        for j, opt in enumerate(self.options):
            if opt.slope is not None:
                u[j] += theta[opt.slope] * x1
                a[j] = theta[opt.slope]
            for idx, col in opt.terms:
                u[j] += theta[idx] * (1.0 if col is None else s[col])
        return u, a

    def grad_factors(self, s, n):
        """For each theta component: list of (option j, constant part, has_x)."""
        out = [[] for _ in range(self.dim_theta)]
        for j, opt in enumerate(self.options):
            if opt.slope is not None:
                out[opt.slope].append((j, np.zeros(n), True))
            for idx, col in opt.terms:
                const = np.ones(n) if col is None else np.asarray(s[col], dtype=float)
                out[idx].append((j, const, False))
        return out


class _SeriesCache:
    """Last few series bundles, keyed by the exact (x array, theta) pair.

    Entries hold a strong reference to the x array, so an id collision with a
    different live array is impossible; data arrays are frozen upstream.
    """

    def __init__(self, maxsize: int = 4):
        self._store: dict = {}
        self._order: list = []
        self._maxsize = maxsize

    def get(self, x, theta_key):
        entry = self._store.get((id(x), theta_key))
        if entry is not None and entry[0] is x:
            return entry[1]
        return None

    def put(self, x, theta_key, value):
        key = (id(x), theta_key)
        if key in self._store:
            return
        self._store[key] = (x, value)
        self._order.append(key)
        if len(self._order) > self._maxsize:
            old = self._order.pop(0)
            self._store.pop(old, None)


@dataclass
class MnlProbability:
    """Taylor machinery for p_j(x + t, s, theta), j in (1, 2, 0)."""

    model: MnlModel
    order: int = 6
    _cache: _SeriesCache = field(default_factory=_SeriesCache, repr=False)

    def prob_series(self, x, s, theta):
        """(3, order+1, n) probability series for options (1, 2, 0)."""
        tkey = (theta.tobytes(), self.order)
        hit = self._cache.get(x, tkey)
        if hit is not None:
            return hit
        x1 = x[:, 0]
        u, a = self.model.utilities(x1, s, theta)
        u = u - u.max(axis=0, keepdims=True)  # softmax shift; ratios unchanged
        nums = [series.exp_affine(u[j], a[j], self.order) for j in range(3)]
        den = nums[0] + nums[1] + nums[2]
        ps = np.stack([series.div(nums[j], den) for j in range(3)])
        self._cache.put(x, tkey, ps)
        return ps

    def probs(self, x, s, theta):
        return self.prob_series(x, s, theta)[:, 0, :]

    def grad_series(self, x, s, theta):
        """(3, dim_theta, order+1, n) series of the theta-gradients of p_j."""
        tkey = ("grad", theta.tobytes(), self.order)
        hit = self._cache.get(x, tkey)
        if hit is not None:
            return hit
        ps = self.prob_series(x, s, theta)
        x1 = x[:, 0]
        n = x1.shape[0]
        q = {}  # q[(j, l)] = series of p_j * (1{j=l} - p_l)

        def q_jl(j, l):
            if (j, l) not in q:
                prod = series.mul(ps[j], ps[l])
                q[(j, l)] = ps[j] - prod if j == l else -prod
            return q[(j, l)]

        factors = self.model.grad_factors(s, n)
        out = np.zeros((3, self.model.dim_theta, self.order + 1, n))
        for c, entries in enumerate(factors):
            for l, const, has_x in entries:
                for j in range(3):
                    base = q_jl(j, l)
                    term = const * base
                    if has_x:
                        term = term + series.shift_x(base, x1)
                    out[j, c] += term
        self._cache.put(x, tkey, out)
        return out


@dataclass
class MnlResidual(ScalarMomentFn):
    """u_j = y_j - p_j(x, s, theta) for one inside option block."""

    prob: MnlProbability
    option: int  # 0-based position in (1, 2, 0): 0 -> option 1, 1 -> option 2
    y_column: str = "y1"
    max_order: int = 6

    def value(self, x, s, theta):
        return s[self.y_column] - self.prob.probs(x, s, theta)[self.option]

    def dx(self, x, s, theta, k):
        ps = self.prob.prob_series(x, s, theta)
        return -series.deriv(ps[self.option], k)

    def dtheta(self, x, s, theta):
        gs = self.prob.grad_series(x, s, theta)
        return -gs[self.option, :, 0, :].T

    def dx_dtheta(self, x, s, theta, k):
        gs = self.prob.grad_series(x, s, theta)
        return -(math.factorial(k) * gs[self.option, :, k, :]).T


def mnl_loglik(model: MnlModel, x1, s, y, theta):
    """Conditional-logit log likelihood; y is (n, 3) indicators for (1, 2, 0)."""
    u, _ = model.utilities(x1, s, theta)
    u = u - u.max(axis=0, keepdims=True)
    e = np.exp(u)
    den = e.sum(axis=0)
    ll = (y.T * (u - np.log(den))).sum()
    return float(ll)


def _design_tensor(model: MnlModel, x1, s):
    """U[i, j, c] = d u_j / d theta_c at observation i."""
    n = x1.shape[0]
    U = np.zeros((n, 3, model.dim_theta))
    for j, opt in enumerate(model.options):
        if opt.slope is not None:
            U[:, j, opt.slope] = x1
        for idx, col in opt.terms:
            U[:, j, idx] += 1.0 if col is None else s[col]
    return U


def mnl_mle(
    model: MnlModel,
    x1,
    s,
    y,
    theta_start=None,
    max_iter: int = 500,
):
    """Maximum likelihood for the conditional logit; returns (theta, Sigma).

    Sigma is the asymptotic covariance of sqrt(n)(theta_hat - theta_0), the
    inverse average observed information.
    """
    n = x1.shape[0]
    U = _design_tensor(model, x1, s)
    start = np.zeros(model.dim_theta) if theta_start is None else np.asarray(theta_start, float)

    def probs(theta):
        u, _ = model.utilities(x1, s, theta)
        u = u - u.max(axis=0, keepdims=True)
        e = np.exp(u)
        return e / e.sum(axis=0)

    def negll(theta):
        return -mnl_loglik(model, x1, s, y, theta)

    def grad(theta):
        p = probs(theta)  # (3, n)
        resid = y - p.T  # (n, 3)
        return -np.einsum("nj,njc->c", resid, U)

    res = scipy.optimize.minimize(negll, start, jac=grad, method="BFGS",
                                  options={"maxiter": max_iter, "gtol": 1e-8})
    theta = res.x
    # judge convergence by the per-observation score, not scipy's flag (BFGS
    # reports precision loss at machine-accurate optima)
    ok = bool(np.max(np.abs(grad(theta))) <= 1e-5 * n)
    p = probs(theta)
    ubar = np.einsum("jn,njc->nc", p, U)
    centered = U - ubar[:, None, :]
    info = np.einsum("jn,njc,njd->cd", p, centered, centered) / n
    sigma = np.linalg.inv(info)
    return theta, 0.5 * (sigma + sigma.T), ok


def choice_probabilities(model: MnlModel, x: float, s_point: dict, theta) -> np.ndarray:
    """p_1, p_2, p_0 at a single evaluation point."""
    x1 = np.array([float(x)])
    s = {k: np.array([float(v)]) for k, v in s_point.items()}
    u, _ = model.utilities(x1, s, np.asarray(theta, float))
    u = u - u.max()
    e = np.exp(u[:, 0])
    return e / e.sum()


def marginal_effects(model: MnlModel, x: float, s_point: dict, theta,
                     wrt: str = "x") -> np.ndarray:
    """d p_j / d (x or an s-column) at a point, for j in (1, 2, 0)."""
    p = choice_probabilities(model, x, s_point, theta)
    grads = np.zeros(3)
    for j, opt in enumerate(model.options):
        g = 0.0
        if wrt == "x":
            if opt.slope is not None:
                g = theta[opt.slope]
        else:
            for idx, col in opt.terms:
                if col == wrt:
                    g += theta[idx]
        grads[j] = g
    avg = float(p @ grads)
    return p * (grads - avg)
