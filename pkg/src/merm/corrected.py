"""Corrected moment functions and moment-construction helpers.

The corrected moment subtracts, from each raw moment row, a coefficient-
weighted sum of its derivatives in the mismeasured coordinates; the
coefficients are the nuisance parameters estimated jointly with theta.
"""

from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence

import numpy as np

from .dataset import Dataset
from .gamma import CorrectionScheme, GammaVector, SchemeError
from .moments import (
    AnalyticProvider,
    DerivativeRequest,
    MomentError,
    MomentSpec,
    MultiIndex,
    derivative_x,
    evaluate_moments,
)


def _scalar_kappa(k: int) -> MultiIndex:
    return MultiIndex((k,))


def corrected_moment(
    spec: MomentSpec,
    scheme: CorrectionScheme,
    data: Dataset,
    theta: np.ndarray,
    nuisance,
) -> np.ndarray:
    """Rows of the corrected moment function psi at (theta, nuisance).

    Classical regimes subtract nuisance-weighted x-derivatives of g; the
    weakly classical regime subtracts the f_k terms built from the v-family
    (with the k >= 4 terms bias-correcting the lower corrections).
    """
    g = evaluate_moments(spec, data, theta)
    if scheme.regime in ("classical_scalar", "classical_multivariate"):
        if not isinstance(nuisance, GammaVector):
            nuisance = GammaVector(scheme, np.asarray(nuisance, dtype=float))
        elif nuisance.scheme.regime != scheme.regime or nuisance.scheme.K != scheme.K:
            raise SchemeError("gamma vector does not match the correction scheme")
        out = g.copy()
        for kappa, gk in nuisance.items():
            if gk == 0.0:
                continue
            out -= gk * derivative_x(spec, data, theta, DerivativeRequest(kappa))
        return out
    # weakly classical
    omega = np.atleast_1d(np.asarray(nuisance, dtype=float))
    if omega.shape != (scheme.v_family.dim_omega,):
        raise SchemeError(
            f"omega has shape {omega.shape}, family needs ({scheme.v_family.dim_omega},)"
        )
    out = g.copy()
    for fk in _weakly_classical_terms(spec, scheme, data, theta, omega):
        out -= fk
    return out


def _weakly_classical_terms(spec, scheme, data, theta, omega):
    """The f_k corrections for K <= 4, in closed product-rule form.

    f2 = v2/2 g'' and f3 = v3/6 g'''; the order-4 term subtracts the second
    x-derivative of f2 weighted by v2/2, expanded so only v2, v2', v2'' and
    g'', g''', g'''' appear.
    """
    fam = scheme.v_family
    K = scheme.K
    x, s = data.x, data.s

    def dkg(k):
        return derivative_x(spec, data, theta, DerivativeRequest(_scalar_kappa(k)))

    terms = []
    v2 = fam.v(2, x, s, omega)
    g2 = dkg(2)
    terms.append((v2 / 2.0)[:, None] * g2)
    if K >= 3:
        v3 = fam.v(3, x, s, omega)
        g3 = dkg(3)
        terms.append((v3 / 6.0)[:, None] * g3)
    if K >= 4:
        v4 = fam.v(4, x, s, omega)
        g4 = dkg(4)
        dv2 = fam.dv_dx(2, 1, x, s, omega)
        d2v2 = fam.dv_dx(2, 2, x, s, omega)
        f4 = (
            (v4 / 24.0 - v2**2 / 4.0)[:, None] * g4
            - (v2 * dv2 / 2.0)[:, None] * g3
            - (v2 * d2v2 / 4.0)[:, None] * g2
        )
        terms.append(f4)
    return terms


class ScalarMomentFn:
    """A scalar building block u(x, s, theta) with analytic derivatives.

    Implementations provide ``value``, ``dx`` (k-th x-derivative), ``dtheta``
    ((n, p) gradient) and ``dx_dtheta`` (k-th x-derivative of the gradient),
    all vectorized over rows.
    """

    max_order: int = 6

    def value(self, x, s, theta) -> np.ndarray:
        raise NotImplementedError

    def dx(self, x, s, theta, k: int) -> np.ndarray:
        raise NotImplementedError

    def dtheta(self, x, s, theta) -> np.ndarray:
        raise NotImplementedError

    def dx_dtheta(self, x, s, theta, k: int) -> np.ndarray:
        raise NotImplementedError


def build_second_measurement_moments(
    u: ScalarMomentFn,
    dim_theta: int,
    J: int,
    q_column: str = "q",
) -> MomentSpec:
    """Stack u with powers of x and with the second measurement q.

    The resulting moment vector has m = 2J + 1 components: u * (1, x, ..,
    x^J)' followed by u * q * (1, x, .., x^{J-1})'.  The extra q-block is what
    identifies the error-variance nuisance; J must be at least dim(theta) - 1
    for the x-block to identify theta on its own.
    """
    if J < dim_theta - 1:
        raise MomentError(f"J = {J} too small; need J >= dim(theta) - 1 = {dim_theta - 1}")
    m = 2 * J + 1
    powers = list(range(J + 1)) + list(range(J))
    use_q = [False] * (J + 1) + [True] * J

    def xpow(x1, a, k):
        # k-th derivative of x**a
        if k > a:
            return np.zeros_like(x1)
        coef = math.prod(range(a - k + 1, a + 1))
        return coef * x1 ** (a - k)

    def col_factor(x1, qcol, k):
        cols = []
        for a, wq in zip(powers, use_q):
            c = xpow(x1, a, k)
            if wq:
                c = c * qcol
            cols.append(c)
        return np.column_stack(cols)

    def eval_fn(x, s, theta):
        x1 = x[:, 0]
        qcol = s[q_column]
        return u.value(x, s, theta)[:, None] * col_factor(x1, qcol, 0)

    def deriv_x_fn(x, s, theta, kappa):
        k = kappa.kappa[0]
        x1 = x[:, 0]
        qcol = s[q_column]
        out = np.zeros((x.shape[0], m))
        for j in range(k + 1):
            uj = u.value(x, s, theta) if j == 0 else u.dx(x, s, theta, j)
            out += math.comb(k, j) * uj[:, None] * col_factor(x1, qcol, k - j)
        return out

    def dtheta_fn(x, s, theta):
        x1 = x[:, 0]
        qcol = s[q_column]
        return u.dtheta(x, s, theta)[:, None, :] * col_factor(x1, qcol, 0)[:, :, None]

    def deriv_x_dtheta_fn(x, s, theta, kappa):
        k = kappa.kappa[0]
        x1 = x[:, 0]
        qcol = s[q_column]
        out = np.zeros((x.shape[0], m, theta.size))
        for j in range(k + 1):
            uj = u.dtheta(x, s, theta) if j == 0 else u.dx_dtheta(x, s, theta, j)
            out += math.comb(k, j) * uj[:, None, :] * col_factor(x1, qcol, k - j)[:, :, None]
        return out

    provider = AnalyticProvider(
        eval_fn, deriv_x_fn, max_order=u.max_order,
        dtheta_fn=dtheta_fn, deriv_x_dtheta_fn=deriv_x_dtheta_fn,
    )
    return MomentSpec(
        m=m, dim_theta=dim_theta, d=1, eval=eval_fn, deriv=provider,
        required_columns=(q_column,),
        meta={"second_measurement": {"u": u, "J": J, "q_column": q_column}},
    )


def build_affine_nonclassical_problem(
    g_spec: MomentSpec,
    mu_xstar: float,
    var_xstar: float,
) -> MomentSpec:
    """Augment a moment spec for affinely mismeasured covariates.

    The observed covariate is alpha_0 + alpha_1 * (true covariate) + noise;
    external summary statistics (mean, variance of the true covariate) pin
    down the affine map.  The returned spec evaluates the original moments at
    xt = (x - alpha_0)/alpha_1 and appends (xt - mu) and ((xt - mu)^2 -
    var); the parameter vector grows to (theta', alpha_0, alpha_1)'.
    """
    if var_xstar <= 0:
        raise MomentError("var_xstar must be positive")
    if g_spec.d != 1:
        raise MomentError("affine augmentation supports scalar x")
    p = g_spec.dim_theta
    m = g_spec.m + 2
    mu0, s20 = float(mu_xstar), float(var_xstar)

    def split(theta_ext):
        theta = theta_ext[:p]
        a0, a1 = theta_ext[p], theta_ext[p + 1]
        if a1 == 0.0:
            raise MomentError("alpha_1 must be bounded away from zero")
        return theta, a0, a1

    def xt_of(x, a0, a1):
        return (x - a0) / a1

    def eval_fn(x, s, theta_ext):
        theta, a0, a1 = split(theta_ext)
        xt = xt_of(x, a0, a1)
        g = g_spec.eval(xt, s, theta)
        dev = xt[:, 0] - mu0
        return np.column_stack([g, dev, dev**2 - s20])

    def deriv_x_fn(x, s, theta_ext, kappa):
        k = kappa.kappa[0]
        theta, a0, a1 = split(theta_ext)
        xt = xt_of(x, a0, a1)
        # chain rule: d^k/dx^k g((x - a0)/a1) = a1^-k * g^(k)(xt)
        gk = g_spec.deriv.deriv_x(xt, s, theta, kappa) / a1**k
        n = x.shape[0]
        dev = xt[:, 0] - mu0
        if k == 1:
            extra = np.column_stack([np.full(n, 1.0 / a1), 2.0 * dev / a1])
        elif k == 2:
            extra = np.column_stack([np.zeros(n), np.full(n, 2.0 / a1**2)])
        else:
            extra = np.zeros((n, 2))
        return np.concatenate([gk, extra], axis=1)

    def dtheta_fn(x, s, theta_ext):
        theta, a0, a1 = split(theta_ext)
        xt = xt_of(x, a0, a1)
        n = x.shape[0]
        dev = xt[:, 0] - mu0
        out = np.zeros((n, m, p + 2))
        out[:, : g_spec.m, :p] = g_spec.deriv.dtheta(xt, s, theta)
        g1 = g_spec.deriv.deriv_x(xt, s, theta, MultiIndex((1,)))
        # dxt/da0 = -1/a1, dxt/da1 = -xt/a1
        out[:, : g_spec.m, p] = g1 * (-1.0 / a1)
        out[:, : g_spec.m, p + 1] = g1 * (-xt[:, 0] / a1)[:, None]
        out[:, g_spec.m, p] = -1.0 / a1
        out[:, g_spec.m, p + 1] = -xt[:, 0] / a1
        out[:, g_spec.m + 1, p] = 2.0 * dev * (-1.0 / a1)
        out[:, g_spec.m + 1, p + 1] = 2.0 * dev * (-xt[:, 0] / a1)
        return out

    provider = AnalyticProvider(
        eval_fn, deriv_x_fn, max_order=g_spec.max_order, dtheta_fn=dtheta_fn,
    )
    return MomentSpec(
        m=m, dim_theta=p + 2, d=1, eval=eval_fn, deriv=provider,
        required_columns=g_spec.required_columns,
        meta={"affine_nonclassical": {"mu_xstar": mu0, "var_xstar": s20, "base": g_spec}},
    )
