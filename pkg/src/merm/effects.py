"""Post-estimation quantities: corrected average effects, bias bounds,
identification diagnostics, and delta-method inference."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import numdiff
from .dataset import Dataset
from .gamma import SchemeError, gaussian_moments, moments_from_gamma
from .gmm import EstimationResult, Problem, RankError, jacobian_psi
from .moments import DerivativeRequest, MomentError, MultiIndex


@dataclass(frozen=True)
class EffectSpec:
    """A smooth per-observation functional lambda(x, s, theta).

    ``value`` returns (n,) or (n, q); ``dx`` its k-th derivative in the
    mismeasured coordinate (same shape); ``dtheta`` the theta-gradient with a
    trailing parameter axis.  Missing closures fall back to finite
    differences on ``value``.
    """

    value: Callable
    dx: Optional[Callable] = None
    dtheta: Optional[Callable] = None
    max_order: int = 6

    def dx_eval(self, x, s, theta, k: int):
        if k == 0:
            return self.value(x, s, theta)
        if k > self.max_order:
            raise MomentError(f"effect derivative order {k} unsupported")
        if self.dx is not None:
            return self.dx(x, s, theta, k)
        return numdiff.derivative_x(lambda xx: self.value(xx, s, theta), x, (k,))

    def dtheta_eval(self, x, s, theta):
        if self.dtheta is not None:
            return self.dtheta(x, s, theta)
        return numdiff.jacobian(lambda t: np.asarray(self.value(x, s, t)), theta)


@dataclass(frozen=True)
class AverageEffect:
    point: np.ndarray
    se: np.ndarray
    naive: np.ndarray

    def as_dict(self):
        return {
            "point": self.point.tolist(),
            "se": self.se.tolist(),
            "naive": self.naive.tolist(),
        }


def average_effect_corrected(
    effect: EffectSpec, result: EstimationResult, problem: Problem
) -> AverageEffect:
    """Bias-corrected sample-average effect and its standard error.

    The corrected average subtracts the nuisance-weighted derivative terms
    from each observation's effect, mirroring the corrected moments; the
    standard error combines the sampling variance of the averaged rows with
    the estimation error of beta_hat through the GMM influence function.
    """
    scheme = problem.scheme
    if scheme.regime == "weakly_classical":
        raise SchemeError("average effects require a classical correction scheme")
    data = problem.data
    theta = result.theta
    gamma = result.beta_hat.gamma()

    def corrected_rows(th, nuis_values):
        rows = np.asarray(effect.value(data.x, data.s, th), dtype=float)
        if rows.ndim == 1:
            rows = rows[:, None]
        for kappa, gk in zip(scheme.kappas(), nuis_values):
            if gk == 0.0:
                continue
            dk = np.asarray(effect.dx_eval(data.x, data.s, th, kappa.order), dtype=float)
            if dk.ndim == 1:
                dk = dk[:, None]
            rows = rows - gk * dk
        return rows

    rows = corrected_rows(theta, gamma.values)
    point = rows.mean(axis=0)
    naive_rows = np.asarray(effect.value(data.x, data.s, theta), dtype=float)
    if naive_rows.ndim == 1:
        naive_rows = naive_rows[:, None]
    naive = naive_rows.mean(axis=0)

    # influence of beta_hat: -(Psi' Xi Psi)^-1 Psi' Xi psi_i
    Psi = jacobian_psi(problem, result.beta_hat)
    Xi = result.weighting_used
    B = Psi.T @ Xi @ Psi
    psi_rows = problem.psi_rows(theta, result.nuisance)
    IF = -np.linalg.solve(B, Psi.T @ Xi @ psi_rows.T).T  # (n, dim_beta)

    def mean_of_beta(beta_vec):
        th = beta_vec[: theta.size]
        nu = beta_vec[theta.size :]
        return corrected_rows(th, nu).mean(axis=0)

    L = numdiff.jacobian(mean_of_beta, result.beta_hat.packed)  # (q, dim_beta)
    phi = (rows - point) + IF @ L.T
    var = phi.T @ phi / data.n
    se = np.sqrt(np.maximum(np.diag(np.atleast_2d(var)), 0.0) / data.n)
    return AverageEffect(point=point, se=se, naive=naive)


@dataclass(frozen=True)
class BiasBoundReport:
    """Range of the residual higher-order bias of v'beta_hat."""

    b_v: float
    Kbar: int
    interval: tuple[float, float]
    ratio_to_se: tuple[float, float]
    kurtosis_bound: Optional[float]
    se_v: float
    assumption: str

    def as_dict(self):
        return {
            "b_v": self.b_v,
            "Kbar": self.Kbar,
            "interval": list(self.interval),
            "ratio_to_se": list(self.ratio_to_se),
            "kurtosis_bound": self.kurtosis_bound,
            "se_v": self.se_v,
            "assumption": self.assumption,
        }


def _bias_multiplier(problem: Problem, result: EstimationResult, v: np.ndarray, kbar: int) -> float:
    """b_v = -v' (Psi'XiPsi)^-1 Psi'Xi mean(g_x^(Kbar))."""
    Psi = jacobian_psi(problem, result.beta_hat)
    Xi = result.weighting_used
    B = Psi.T @ Xi @ Psi
    from .moments import derivative_x

    gk = derivative_x(
        problem.spec, problem.data, result.theta, DerivativeRequest(MultiIndex((kbar,)))
    ).mean(axis=0)
    return float(-v @ np.linalg.solve(B, Psi.T @ Xi @ gk))


def bias_bound(
    problem: Problem,
    result: EstimationResult,
    v: np.ndarray,
    kurtosis_bound: float | None = None,
    symmetric_eps: bool = True,
    assumption: str = "bounded",
) -> BiasBoundReport:
    """Bound the residual bias of v'beta_hat left after an order-K correction.

    The leading omitted term is gamma_{Kbar} times an estimable multiplier,
    with Kbar = K + 2 for even K and symmetric errors, K + 1 otherwise.  Under
    ``assumption="bounded"`` the unknown standardized moment E[(eps/sigma)^Kbar]
    ranges over the Cauchy-Schwarz-floored interval capped by
    ``kurtosis_bound``; under ``assumption="gaussian"`` it is pinned at the
    normal value and the interval collapses to a point.
    """
    scheme = problem.scheme
    if scheme.regime != "classical_scalar":
        raise SchemeError("bias bounds are defined for the scalar classical scheme")
    K = scheme.K
    kbar = K + 2 if (K % 2 == 0 and symmetric_eps) else K + 1
    if problem.spec.max_order < kbar:
        raise MomentError(
            f"derivative provider supports order {problem.spec.max_order}, bound needs {kbar}"
        )
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape != (result.beta_hat.packed.size,):
        raise MomentError("v has the wrong length for beta")
    bbar = _bias_multiplier(problem, result, v, kbar)
    Sigma = result.Sigma_hat
    se_v = float(np.sqrt(max(v @ Sigma @ v, 0.0) / problem.n))

    gamma_hat = result.beta_hat.gamma()
    mu_hat = moments_from_gamma(gamma_hat)
    sigma2 = max(mu_hat.get(MultiIndex((2,))), 0.0)
    sigma = math.sqrt(sigma2)

    if K == 2 and symmetric_eps and assumption == "bounded":
        # closed form through the kurtosis: gamma_4 in [-5/6, (kbar-6)/6] * gamma_2^2
        if kurtosis_bound is None:
            raise MomentError("kurtosis_bound required for the bounded K=2 case")
        if kurtosis_bound < 1.0:
            raise MomentError("kurtosis bound below the Cauchy-Schwarz floor of 1")
        g2 = float(gamma_hat.values[0])
        lo_g4 = -5.0 / 6.0 * g2**2
        hi_g4 = (kurtosis_bound - 6.0) / 6.0 * g2**2
        ends = sorted((bbar * lo_g4, bbar * hi_g4))
        interval = (ends[0], ends[1])
    else:
        # general route: range of the standardized Kbar-th moment
        lower_terms = 0.0  # sum over splits involving known low-order parts
        gam = {kap.kappa[0]: float(val) for kap, val in gamma_hat.items()}
        mu_ext = {k: mu_hat.get(MultiIndex((k,))) for k in range(2, K + 1)}
        for ell in range(2, kbar - 1):
            mu_rest = mu_ext.get(kbar - ell)
            if mu_rest is None:
                # moments above K are not identified from gamma_hat; symmetric
                # errors zero the odd ones, otherwise the term is dropped
                mu_rest = 0.0
            g_ell = gam.get(ell)
            if g_ell is None:
                g_ell = 0.0
            lower_terms += mu_rest / math.factorial(kbar - ell) * g_ell
        if assumption == "gaussian":
            t = 0.0 if kbar % 2 else float(math.prod(range(kbar - 1, 0, -2)))
            t_lo = t_hi = t
            kurt = None
        else:
            if kurtosis_bound is None:
                raise MomentError("kurtosis_bound required for the bounded case")
            if kurtosis_bound < 1.0:
                raise MomentError("kurtosis bound below the Cauchy-Schwarz floor of 1")
            kurt = float(kurtosis_bound)
            t_lo, t_hi = (1.0, kurt) if kbar % 2 == 0 else (-kurt, kurt)
        ends = sorted(
            bbar * (sigma**kbar * t / math.factorial(kbar) - lower_terms)
            for t in (t_lo, t_hi)
        )
        interval = (ends[0], ends[1])
        kurtosis_bound = kurt if assumption != "gaussian" else None

    ratio = tuple(e / se_v if se_v > 0 else math.inf * np.sign(e) if e else 0.0 for e in interval)
    return BiasBoundReport(
        b_v=bbar,
        Kbar=kbar,
        interval=interval,
        ratio_to_se=(float(ratio[0]), float(ratio[1])),
        kurtosis_bound=kurtosis_bound,
        se_v=se_v,
        assumption=assumption,
    )


@dataclass(frozen=True)
class RankDiagnostics:
    singular_values: np.ndarray
    full_rank: bool
    condition_flagged: bool
    second_measurement_stat: Optional[np.ndarray]
    second_measurement_norm: Optional[float]
    second_measurement_flag: Optional[bool]

    def as_dict(self):
        return {
            "singular_values": self.singular_values.tolist(),
            "full_rank": self.full_rank,
            "condition_flagged": self.condition_flagged,
            "second_measurement_stat": (
                None
                if self.second_measurement_stat is None
                else self.second_measurement_stat.tolist()
            ),
            "second_measurement_norm": self.second_measurement_norm,
            "second_measurement_flag": self.second_measurement_flag,
        }


def rank_diagnostics(
    problem: Problem, result: EstimationResult, zero_tol: float = 1e-6
) -> RankDiagnostics:
    """Identification diagnostics from the Jacobian spectrum.

    Reports the raw singular values of the moment Jacobian and flags
    near-rank-deficiency on its row-equilibrated version (so the flag is
    invariant to rescaling individual moments).  For second-measurement
    problems, also evaluates the sample analog of the sufficient-condition
    vector E[u_x^(1) (1, X, .., X^{J-1})'], which must be nonzero for the
    nuisance to be identified.
    """
    Psi = jacobian_psi(problem, result.beta_hat)
    sv = np.linalg.svd(Psi, compute_uv=False)
    norms = np.linalg.norm(Psi, axis=1, keepdims=True)
    scaled = np.divide(Psi, norms, out=np.zeros_like(Psi), where=norms > 0)
    sv_scaled = np.linalg.svd(scaled, compute_uv=False)
    flagged = bool(sv_scaled[-1] < 1e-6 * sv_scaled[0])
    stat = norm = flag = None
    meta = problem.spec.meta.get("second_measurement")
    if meta is not None:
        u = meta["u"]
        J = meta["J"]
        x1 = problem.data.x[:, 0]
        du = u.dx(problem.data.x, problem.data.s, result.theta, 1)
        powers = np.column_stack([x1**j for j in range(J)])
        stat = (du[:, None] * powers).mean(axis=0)
        norm = float(np.max(np.abs(stat)))
        scale = float(np.mean(np.abs(du))) + 1.0
        flag = bool(norm < zero_tol * scale)
    return RankDiagnostics(
        singular_values=sv,
        full_rank=not flagged,
        condition_flagged=flagged,
        second_measurement_stat=stat,
        second_measurement_norm=norm,
        second_measurement_flag=flag,
    )


_Z975 = 1.959964


@dataclass(frozen=True)
class DeltaMethodResult:
    point: float
    se: float
    t_stat: float
    ci: tuple[float, float]

    def as_dict(self):
        return {"point": self.point, "se": self.se, "t": self.t_stat, "ci": list(self.ci)}


def delta_method(
    result: EstimationResult,
    functional: Callable[[np.ndarray], float],
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> DeltaMethodResult:
    """Inference on a smooth scalar function of beta_hat.

    se = sqrt(grad' Sigma grad / n); the 95% confidence interval uses the
    normal quantile 1.959964.
    """
    beta = result.beta_hat.packed
    point = float(functional(beta))
    if gradient is not None:
        grad = np.asarray(gradient(beta), dtype=float).reshape(-1)
    else:
        grad = numdiff.jacobian(lambda b: np.array([functional(b)]), beta)[0]
    if not np.all(np.isfinite(grad)):
        raise MomentError("non-finite gradient in delta method")
    var = float(grad @ result.Sigma_hat @ grad)
    se = math.sqrt(max(var, 0.0) / result.n)
    t = point / se if se > 0 else math.inf * np.sign(point) if point else 0.0
    return DeltaMethodResult(
        point=point, se=se, t_stat=float(t), ci=(point - _Z975 * se, point + _Z975 * se)
    )
