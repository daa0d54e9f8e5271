"""GMM estimation on corrected moments with analytic nuisance profiling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Optional

import numpy as np
import scipy.optimize
import scipy.stats

from . import numdiff
from .corrected import corrected_moment
from .dataset import Dataset
from .gamma import CorrectionScheme, GammaVector, SchemeError
from .moments import DerivativeRequest, MomentError, MomentSpec, MultiIndex


class EstimationError(RuntimeError):
    """Numerical failure during estimation (no start converged, etc.)."""


class RankError(EstimationError):
    """Rank deficiency signalling weak identification of the nuisance block."""


_PENALTY = 1e50


@dataclass(frozen=True)
class Problem:
    """A moment spec, a correction scheme and the data they act on."""

    spec: MomentSpec
    scheme: CorrectionScheme
    data: Dataset

    def __post_init__(self):
        if self.scheme.regime != "weakly_classical" and self.scheme.d != self.spec.d:
            raise SchemeError(
                f"scheme has d={self.scheme.d}, spec has d={self.spec.d}"
            )
        need = self.spec.dim_theta + self.scheme.nuisance_dim
        if self.spec.m < need:
            raise SchemeError(
                f"overidentification violated: m={self.spec.m} < dim(theta) + "
                f"nuisance = {need}"
            )
        if self.spec.max_order < self.scheme.K:
            raise MomentError(
                f"derivative provider supports order {self.spec.max_order}, "
                f"scheme needs {self.scheme.K}"
            )

    @property
    def n(self) -> int:
        return self.data.n

    @property
    def m(self) -> int:
        return self.spec.m

    @property
    def dim_beta(self) -> int:
        return self.spec.dim_theta + self.scheme.nuisance_dim

    def psi_rows(self, theta: np.ndarray, nuisance) -> np.ndarray:
        return corrected_moment(self.spec, self.scheme, self.data, theta, nuisance)

    def g_rows(self, theta: np.ndarray) -> np.ndarray:
        from .moments import evaluate_moments

        return evaluate_moments(self.spec, self.data, theta)

    def deriv_columns(self, theta: np.ndarray) -> np.ndarray:
        """Means of the derivative terms, one column per nuisance coefficient."""
        cols = []
        from .moments import derivative_x

        for kappa in self.scheme.kappas():
            rows = derivative_x(self.spec, self.data, theta, DerivativeRequest(kappa))
            cols.append(rows.mean(axis=0))
        return np.column_stack(cols)


@dataclass(frozen=True)
class WeightingPolicy:
    """Weighting matrix recipe for the quadratic GMM objective.

    ``identity`` uses I_m; ``two_step_eff`` inverts the corrected-moment
    second-moment matrix at a pilot (theta, nuisance); ``two_step_eff_regularized``
    inverts it at (pilot theta, 0), which coincides with the raw-moment
    second-moment matrix; ``cue_regularized`` does the same continuously in
    theta, keeping the objective quadratic in the nuisance.
    """

    tag: str = "two_step_eff_regularized"
    first_stage: Optional["WeightingPolicy"] = None

    _TAGS = ("identity", "two_step_eff", "two_step_eff_regularized", "cue_regularized")

    def __post_init__(self):
        if self.tag not in self._TAGS:
            raise ValueError(f"unknown weighting tag {self.tag!r}")
        if self.first_stage is None:
            if self.tag == "two_step_eff_regularized":
                # recommended pipeline: the pilot is the one-step estimate
                # weighted by the raw-moment second-moment inverse at the
                # naive theta; an identity first stage instead takes the
                # naive theta itself as the pilot
                object.__setattr__(
                    self,
                    "first_stage",
                    WeightingPolicy(
                        "two_step_eff_regularized", first_stage=WeightingPolicy("identity")
                    ),
                )
            elif self.tag == "two_step_eff":
                object.__setattr__(self, "first_stage", WeightingPolicy("identity"))


@dataclass(frozen=True)
class ParameterVector:
    """Packed parameters beta = (theta', nuisance')', theta first."""

    theta: np.ndarray
    nuisance: np.ndarray
    scheme: CorrectionScheme

    def __post_init__(self):
        th = np.atleast_1d(np.asarray(self.theta, dtype=float)).copy()
        nu = np.asarray(self.nuisance, dtype=float).reshape(-1).copy()
        if nu.shape != (self.scheme.nuisance_dim,):
            raise SchemeError(
                f"nuisance has shape {nu.shape}, scheme needs ({self.scheme.nuisance_dim},)"
            )
        th.setflags(write=False)
        nu.setflags(write=False)
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "nuisance", nu)

    @property
    def packed(self) -> np.ndarray:
        return np.concatenate([self.theta, self.nuisance])

    def gamma(self) -> GammaVector:
        return GammaVector(self.scheme, self.nuisance)

    def labels(self) -> tuple[str, ...]:
        return tuple(f"theta{i+1}" for i in range(self.theta.size)) + self.scheme.nuisance_labels()


@dataclass(frozen=True)
class JTest:
    statistic: float
    dof: int
    p_value: float


@dataclass(frozen=True)
class EstimationResult:
    beta_hat: ParameterVector
    Sigma_hat: np.ndarray
    std_errors: np.ndarray
    objective_value: float
    converged: bool
    iterations: int
    weighting_used: np.ndarray
    n: int
    m: int
    j_stat: Optional[JTest] = None
    policy_tag: str = "identity"
    diagnostics: Mapping[str, Any] = field(default_factory=dict)

    @property
    def theta(self) -> np.ndarray:
        return self.beta_hat.theta

    @property
    def nuisance(self) -> np.ndarray:
        return self.beta_hat.nuisance

    def se(self, label_or_index) -> float:
        if isinstance(label_or_index, str):
            idx = self.beta_hat.labels().index(label_or_index)
        else:
            idx = int(label_or_index)
        return float(self.std_errors[idx])


@dataclass(frozen=True)
class EstimatorConfig:
    """Optimizer and weighting settings for :func:`estimate`."""

    policy: WeightingPolicy = WeightingPolicy()
    starts: int = 5
    jitter: float = 0.1
    max_iter: int = 500
    gtol: float = 1e-8
    xtol: float = 1e-10
    seed: int = 0
    theta_start: Optional[np.ndarray] = None
    restrict_gamma: bool = False
    polish: bool = True


def symmetric_inverse(
    a: np.ndarray, cond_limit: float = 1e12
) -> tuple[np.ndarray, bool]:
    """Inverse of a symmetric PSD matrix via eigendecomposition.

    If the condition number exceeds ``cond_limit`` a ridge of
    1e-10 * trace/m is added first; the flag reports whether the ridge was
    applied.  Raises :class:`EstimationError` if the matrix stays singular.
    """
    a = 0.5 * (a + a.T)
    m = a.shape[0]
    w, v = np.linalg.eigh(a)
    ridge_used = False
    wmax = float(np.max(np.abs(w))) if m else 0.0
    if wmax == 0.0:
        raise EstimationError("weighting target matrix is zero")
    if np.min(w) <= 0 or wmax / max(np.min(w), 1e-300) > cond_limit:
        ridge = 1e-10 * np.trace(a) / m
        if ridge <= 0:
            ridge = 1e-10 * wmax
        a = a + ridge * np.eye(m)
        w, v = np.linalg.eigh(a)
        ridge_used = True
        if np.min(w) <= 0 or np.max(w) / max(np.min(w), 1e-300) > 1e3 * cond_limit:
            raise EstimationError("matrix numerically singular after ridge escalation")
    inv = v @ np.diag(1.0 / w) @ v.T
    return 0.5 * (inv + inv.T), ridge_used


def _solve_psd_checked(A: np.ndarray, B: np.ndarray, context: str, tol: float = 1e-13):
    """Solve A X = B for symmetric PSD A with a scale-free rank check.

    The matrix is Jacobi-equilibrated first, so honest unit disparities do not
    masquerade as rank deficiency; a genuinely collinear system still raises.
    """
    A = 0.5 * (A + A.T)
    d = np.sqrt(np.abs(np.diag(A)))
    if np.any(d == 0.0):
        raise RankError(context)
    As = A / np.outer(d, d)
    w = np.linalg.eigvalsh(As)
    if w[0] <= tol * max(w[-1], 1.0):
        raise RankError(context)
    y = np.linalg.solve(As, B / d[:, None] if B.ndim == 2 else B / d)
    return y / d[:, None] if B.ndim == 2 else y / d


def gmm_objective(psi_bar: np.ndarray, Xi: np.ndarray) -> float:
    """Quadratic form psi_bar' Xi psi_bar."""
    psi_bar = np.asarray(psi_bar, dtype=float).reshape(-1)
    Xi = np.asarray(Xi, dtype=float)
    if Xi.shape != (psi_bar.size, psi_bar.size):
        raise MomentError(f"Xi has shape {Xi.shape}, expected {(psi_bar.size,) * 2}")
    return float(psi_bar @ Xi @ psi_bar)


def omega_psi(problem: Problem, theta: np.ndarray, nuisance) -> np.ndarray:
    """Second-moment matrix of the corrected moment rows at (theta, nuisance)."""
    rows = problem.psi_rows(theta, nuisance)
    return rows.T @ rows / problem.n


def omega_gg(problem: Problem, theta: np.ndarray) -> np.ndarray:
    rows = problem.g_rows(theta)
    return rows.T @ rows / problem.n


def _project_gamma(scheme: CorrectionScheme, gamma: np.ndarray) -> tuple[np.ndarray, bool]:
    """Project onto sigma^2 >= 0 and E[eps^4] >= sigma^4 (scalar scheme)."""
    if scheme.regime != "classical_scalar":
        return gamma, False
    out = gamma.copy()
    hit = False
    if out[0] < 0.0:
        out[0] = 0.0
        hit = True
    if scheme.K >= 4:
        floor = -5.0 / 6.0 * out[0] ** 2
        if out[2] < floor:
            out[2] = floor
            hit = True
    return out, hit


def _mean_dtheta(deriv, x, s, theta) -> np.ndarray:
    fn = getattr(deriv, "mean_dtheta", None)
    if fn is not None:
        return np.asarray(fn(x, s, theta))
    return np.asarray(deriv.dtheta(x, s, theta)).mean(axis=0)


def _mean_deriv_x_dtheta(deriv, x, s, theta, kappa) -> np.ndarray:
    fn = getattr(deriv, "mean_deriv_x_dtheta", None)
    if fn is not None:
        return np.asarray(fn(x, s, theta, kappa))
    return np.asarray(deriv.deriv_x_dtheta(x, s, theta, kappa)).mean(axis=0)


def _theta_jacobian_block(problem: Problem, theta: np.ndarray, gamma_values) -> np.ndarray:
    """Mean theta-Jacobian of the corrected moment at (theta, gamma)."""
    spec, data = problem.spec, problem.data
    jac = np.array(_mean_dtheta(spec.deriv, data.x, data.s, theta))
    for kappa, gk in zip(problem.scheme.kappas(), gamma_values):
        if gk != 0.0:
            jac -= gk * _mean_deriv_x_dtheta(spec.deriv, data.x, data.s, theta, kappa)
    return jac


class _ProfiledObjective:
    """Profiled GMM objective with its envelope gradient, cached per theta.

    With the nuisance at its analytic optimum, the total derivative in theta
    reduces to the partial derivative at fixed gamma:
    grad = 2 * J_theta' Xi resid.  Only valid for a theta-free weighting and
    non-binding restrictions.
    """

    def __init__(self, problem: Problem, Xi: np.ndarray, restrict: bool = False):
        self.problem = problem
        self.Xi = Xi
        self.restrict = restrict
        self._key = None
        self._state = None

    def _compute(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=float)
        key = theta.tobytes()
        if key != self._key:
            gamma, val, flag, resid = _profile_parts(theta, self.Xi, self.problem, self.restrict)
            self._key = key
            self._state = (theta.copy(), gamma, val, flag, resid)
        return self._state

    def value(self, theta) -> float:
        return self._compute(theta)[2]

    def gradient(self, theta) -> np.ndarray:
        th, gamma, _, flag, resid = self._compute(theta)
        jac = _theta_jacobian_block(self.problem, th, gamma)
        return 2.0 * (jac.T @ self.Xi @ resid)


def _profile_parts(theta, Xi, problem, restrict):
    gbar = problem.g_rows(theta).mean(axis=0)
    D = problem.deriv_columns(theta)
    A = D.T @ Xi @ D
    b = D.T @ Xi @ gbar
    gamma = _solve_psd_checked(
        A, b, "derivative columns are rank deficient; gamma weakly identified",
        tol=1e-14,
    )
    flag = False
    if restrict:
        gamma, flag = _project_gamma(problem.scheme, gamma)
    resid = gbar - D @ gamma
    return gamma, float(resid @ Xi @ resid), flag, resid


def profile_gamma(
    theta: np.ndarray,
    Xi: np.ndarray,
    problem: Problem,
    restrict: bool = False,
) -> tuple[np.ndarray, float, bool]:
    """Analytic nuisance minimizer and the profiled objective value.

    The corrected mean is linear in gamma, so given theta the optimal gamma
    solves a weighted least-squares problem in the derivative-mean columns.
    Returns (gamma_hat, objective, restriction_flag).  Raises
    :class:`RankError` when the derivative columns are collinear under Xi.
    """
    if problem.scheme.regime == "weakly_classical":
        raise SchemeError("profiling requires a regime linear in the nuisance")
    gamma, val, flag, _ = _profile_parts(theta, Xi, problem, restrict)
    return gamma, val, flag


def weighting_matrix(
    policy: WeightingPolicy,
    problem: Problem,
    pilot: Optional[ParameterVector] = None,
    config: Optional["EstimatorConfig"] = None,
):
    """Resolve a weighting policy into a matrix (or theta -> matrix map).

    Two-step tags need a pilot (theta, nuisance).  When none is given, it is
    built from the first-stage policy: an identity first stage takes the
    naive theta at zero nuisance, anything else runs a one-step estimate
    under the recursively resolved first-stage weighting.  Returns
    ``(Xi, diagnostics)`` with Xi an (m, m) array, or a callable of theta for
    the CUE tag.
    """
    m = problem.m
    diag: dict[str, Any] = {"policy": policy.tag}
    if policy.tag == "identity":
        return np.eye(m), diag
    if policy.tag == "cue_regularized":
        def Xi_of_theta(theta: np.ndarray) -> np.ndarray:
            inv, _ = symmetric_inverse(omega_gg(problem, theta))
            return inv
        return Xi_of_theta, diag

    cfg = config or EstimatorConfig()
    if pilot is not None:
        theta_tilde = pilot.theta
        nuis = pilot.nuisance
    else:
        first = policy.first_stage or WeightingPolicy("identity")
        if first.tag == "identity":
            theta_tilde = _naive_theta(problem, cfg)
            nuis = np.zeros(problem.scheme.nuisance_dim)
        else:
            Xi1, d1 = weighting_matrix(first, problem, None, cfg)
            if callable(Xi1):
                raise EstimationError("first-stage policy must resolve to a matrix")
            theta_tilde, nuis = _one_step(problem, Xi1, _naive_theta(problem, cfg), cfg)
            diag["first_stage"] = d1
    diag["pilot_theta"] = np.asarray(theta_tilde).tolist()

    if policy.tag == "two_step_eff_regularized":
        # Omega_psi(theta, 0) equals Omega_gg(theta): zero nuisance kills the
        # correction terms.
        omega = omega_gg(problem, theta_tilde)
    else:  # two_step_eff
        omega = omega_psi(problem, theta_tilde, nuis)
    Xi, ridge_used = symmetric_inverse(omega)
    diag["ridge_used"] = ridge_used
    return Xi, diag


def _safe(fn: Callable[[np.ndarray], float]) -> Callable[[np.ndarray], float]:
    def wrapped(x):
        try:
            with np.errstate(all="ignore"):
                val = fn(x)
        except (MomentError, RankError, FloatingPointError, np.linalg.LinAlgError):
            return _PENALTY
        if not np.isfinite(val):
            return _PENALTY
        return val

    return wrapped


def _safe_grad(fn, dim) -> Callable[[np.ndarray], np.ndarray]:
    # a zero gradient at penalty points keeps line searches from accepting
    # them (the Armijo test already rejects on the value)
    def wrapped(x):
        try:
            with np.errstate(all="ignore"):
                g = np.asarray(fn(x), dtype=float)
        except (MomentError, RankError, FloatingPointError, np.linalg.LinAlgError):
            return np.zeros(dim)
        if not np.all(np.isfinite(g)):
            return np.zeros(dim)
        return g

    return wrapped


def _minimize_multi(
    objective: Callable[[np.ndarray], float],
    start: np.ndarray,
    cfg: EstimatorConfig,
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> tuple[np.ndarray, float, bool, int]:
    """Deterministic multi-start quasi-Newton with a polytope fallback.

    Starts are the supplied point plus (starts - 1) jittered copies; the
    winner is picked by objective value with a lexicographic tie-break so the
    result does not depend on evaluation order.
    """
    f = _safe(objective)
    jac = _safe_grad(grad, start.size) if grad is not None else None
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(cfg.seed)))
    starts = [np.asarray(start, dtype=float)]
    scale = cfg.jitter * np.maximum(1.0, np.abs(start))
    for _ in range(max(0, cfg.starts - 1)):
        starts.append(start + scale * rng.standard_normal(start.size))

    best = None
    total_iter = 0
    for s in starts:
        res = scipy.optimize.minimize(
            f, s, method="BFGS", jac=jac,
            options={"gtol": cfg.gtol, "maxiter": cfg.max_iter},
        )
        total_iter += int(res.nit)
        cand_x, cand_f = res.x, float(res.fun)
        # BFGS reports "precision loss" at machine-accurate minima; only fall
        # back to the polytope when the gradient is genuinely large
        grad_big = (
            res.jac is not None
            and np.all(np.isfinite(res.jac))
            and np.max(np.abs(res.jac)) > 1e-4 * (1.0 + abs(cand_f))
        )
        if cfg.polish and (cand_f >= _PENALTY or (not res.success and grad_big)):
            res2 = scipy.optimize.minimize(
                f, cand_x, method="Nelder-Mead",
                options={
                    "maxiter": 150 * start.size,
                    "xatol": 1e-8,
                    "fatol": 1e-12,
                },
            )
            total_iter += int(res2.nit)
            if float(res2.fun) < cand_f:
                cand_x, cand_f = res2.x, float(res2.fun)
        key = (cand_f, tuple(cand_x))
        if best is None or key < best[0]:
            best = (key, cand_x, cand_f)
    if best is None or best[2] >= _PENALTY:
        raise EstimationError("no optimizer start converged")
    x, fval = best[1], best[2]
    gvec = jac(x) if jac is not None else numdiff.jacobian(lambda t: np.array([f(t)]), x)[0]
    converged = bool(np.max(np.abs(gvec)) <= max(cfg.gtol * 100 * (1.0 + abs(fval)), 1e-6))
    return x, fval, converged, total_iter


def _naive_theta(problem: Problem, cfg: EstimatorConfig) -> np.ndarray:
    """Naive pilot theta: a supplied start is taken as the naive estimate;
    otherwise GMM on the raw moments at gamma = 0 with identity weighting."""
    if cfg.theta_start is not None:
        return np.atleast_1d(np.asarray(cfg.theta_start, dtype=float))

    def q(theta):
        gbar = problem.g_rows(theta).mean(axis=0)
        return float(gbar @ gbar)

    def dq(theta):
        gbar = problem.g_rows(theta).mean(axis=0)
        jac = _mean_dtheta(problem.spec.deriv, problem.data.x, problem.data.s, theta)
        return 2.0 * (jac.T @ gbar)

    start = np.zeros(problem.spec.dim_theta)
    theta, _, _, _ = _minimize_multi(
        q, start, replace(cfg, starts=max(1, cfg.starts - 2)), grad=dq
    )
    return theta


def _one_step(problem, Xi, theta_start, cfg):
    """One estimation pass under a fixed weighting, for pilot construction."""
    if problem.scheme.regime == "weakly_classical":
        dim_t = problem.spec.dim_theta
        start = np.concatenate([theta_start, np.zeros(problem.scheme.nuisance_dim)])

        def q(beta_vec):
            psi = problem.psi_rows(beta_vec[:dim_t], beta_vec[dim_t:]).mean(axis=0)
            return gmm_objective(psi, Xi)

        beta_vec, _, _, _ = _minimize_multi(q, start, replace(cfg, starts=1))
        return beta_vec[:dim_t], beta_vec[dim_t:]

    obj = _ProfiledObjective(problem, Xi, cfg.restrict_gamma)
    grad = None if cfg.restrict_gamma else obj.gradient
    theta, _, _, _ = _minimize_multi(obj.value, theta_start, replace(cfg, starts=1), grad=grad)
    gamma, _, _ = profile_gamma(theta, Xi, problem, cfg.restrict_gamma)
    return theta, gamma


def jacobian_psi(problem: Problem, beta: ParameterVector) -> np.ndarray:
    """Sample Jacobian of the mean corrected moment in (theta, nuisance).

    The theta block differentiates each term analytically through the
    derivative provider; the nuisance block is minus the derivative-term means
    (classical) or central differences in omega (weakly classical).
    """
    spec, scheme, data = problem.spec, problem.scheme, problem.data
    theta = beta.theta
    if scheme.regime != "weakly_classical":
        theta_block = _theta_jacobian_block(problem, theta, beta.nuisance)
        from .moments import derivative_x

        gamma_cols = [
            -derivative_x(problem.spec, data, theta, DerivativeRequest(kappa)).mean(axis=0)
            for kappa in scheme.kappas()
        ]
        return np.column_stack([theta_block] + gamma_cols)

    # weakly classical: analytic theta block, numeric omega block
    omega = beta.nuisance
    fam = scheme.v_family
    x, s = data.x, data.s
    theta_block = np.array(_mean_dtheta(spec.deriv, x, s, theta))

    def G(k):
        return spec.deriv.deriv_x_dtheta(x, s, theta, MultiIndex((k,)))

    v2 = fam.v(2, x, s, omega)
    theta_block -= ((v2 / 2.0)[:, None, None] * G(2)).mean(axis=0)
    if scheme.K >= 3:
        v3 = fam.v(3, x, s, omega)
        theta_block -= ((v3 / 6.0)[:, None, None] * G(3)).mean(axis=0)
    if scheme.K >= 4:
        v4 = fam.v(4, x, s, omega)
        dv2 = fam.dv_dx(2, 1, x, s, omega)
        d2v2 = fam.dv_dx(2, 2, x, s, omega)
        theta_block -= (
            ((v4 / 24.0 - v2**2 / 4.0)[:, None, None] * G(4)).mean(axis=0)
            - ((v2 * dv2 / 2.0)[:, None, None] * G(3)).mean(axis=0)
            - ((v2 * d2v2 / 4.0)[:, None, None] * G(2)).mean(axis=0)
        )

    def psibar_of_omega(om):
        return problem.psi_rows(theta, om).mean(axis=0)

    omega_block = numdiff.jacobian(psibar_of_omega, omega)
    return np.concatenate([theta_block, omega_block], axis=1)


def sandwich_variance(
    problem: Problem, beta_hat: ParameterVector, Xi: np.ndarray
) -> np.ndarray:
    """(Psi' Xi Psi)^-1 Psi' Xi Omega Xi Psi (Psi' Xi Psi)^-1, symmetrized."""
    Psi = jacobian_psi(problem, beta_hat)
    Omega = omega_psi(problem, beta_hat.theta, beta_hat.nuisance)
    B = Psi.T @ Xi @ Psi
    meat = Psi.T @ Xi @ Omega @ Xi @ Psi
    inner = _solve_psd_checked(
        B, meat, "bread matrix Psi'XiPsi is singular; weak identification"
    )
    sigma = _solve_psd_checked(
        B, inner.T, "bread matrix Psi'XiPsi is singular; weak identification"
    )
    return 0.5 * (sigma + sigma.T)


def j_test(result: EstimationResult) -> JTest:
    """Overidentifying-restrictions statistic n * Q(beta_hat), chi-square dof m - dim(beta)."""
    if result.policy_tag not in ("two_step_eff", "two_step_eff_regularized", "cue_regularized"):
        raise EstimationError("J-test requires an efficient or CUE-regularized weighting")
    dof = result.m - result.beta_hat.packed.size
    if dof < 1:
        raise EstimationError("model is just identified; J-test undefined (dof = 0)")
    stat = result.n * result.objective_value
    return JTest(statistic=float(stat), dof=int(dof), p_value=float(scipy.stats.chi2.sf(stat, dof)))


def estimate(problem: Problem, config: EstimatorConfig | None = None) -> EstimationResult:
    """Minimize the corrected-moment GMM objective over (theta, nuisance).

    Classical regimes optimize over theta only, with the nuisance profiled
    analytically at every step; the weakly classical regime optimizes jointly.
    The best local minimum across the multi-start set wins, with
    deterministic tie-breaking.
    """
    cfg = config or EstimatorConfig()
    scheme = problem.scheme
    theta_start = (
        np.asarray(cfg.theta_start, dtype=float)
        if cfg.theta_start is not None
        else None
    )
    diagnostics: dict[str, Any] = {}

    pilot = theta_start if theta_start is not None else _naive_theta(problem, cfg)
    pilot = np.atleast_1d(np.asarray(pilot, dtype=float))
    if theta_start is None:
        diagnostics["naive_pilot"] = pilot.tolist()

    Xi_resolved, wdiag = weighting_matrix(
        cfg.policy, problem, None, replace(cfg, theta_start=pilot)
    )
    diagnostics.update(wdiag)
    theta_dependent = callable(Xi_resolved)
    if "pilot_theta" in wdiag:
        pilot = np.asarray(wdiag["pilot_theta"], dtype=float)

    if scheme.regime == "weakly_classical":
        dim_om = scheme.v_family.dim_omega
        start = np.concatenate([pilot, np.zeros(dim_om)])

        def q(beta_vec):
            th, om = beta_vec[: problem.spec.dim_theta], beta_vec[problem.spec.dim_theta :]
            Xi = Xi_resolved(th) if theta_dependent else Xi_resolved
            psi = problem.psi_rows(th, om).mean(axis=0)
            return gmm_objective(psi, Xi)

        beta_vec, fval, converged, iters = _minimize_multi(q, start, cfg)
        theta_hat = beta_vec[: problem.spec.dim_theta]
        nuis_hat = beta_vec[problem.spec.dim_theta :]
        restricted = False
    else:
        if theta_dependent:
            def q(theta):
                _, val, _ = profile_gamma(theta, Xi_resolved(theta), problem, cfg.restrict_gamma)
                return val

            theta_hat, fval, converged, iters = _minimize_multi(q, pilot, cfg)
        else:
            obj = _ProfiledObjective(problem, Xi_resolved, cfg.restrict_gamma)
            grad = None if cfg.restrict_gamma else obj.gradient
            theta_hat, fval, converged, iters = _minimize_multi(obj.value, pilot, cfg, grad=grad)
        Xi_at = Xi_resolved(theta_hat) if theta_dependent else Xi_resolved
        nuis_hat, fval, restricted = profile_gamma(
            theta_hat, Xi_at, problem, cfg.restrict_gamma
        )

    Xi_final = Xi_resolved(theta_hat) if theta_dependent else Xi_resolved
    beta_hat = ParameterVector(theta=theta_hat, nuisance=nuis_hat, scheme=scheme)
    Sigma = sandwich_variance(problem, beta_hat, Xi_final)
    std_errors = np.sqrt(np.maximum(np.diag(Sigma), 0.0) / problem.n)
    diagnostics["gamma_restriction_binding"] = restricted

    result = EstimationResult(
        beta_hat=beta_hat,
        Sigma_hat=Sigma,
        std_errors=std_errors,
        objective_value=float(fval),
        converged=converged,
        iterations=iters,
        weighting_used=np.asarray(Xi_final),
        n=problem.n,
        m=problem.m,
        policy_tag=cfg.policy.tag,
        diagnostics=diagnostics,
    )
    dof = result.m - beta_hat.packed.size
    if dof >= 1 and cfg.policy.tag != "identity":
        result = replace(result, j_stat=j_test(result))
    return result
