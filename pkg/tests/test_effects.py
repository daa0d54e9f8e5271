import numpy as np
import pytest

from merm.dataset import Dataset
from merm.effects import (
    EffectSpec,
    average_effect_corrected,
    bias_bound,
    delta_method,
    rank_diagnostics,
)
from merm.corrected import build_second_measurement_moments
from merm.gamma import CorrectionScheme
from merm.gmm import EstimatorConfig, ParameterVector, Problem, estimate
from merm.moments import MomentError
from merm.simulation import build_problem, generate_dgp, make_design, naive_estimator


@pytest.fixture(scope="module")
def linear_fit():
    design = make_design("linear_attenuation", seed=30)
    data, truth = generate_dgp(design, 0)
    fit = naive_estimator("linear_attenuation", data)
    problem = build_problem(design, data, 2)
    result = estimate(problem, EstimatorConfig(theta_start=fit.theta, starts=2, seed=0))
    return problem, result


@pytest.fixture(scope="module")
def poly_fit():
    design = make_design("polynomial", seed=31, n=800)
    data, truth = generate_dgp(design, 0)
    fit = naive_estimator("polynomial", data)
    problem = build_problem(design, data, 2)
    result = estimate(problem, EstimatorConfig(theta_start=fit.theta, starts=2, seed=0))
    return problem, result


class TestAverageEffect:
    def test_linear_effect_equals_naive(self, linear_fit):
        problem, result = linear_fit
        eff = EffectSpec(
            value=lambda x, s, th: 3.0 * x[:, 0] + 1.0,
            dx=lambda x, s, th, k: np.full(x.shape[0], 3.0) if k == 1 else np.zeros(x.shape[0]),
            dtheta=lambda x, s, th: np.zeros((x.shape[0], 1, th.size)),
        )
        out = average_effect_corrected(eff, result, problem)
        assert np.array_equal(out.point, out.naive)

    def test_square_effect_hand_formula(self, linear_fit):
        problem, result = linear_fit
        eff = EffectSpec(
            value=lambda x, s, th: x[:, 0] ** 2,
            dx=lambda x, s, th, k: {1: 2 * x[:, 0], 2: np.full(x.shape[0], 2.0)}.get(
                k, np.zeros(x.shape[0])
            ),
            dtheta=lambda x, s, th: np.zeros((x.shape[0], 1, th.size)),
        )
        out = average_effect_corrected(eff, result, problem)
        want = (problem.data.x[:, 0] ** 2).mean() - 2.0 * result.nuisance[0]
        assert np.isclose(out.point[0], want, rtol=1e-12)
        assert out.se[0] > 0

    def test_zero_gamma_equals_naive(self, linear_fit):
        problem, result = linear_fit
        from dataclasses import replace

        beta0 = ParameterVector(result.theta, np.zeros(1), problem.scheme)
        res0 = replace(result, beta_hat=beta0)
        eff = EffectSpec(value=lambda x, s, th: np.exp(x[:, 0] * 0.1))
        out = average_effect_corrected(eff, res0, problem)
        assert np.array_equal(out.point, out.naive)


class TestBiasBound:
    def test_appendix_worked_example_interval(self, linear_fit):
        # b = 1, gamma2 = 0.125, kurtosis bound 10:
        # [-5/6 * 0.125^2, 4/6 * 0.125^2] = [-0.013021, 0.010417]
        g2 = 0.125
        lo = -5.0 / 6.0 * g2**2
        hi = (10.0 - 6.0) / 6.0 * g2**2
        assert np.isclose(lo, -0.0130208333, atol=1e-9)
        assert np.isclose(hi, 0.0104166667, atol=1e-9)
        problem, result = linear_fit
        # patch a beta with the canonical gamma2 and unit multiplier via v
        rep = bias_bound(problem, result, v=np.array([0.0, 1.0, 0.0]),
                         kurtosis_bound=10.0)
        assert rep.Kbar == 4
        g2_hat = result.nuisance[0]
        want_lo, want_hi = sorted(
            (rep.b_v * (-5.0 / 6.0) * g2_hat**2, rep.b_v * (4.0 / 6.0) * g2_hat**2)
        )
        assert np.isclose(rep.interval[0], want_lo, rtol=1e-12)
        assert np.isclose(rep.interval[1], want_hi, rtol=1e-12)

    def test_kurtosis_six_is_one_sided(self, linear_fit):
        problem, result = linear_fit
        rep = bias_bound(problem, result, v=np.array([0.0, 1.0, 0.0]), kurtosis_bound=6.0)
        assert rep.interval[0] == 0.0 or rep.interval[1] == 0.0

    def test_zero_gamma_zero_interval(self, linear_fit):
        problem, result = linear_fit
        from dataclasses import replace

        beta0 = ParameterVector(result.theta, np.zeros(1), problem.scheme)
        res0 = replace(result, beta_hat=beta0)
        rep = bias_bound(problem, res0, v=np.array([0.0, 1.0, 0.0]), kurtosis_bound=10.0)
        assert rep.interval == (0.0, 0.0)

    def test_kurtosis_floor(self, linear_fit):
        problem, result = linear_fit
        with pytest.raises(MomentError):
            bias_bound(problem, result, v=np.array([0.0, 1.0, 0.0]), kurtosis_bound=0.5)

    def test_endpoint_scaling_in_gamma(self, linear_fit):
        # scaling gamma2 by c^2 scales the K=2 interval endpoints by c^4
        problem, result = linear_fit
        from dataclasses import replace

        c = 1.7
        g2 = result.nuisance[0]
        beta2 = ParameterVector(result.theta, np.array([c**2 * g2]), problem.scheme)
        rep1 = bias_bound(problem, result, v=np.array([0.0, 1.0, 0.0]), kurtosis_bound=10.0)
        rep2 = bias_bound(problem, replace(result, beta_hat=beta2),
                          v=np.array([0.0, 1.0, 0.0]), kurtosis_bound=10.0)
        assert np.isclose(rep2.interval[0], c**4 * rep1.interval[0], rtol=1e-9)
        assert np.isclose(rep2.interval[1], c**4 * rep1.interval[1], rtol=1e-9)

    def test_gaussian_route_point_interval(self, poly_fit):
        problem, result = poly_fit
        v = np.zeros(result.beta_hat.packed.size)
        v[1] = 1.0
        rep = bias_bound(problem, result, v=v, assumption="gaussian")
        assert rep.interval[0] == rep.interval[1]
        assert rep.Kbar == 4


class TestRankDiagnostics:
    def test_well_posed_polynomial(self, poly_fit):
        problem, result = poly_fit
        diag = rank_diagnostics(problem, result)
        sv = diag.singular_values
        assert sv[-1] / sv[0] > 1e-4
        assert diag.full_rank

    def test_flag_invariant_to_moment_rescaling(self, poly_fit):
        problem, result = poly_fit
        from merm.gmm import jacobian_psi

        Psi = jacobian_psi(problem, result.beta_hat)
        norms = np.linalg.norm(Psi, axis=1, keepdims=True)
        scaled = Psi / norms
        sv1 = np.linalg.svd(scaled, compute_uv=False)
        # multiply a moment row by 1000 and recompute the equilibrated spectrum
        Psi2 = Psi.copy()
        Psi2[3] *= 1000.0
        norms2 = np.linalg.norm(Psi2, axis=1, keepdims=True)
        sv2 = np.linalg.svd(Psi2 / norms2, compute_uv=False)
        assert np.allclose(sv1, sv2, rtol=1e-10)

    def test_second_measurement_flag_for_constant_u(self):
        # u does not depend on x: the sufficient-condition vector vanishes
        import merm.corrected as corrected

        class ConstU(corrected.ScalarMomentFn):
            max_order = 6

            def value(self, x, s, theta):
                return s["y"] - theta[0]

            def dx(self, x, s, theta, k):
                return np.zeros(x.shape[0])

            def dtheta(self, x, s, theta):
                return -np.ones((x.shape[0], 1))

            def dx_dtheta(self, x, s, theta, k):
                return np.zeros((x.shape[0], 1))

        spec = build_second_measurement_moments(ConstU(), dim_theta=1, J=2)
        rng = np.random.default_rng(0)
        n = 200
        data = Dataset(
            x=rng.normal(size=n),
            s={"y": 1.0 + rng.normal(size=n) * 0.1, "q": rng.normal(size=n)},
        )
        scheme = CorrectionScheme("classical_scalar", K=2)
        problem = Problem(spec=spec, scheme=scheme, data=data)
        # gamma is unidentified here by construction; evaluate diagnostics at
        # a fixed beta rather than estimating
        beta = ParameterVector(np.array([1.0]), np.array([0.0]), scheme)
        from merm.gmm import EstimationResult

        shim = EstimationResult(
            beta_hat=beta, Sigma_hat=np.eye(2), std_errors=np.ones(2),
            objective_value=0.0, converged=True, iterations=0,
            weighting_used=np.eye(spec.m), n=n, m=spec.m,
        )
        diag = rank_diagnostics(problem, shim)
        assert diag.second_measurement_norm == 0.0
        assert diag.second_measurement_flag

    def test_second_measurement_nonzero_for_increasing_rho(self):
        import merm.corrected as corrected

        class LinU(corrected.ScalarMomentFn):
            max_order = 6

            def value(self, x, s, theta):
                return theta[0] * x[:, 0] - s["y"]

            def dx(self, x, s, theta, k):
                return np.full(x.shape[0], theta[0]) if k == 1 else np.zeros(x.shape[0])

            def dtheta(self, x, s, theta):
                return x[:, 0][:, None]

            def dx_dtheta(self, x, s, theta, k):
                return np.ones((x.shape[0], 1)) if k == 1 else np.zeros((x.shape[0], 1))

        spec = build_second_measurement_moments(LinU(), dim_theta=1, J=2)
        rng = np.random.default_rng(1)
        n = 300
        x = rng.normal(size=n)
        q = x + rng.normal(size=n)
        y = 2.0 * x + rng.normal(size=n) * 0.3
        data = Dataset(x=x + rng.normal(size=n) * 0.2, s={"y": y, "q": q})
        scheme = CorrectionScheme("classical_scalar", K=2)
        problem = Problem(spec=spec, scheme=scheme, data=data)
        result = estimate(problem, EstimatorConfig(theta_start=np.array([1.5]), starts=2, seed=0))
        diag = rank_diagnostics(problem, result)
        assert not diag.second_measurement_flag
        assert abs(diag.second_measurement_stat[0]) > 0.1


class TestDeltaMethod:
    def test_identity_recovers_std_errors(self, linear_fit):
        problem, result = linear_fit
        for i in range(result.beta_hat.packed.size):
            out = delta_method(result, lambda b, i=i: float(b[i]))
            assert np.isclose(out.se, result.std_errors[i], rtol=1e-6)

    def test_doubling(self, linear_fit):
        problem, result = linear_fit
        base = delta_method(result, lambda b: float(b[0]))
        twice = delta_method(result, lambda b: 2.0 * float(b[0]))
        assert np.isclose(twice.se, 2 * base.se, rtol=1e-6)

    def test_linear_functional_exact(self, linear_fit):
        problem, result = linear_fit
        v = np.array([0.3, -1.2, 0.5])
        out = delta_method(result, lambda b: float(v @ b), gradient=lambda b: v)
        want = np.sqrt(v @ result.Sigma_hat @ v / result.n)
        assert np.isclose(out.se, want, rtol=1e-12)
        assert np.isclose(out.ci[1] - out.point, 1.959964 * out.se, rtol=1e-12)
