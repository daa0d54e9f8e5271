import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from merm.gamma import (
    CorrectionScheme,
    ErrorMomentSet,
    GammaVector,
    SchemeError,
    exponential_v_family,
    gamma_from_moments,
    gamma_multivariate,
    gaussian_moments,
    moments_from_gamma,
)
from oracles import (
    bivariate_error_moments,
    discrete_error_moments,
    gamma_oracle_triangular,
    symmetric_discrete_error_moments,
)


class TestGammaFromMoments:
    def test_zero_moments(self):
        g = gamma_from_moments(ErrorMomentSet.scalar([0.0, 0.0, 0.0]), 4)
        assert np.all(g.values == 0.0)

    def test_k2_gaussian(self):
        g = gamma_from_moments(ErrorMomentSet.scalar([0.25]), 2)
        assert g.values[0] == 0.125

    def test_gaussian_k4_closed_form(self):
        # sigma = 0.5: gamma = (0.125, 0, -sigma^4/8)
        g = gamma_from_moments(gaussian_moments(0.5, 4), 4)
        assert np.allclose(g.values, [0.125, 0.0, -0.0078125], rtol=0, atol=1e-15)
        oracle = gamma_oracle_triangular({2: 0.25, 3: 0.0, 4: 0.1875}, 4)
        assert np.allclose(g.values, oracle, rtol=1e-12)

    def test_rejects_k_below_2(self):
        with pytest.raises(SchemeError):
            gamma_from_moments(ErrorMomentSet.scalar([0.25]), 1)

    @pytest.mark.parametrize("K", [2, 3, 4, 5, 6])
    def test_matches_triangular_oracle(self, K):
        rng = np.random.default_rng(101 + K)
        for _ in range(25):
            mom = discrete_error_moments(rng, K)
            g = gamma_from_moments(ErrorMomentSet.scalar([mom[k] for k in range(2, K + 1)]), K)
            oracle = gamma_oracle_triangular(mom, K)
            scale = np.maximum(np.abs(oracle), 1e-12)
            assert np.max(np.abs(g.values - oracle) / scale) < 1e-12

    def test_symmetric_odd_gammas_zero(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            mom = symmetric_discrete_error_moments(rng, 6)
            g = gamma_from_moments(ErrorMomentSet.scalar([mom[k] for k in range(2, 7)]), 6)
            # orders 3 and 5 sit at positions 1 and 3
            assert g.values[1] == 0.0
            assert g.values[3] == 0.0


class TestMomentsFromGamma:
    def test_zero_gamma(self):
        scheme = CorrectionScheme("classical_scalar", K=4)
        mu = moments_from_gamma(GammaVector(scheme, np.zeros(3)))
        assert all(v == 0.0 for v in mu.mu.values())

    def test_k2_inversion(self):
        scheme = CorrectionScheme("classical_scalar", K=2)
        mu = moments_from_gamma(GammaVector(scheme, np.array([0.125])))
        assert mu.mu[(2,)] == 0.25

    def test_gaussian_round_trip(self):
        g = gamma_from_moments(gaussian_moments(0.5, 4), 4)
        mu = moments_from_gamma(g)
        assert np.allclose(
            [mu.mu[(k,)] for k in (2, 3, 4)], [0.25, 0.0, 0.1875], rtol=1e-14
        )

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_random_moment_sets(self, seed):
        rng = np.random.default_rng(seed)
        K = int(rng.integers(2, 7))
        mom = discrete_error_moments(rng, K)
        mu = ErrorMomentSet.scalar([mom[k] for k in range(2, K + 1)], K)
        g = gamma_from_moments(mu, K)
        back = moments_from_gamma(g)
        for k in range(2, K + 1):
            a, b = mu.mu[(k,)], back.mu[(k,)]
            assert abs(a - b) <= 1e-14 * max(1.0, abs(a))
        g2 = gamma_from_moments(back, K)
        assert np.allclose(g.values, g2.values, rtol=1e-14, atol=1e-18)


class TestGammaMultivariate:
    def test_all_zero(self):
        mu = ErrorMomentSet(d=2, K=4, mu={k.kappa: 0.0 for k in _all_kappas(2, 4)})
        g = gamma_multivariate(mu, 4, 2)
        assert np.all(g.values == 0.0)

    def test_bivariate_k4_closed_forms(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            mom = bivariate_error_moments(rng, 4)
            mu = ErrorMomentSet(d=2, K=4, mu=mom)
            g = gamma_multivariate(mu, 4, 2)
            vals = {k.kappa: v for k, v in g.items()}
            m = mom
            expect = {
                (4, 0): (m[(4, 0)] - 6 * m[(2, 0)] ** 2) / 24,
                (3, 1): (m[(3, 1)] - 6 * m[(2, 0)] * m[(1, 1)]) / 6,
                (2, 2): (m[(2, 2)] - 2 * m[(2, 0)] * m[(0, 2)] - 4 * m[(1, 1)] ** 2) / 4,
                (1, 3): (m[(1, 3)] - 6 * m[(0, 2)] * m[(1, 1)]) / 6,
                (0, 4): (m[(0, 4)] - 6 * m[(0, 2)] ** 2) / 24,
            }
            for kappa, want in expect.items():
                assert abs(vals[kappa] - want) < 1e-12 * max(1.0, abs(want))
            # orders 2 and 3 are mu/kappa!
            assert abs(vals[(1, 1)] - m[(1, 1)]) < 1e-15
            assert abs(vals[(2, 1)] - m[(2, 1)] / 2) < 1e-15

    def test_independent_coordinates_zero_cross_gammas(self):
        rng = np.random.default_rng(17)
        mom = bivariate_error_moments(rng, 4, independent=True)
        mu = ErrorMomentSet(d=2, K=4, mu=mom)
        g = gamma_multivariate(mu, 4, 2)
        vals = {k.kappa: v for k, v in g.items()}
        for kappa in [(1, 1), (2, 1), (1, 2), (3, 1), (1, 3)]:
            assert abs(vals[kappa]) < 1e-13

    def test_zero_mask_prunes_layout(self):
        rng = np.random.default_rng(23)
        mom = bivariate_error_moments(rng, 4, independent=True)
        mu = ErrorMomentSet(d=2, K=4, mu=mom)
        mask = ((1, 1), (2, 1), (1, 2), (3, 1), (1, 3))
        g = gamma_multivariate(mu, 4, 2, zero_mask=mask)
        assert g.scheme.nuisance_dim == 12 - 5 == 7
        assert len(g.values) == 7

    def test_d1_reduces_to_scalar(self):
        rng = np.random.default_rng(3)
        mom = discrete_error_moments(rng, 5)
        mu1 = ErrorMomentSet(d=1, K=5, mu={(k,): mom[k] for k in range(2, 6)})
        g_multi = gamma_multivariate(mu1, 5, 1)
        g_scalar = gamma_from_moments(ErrorMomentSet.scalar([mom[k] for k in range(2, 6)]), 5)
        assert np.allclose(g_multi.values, g_scalar.values, rtol=1e-15)

    def test_multivariate_round_trip(self):
        rng = np.random.default_rng(31)
        mom = bivariate_error_moments(rng, 5)
        mu = ErrorMomentSet(d=2, K=5, mu=mom)
        g = gamma_multivariate(mu, 5, 2)
        back = moments_from_gamma(g)
        for kappa, v in mom.items():
            assert abs(back.mu[kappa] - v) < 1e-13 * max(1.0, abs(v))


def _all_kappas(d, K):
    from merm.moments import multi_index_set

    out = []
    for k in range(2, K + 1):
        out.extend(multi_index_set(d, k))
    return out


class TestErrorMomentSet:
    def test_negative_variance_rejected(self):
        with pytest.raises(SchemeError):
            ErrorMomentSet.scalar([-0.1]).validate()

    def test_kurtosis_floor(self):
        with pytest.raises(SchemeError):
            ErrorMomentSet.scalar([1.0, 0.0, 0.5]).validate()  # mu4 < mu2^2

    def test_gaussian_moments(self):
        mu = gaussian_moments(2.0, 6)
        assert mu.mu[(2,)] == 4.0
        assert mu.mu[(4,)] == 48.0
        assert mu.mu[(6,)] == 15 * 64.0
        assert mu.mu[(3,)] == mu.mu[(5,)] == 0.0


class TestExponentialVFamily:
    def test_omega1_zero_is_constant(self):
        fam = exponential_v_family(4)
        x = np.linspace(-2, 2, 5)[:, None]
        for k in (2, 3, 4):
            v = fam.v(k, x, {}, np.array([0.0, 0.3, 0.1, 0.2]))
            assert np.allclose(v, [0.3, 0.1, 0.2][k - 2])

    def test_direct_evaluation(self):
        fam = exponential_v_family(4)
        x = np.array([[1.0]])
        v2 = fam.v(2, x, {}, np.array([0.1, 0.3, 0.0, 0.0]))
        assert np.isclose(v2[0], 0.3 * np.exp(0.2))

    def test_derivatives(self):
        fam = exponential_v_family(3)
        x = np.array([[0.5]])
        om = np.array([0.4, 0.2, 0.1])
        d1 = fam.dv_dx(2, 1, x, {}, om)
        assert np.isclose(d1[0], 2 * 0.4 * 0.2 * np.exp(2 * 0.4 * 0.5))

    def test_k_out_of_range(self):
        with pytest.raises(SchemeError):
            exponential_v_family(5)
