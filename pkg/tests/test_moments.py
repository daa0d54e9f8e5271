import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from merm.dataset import DataError, Dataset
from merm.moments import (
    AnalyticProvider,
    DerivativeRequest,
    MomentError,
    MomentSpec,
    MultiIndex,
    NumericProvider,
    build_instrument_basis,
    derivative_x,
    evaluate_moments,
    multi_index_set,
)


def linear_spec():
    # g(x, y, theta) = y - theta * x, scalar moment
    def ev(x, s, theta):
        return (s["y"] - theta[0] * x[:, 0])[:, None]

    return MomentSpec(
        m=1, dim_theta=1, d=1, eval=ev, deriv=NumericProvider(ev),
        required_columns=("y",),
    )


def cubic_spec():
    def ev(x, s, theta):
        return (x[:, 0] ** 3)[:, None]

    def dx(x, s, theta, kappa):
        k = kappa.kappa[0]
        x1 = x[:, 0]
        vals = {0: x1**3, 1: 3 * x1**2, 2: 6 * x1, 3: np.full_like(x1, 6.0)}
        return vals.get(k, np.zeros_like(x1))[:, None]

    return MomentSpec(
        m=1, dim_theta=1, d=1, eval=ev, deriv=AnalyticProvider(ev, dx, max_order=6)
    )


class TestEvaluateMoments:
    def test_exact_root(self):
        data = Dataset(x=np.array([[1.0]]), s={"y": np.array([2.0])})
        rows = evaluate_moments(linear_spec(), data, np.array([2.0]))
        assert rows.shape == (1, 1)
        assert rows[0, 0] == 0.0

    def test_polynomial_basis_dimension(self):
        # the named degree-3 basis in (x, z) has 7 components
        assert build_instrument_basis("K2-basis", 1.3, -0.4).shape == (7,)
        assert build_instrument_basis("K4-basis", 1.3, -0.4).shape == (10,)

    def test_constant_moment(self):
        def ev(x, s, theta):
            return np.full((x.shape[0], 2), 3.5)

        spec = MomentSpec(m=2, dim_theta=1, d=1, eval=ev, deriv=NumericProvider(ev))
        data = Dataset(x=np.random.default_rng(0).normal(size=5))
        rows = evaluate_moments(spec, data, np.array([0.7]))
        assert np.all(rows == 3.5)

    def test_dimension_mismatch(self):
        data = Dataset(x=np.array([[1.0]]), s={"y": np.array([2.0])})
        with pytest.raises(MomentError):
            evaluate_moments(linear_spec(), data, np.array([1.0, 2.0]))

    def test_nonfinite_reports_row(self):
        def ev(x, s, theta):
            out = np.ones((x.shape[0], 1))
            out[1, 0] = np.nan
            return out

        spec = MomentSpec(m=1, dim_theta=1, d=1, eval=ev, deriv=NumericProvider(ev))
        data = Dataset(x=np.zeros(3))
        with pytest.raises(MomentError, match="row 1"):
            evaluate_moments(spec, data, np.array([0.0]))


class TestDerivativeX:
    def test_cubic_second_derivative_analytic(self):
        data = Dataset(x=np.array([0.5, -1.0, 2.0]))
        rows = derivative_x(
            cubic_spec(), data, np.array([0.0]), DerivativeRequest(MultiIndex((2,)))
        )
        assert np.allclose(rows[:, 0], 6 * data.x[:, 0])

    def test_cubic_second_derivative_numeric(self):
        def ev(x, s, theta):
            return (x[:, 0] ** 3)[:, None]

        spec = MomentSpec(m=1, dim_theta=1, d=1, eval=ev, deriv=NumericProvider(ev))
        data = Dataset(x=np.array([1.0]))
        rows = derivative_x(spec, data, np.array([0.0]), DerivativeRequest(MultiIndex((2,))))
        assert abs(rows[0, 0] - 6.0) < 1e-6

    def test_bivariate_mixed_partial(self):
        def ev(x, s, theta):
            return (x[:, 0] ** 2 * x[:, 1] ** 2)[:, None]

        spec = MomentSpec(m=1, dim_theta=1, d=2, eval=ev, deriv=NumericProvider(ev))
        data = Dataset(x=np.array([[0.3, -0.7], [1.1, 0.4]]))
        rows = derivative_x(spec, data, np.array([0.0]), DerivativeRequest(MultiIndex((2, 2))))
        assert np.allclose(rows[:, 0], 4.0, atol=1e-5)

    def test_zero_index_equals_eval(self):
        data = Dataset(x=np.array([0.5, -1.0]), s={"y": np.array([1.0, 2.0])})
        spec = linear_spec()
        theta = np.array([0.3])
        direct = evaluate_moments(spec, data, theta)
        viadx = derivative_x(spec, data, theta, DerivativeRequest(MultiIndex((0,))))
        assert np.array_equal(direct, viadx)

    def test_unsupported_order(self):
        spec = cubic_spec()
        data = Dataset(x=np.array([1.0]))
        with pytest.raises(MomentError, match="order"):
            derivative_x(spec, data, np.array([0.0]), DerivativeRequest(MultiIndex((7,))))

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_numeric_matches_analytic_polynomial(self, k):
        # total degree 4 polynomial, orders up to 4, |x| <= 10
        coeffs = np.array([0.3, -1.2, 0.5, 0.11, -0.07])

        def value(x1):
            return sum(c * x1**j for j, c in enumerate(coeffs))

        def dval(x1, k):
            out = np.zeros_like(x1)
            for j in range(k, 5):
                out += coeffs[j] * math.prod(range(j - k + 1, j + 1)) * x1 ** (j - k)
            return out

        def ev(x, s, theta):
            return value(x[:, 0])[:, None]

        spec = MomentSpec(m=1, dim_theta=1, d=1, eval=ev, deriv=NumericProvider(ev))
        x = np.array([-10.0, -3.3, -0.4, 0.0, 0.7, 4.2, 10.0])
        data = Dataset(x=x)
        got = derivative_x(spec, data, np.array([0.0]), DerivativeRequest(MultiIndex((k,))))
        want = dval(x, k)
        scale = np.maximum(1.0, np.abs(want))
        assert np.all(np.abs(got[:, 0] - want) / scale < 1e-6)

    def test_theta_jacobian_numeric(self):
        spec = linear_spec()
        data = Dataset(x=np.array([0.5, -1.0]), s={"y": np.array([1.0, 2.0])})
        jac = derivative_x(
            spec, data, np.array([0.3]), DerivativeRequest(MultiIndex((0,)), "theta_jacobian")
        )
        assert jac.shape == (2, 1, 1)
        assert np.allclose(jac[:, 0, 0], -data.x[:, 0], atol=1e-7)


class TestMultiIndexSet:
    def test_paper_k2_example(self):
        assert [m.kappa for m in multi_index_set(2, 2)] == [(2, 0), (1, 1), (0, 2)]

    def test_scalar(self):
        assert [m.kappa for m in multi_index_set(1, 3)] == [(3,)]

    def test_k4_bivariate(self):
        got = [m.kappa for m in multi_index_set(2, 4)]
        assert got == [(4, 0), (3, 1), (2, 2), (1, 3), (0, 4)]

    @given(st.integers(1, 4), st.integers(0, 6))
    @settings(max_examples=60, deadline=None)
    def test_cardinality_and_sum(self, d, k):
        out = multi_index_set(d, k)
        assert len(out) == math.comb(k + d - 1, d - 1)
        assert all(m.order == k for m in out)
        assert len({m.kappa for m in out}) == len(out)


class TestInstrumentBasis:
    def test_k2_at_origin(self):
        assert np.array_equal(
            build_instrument_basis("K2-basis", 0.0, 0.0),
            np.array([1, 0, 0, 0, 0, 0, 0.0]),
        )

    def test_k4_at_ones(self):
        assert np.array_equal(build_instrument_basis("K4-basis", 1.0, 1.0), np.ones(10))

    def test_extras_appended(self):
        out = build_instrument_basis("K2-basis", 2.0, 3.0, extra=(5.0,))
        assert out.shape == (8,)
        assert out[-1] == 5.0

    def test_unknown_kind(self):
        with pytest.raises(MomentError):
            build_instrument_basis("K9-basis", 0.0, 0.0)


class TestDataset:
    def test_rejects_nan(self):
        with pytest.raises(DataError):
            Dataset(x=np.array([1.0, np.nan]))

    def test_rejects_length_mismatch(self):
        with pytest.raises(DataError):
            Dataset(x=np.array([1.0, 2.0]), s={"y": np.array([1.0])})

    def test_immutable(self):
        data = Dataset(x=np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            data.x[0, 0] = 5.0
