import numpy as np
import pytest
from scipy.stats import t as tdist

from metaimpact.curvefit import (
    FitProblem,
    finite_difference_jacobian,
    linear_lsq,
    nonlinear_lsq,
    weights_from_stderr,
)
from metaimpact.errors import RankDeficiencyError


class TestLinearLsq:
    def test_identity_design(self):
        y = np.array([3.0, -1.0, 2.5])
        fit = linear_lsq(np.eye(3), y)
        assert np.allclose(fit.coefficients, y)

    def test_exact_line(self):
        x = np.linspace(0, 9, 10)
        X = np.column_stack([np.ones(10), x])
        y = 2.0 * x + 1.0
        fit = linear_lsq(X, y)
        assert abs(fit.coefficients[0] - 1.0) < 1e-12
        assert abs(fit.coefficients[1] - 2.0) < 1e-12

    def test_rank_deficiency_names_columns(self):
        x = np.linspace(0, 1, 12)
        X = np.column_stack([np.ones(12), x, 2 * x])
        with pytest.raises(RankDeficiencyError) as err:
            linear_lsq(X, x)
        assert len(err.value.columns) == 1
        assert err.value.columns[0] in (1, 2)

    def test_ci_coverage_calibration(self):
        rng = np.random.default_rng(42)
        truth = np.array([1.5, -0.7, 0.3])
        hits = 0
        reps = 1000
        for _ in range(reps):
            X = rng.standard_normal((40, 3))
            y = X @ truth + rng.standard_normal(40) * 0.5
            fit = linear_lsq(X, y)
            q = tdist.ppf(0.975, fit.dof)
            hits += abs(fit.coefficients[0] - truth[0]) <= q * fit.stderr[0]
        assert abs(hits / reps - 0.95) <= 0.02

    def test_weighted_matches_replication(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((30, 2))
        y = X @ np.array([1.0, 2.0]) + rng.standard_normal(30)
        w = np.full(30, 4.0)
        plain = linear_lsq(X, y)
        weighted = linear_lsq(X, y, weights=w)
        assert np.allclose(weighted.coefficients, plain.coefficients)


def _exp_model(taus):
    return lambda th: th[0] * np.exp(-th[1] * taus)


class TestNonlinearLsq:
    def test_noiseless_exponential_recovery(self):
        taus = np.arange(1.0, 41.0)
        observed = 0.24 * np.exp(-0.038 * taus)
        res = nonlinear_lsq(
            FitProblem(_exp_model(taus), observed, x0=np.array([0.1, 0.1]),
                       lower=np.array([0.0, 0.0]), upper=np.array([5.0, 2.0]))
        )
        assert res.converged
        assert abs(res.params[0] - 0.24) < 1e-8
        assert abs(res.params[1] - 0.038) < 1e-8

    def test_start_at_optimum_converges_fast(self):
        taus = np.arange(1.0, 21.0)
        observed = 0.5 * np.exp(-0.1 * taus)
        res = nonlinear_lsq(
            FitProblem(_exp_model(taus), observed, x0=np.array([0.5, 0.1]))
        )
        assert res.converged
        assert res.n_iter <= 2

    def test_bound_projection_flags(self):
        taus = np.arange(1.0, 21.0)
        observed = -0.2 + 0.0 * taus  # implies a negative level
        model = lambda th: np.full_like(taus, th[0])
        res = nonlinear_lsq(
            FitProblem(model, observed, x0=np.array([0.5]),
                       lower=np.array([0.0]), upper=np.array([1.0]))
        )
        assert res.params[0] == 0.0
        assert res.at_lower[0]

    def test_objective_never_increases(self):
        taus = np.arange(1.0, 31.0)
        rng = np.random.default_rng(3)
        observed = 0.8 * np.exp(-0.2 * taus) + 0.01 * rng.standard_normal(30)
        res = nonlinear_lsq(
            FitProblem(_exp_model(taus), observed, x0=np.array([0.3, 0.05]))
        )
        assert len(res.cost_trace) >= 2
        assert np.all(np.diff(res.cost_trace) <= 0.0)

    def test_weight_scaling_invariance(self):
        taus = np.arange(1.0, 26.0)
        rng = np.random.default_rng(7)
        observed = 0.4 * np.exp(-0.05 * taus) + 0.005 * rng.standard_normal(25)
        w = 1.0 + 0.1 * taus
        r1 = nonlinear_lsq(
            FitProblem(_exp_model(taus), observed, x0=np.array([0.3, 0.04]),
                       weights=w)
        )
        r2 = nonlinear_lsq(
            FitProblem(_exp_model(taus), observed, x0=np.array([0.3, 0.04]),
                       weights=7.5 * w)
        )
        assert np.allclose(r1.params, r2.params, rtol=1e-7)
        assert np.allclose(r2.covariance * 7.5, r1.covariance, rtol=1e-5)

    def test_non_convergence_is_result_not_exception(self):
        taus = np.arange(1.0, 11.0)
        observed = np.sin(taus)
        res = nonlinear_lsq(
            FitProblem(_exp_model(taus), observed, x0=np.array([0.1, 0.5]),
                       max_iter=1)
        )
        assert isinstance(res.converged, bool)

    def test_finite_difference_jacobian_accuracy(self):
        taus = np.arange(1.0, 31.0)
        model = _exp_model(taus)
        params = np.array([0.7, 0.12])
        jac = finite_difference_jacobian(model, params)
        exact = np.column_stack([
            np.exp(-0.12 * taus),
            -0.7 * taus * np.exp(-0.12 * taus),
        ])
        scale = np.max(np.abs(exact), axis=0)
        assert np.max(np.abs(jac - exact) / scale[None, :]) < 1e-7


class TestWeightsFromStderr:
    def test_inverse_variance(self):
        w = weights_from_stderr(np.array([0.5, 1.0]))
        assert np.allclose(w, [4.0, 1.0])

    def test_zero_errors_disable_weighting(self):
        assert weights_from_stderr(np.array([0.5, 0.0])) is None
