import math

import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vffgp import (AdditiveModel, DataError, FourierBasis, GaussianLikelihood, MaternKernel,
                   ProductModel, accumulate_stats, collapsed_elbo,
                   hyperparameter_objective_and_gradient, optimal_posterior, predict)
from vffgp import regression
from vffgp.baselines import full_gp_fit_predict
from vffgp.regression import prior_state

LOG_2PI = math.log(2 * math.pi)


def make_data(seed, N, lo=0.0, hi=1.0, noise=0.1):
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, N)
    y = np.sin(6 * x) + math.sqrt(noise) * rng.standard_normal(N)
    return x, y


def model_1d(order, M, a, b, variance=1.0, lengthscale=0.2):
    return AdditiveModel.single(FourierBasis(a, b, M), MaternKernel(order, variance, lengthscale))


def dense_general_elbo(model, x, y, s2, m, S):
    """Expected log-likelihood minus KL, with every matrix formed densely."""
    Kuu = np.asarray(model.kuu().dense())
    Kfu = np.asarray(model.feature_matrix(x))
    A = np.linalg.solve(Kuu, Kfu.T).T
    mu = A @ m
    var = np.asarray(model.kdiag(x)) - np.sum(A * Kfu, 1) + np.sum((A @ S) * A, 1)
    ell = np.sum(-0.5 * math.log(2 * math.pi * s2) - 0.5 * ((y - mu) ** 2 + var) / s2)
    K = Kuu.shape[0]
    kl = 0.5 * (np.trace(np.linalg.solve(Kuu, S)) + m @ np.linalg.solve(Kuu, m) - K
                + np.linalg.slogdet(Kuu)[1] - np.linalg.slogdet(S)[1])
    return ell - kl


class TestAccumulateStats:
    def test_empty(self):
        stats = accumulate_stats(model_1d("1/2", 2, 0, 1), np.zeros((0, 1)), np.zeros(0))
        assert stats.N == 0
        assert not np.any(np.asarray(stats.KufKfu))
        assert not np.any(np.asarray(stats.Kufy))
        assert stats.yy == 0.0 and stats.trace_kff == 0.0

    def test_single_point_at_a(self):
        stats = accumulate_stats(model_1d("1/2", 1, 0, 1), np.array([0.0]), np.array([2.5]))
        np.testing.assert_allclose(stats.Kufy, [2.5, 2.5, 0.0], atol=1e-15)

    def test_chunks_match_dense(self):
        x, y = make_data(0, 200)
        model = model_1d("3/2", 7, -0.5, 1.5)
        stats = accumulate_stats(model, x, y, chunk_size=37)
        Phi = np.asarray(model.feature_matrix(x))
        np.testing.assert_allclose(stats.KufKfu, Phi.T @ Phi, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(stats.Kufy, Phi.T @ y, rtol=1e-12, atol=1e-12)
        assert stats.yy == pytest.approx(y @ y)
        assert stats.trace_kff == pytest.approx(200.0)

    def test_non_finite(self):
        with pytest.raises(DataError):
            accumulate_stats(model_1d("1/2", 1, 0, 1), np.array([0.1, np.nan]), np.zeros(2))

    def test_row_mismatch(self):
        with pytest.raises(DataError):
            accumulate_stats(model_1d("1/2", 1, 0, 1), np.array([0.1, 0.2]), np.zeros(3))

    def test_outside_rejected_by_default(self):
        model = model_1d("1/2", 1, 0, 1)
        with pytest.raises(DataError):
            accumulate_stats(model, np.array([1.5]), np.zeros(1))
        assert accumulate_stats(model, np.array([1.5]), np.zeros(1), allow_outside=True).N == 1


class TestOptimalPosterior:
    def test_no_data_recovers_prior(self):
        model = model_1d("3/2", 3, 0, 1)
        stats = accumulate_stats(model, np.zeros((0, 1)), np.zeros(0))
        state = optimal_posterior(stats, model.kuu(), GaussianLikelihood(0.1))
        np.testing.assert_allclose(state.mean, 0.0)
        np.testing.assert_allclose(state.cov, model.kuu().dense(), rtol=1e-12)

    def test_uninformative_likelihood(self):
        x, y = make_data(1, 20)
        model = model_1d("3/2", 3, -0.5, 1.5)
        state = optimal_posterior(accumulate_stats(model, x, y), model.kuu(), GaussianLikelihood(1e12))
        assert np.abs(np.asarray(state.mean)).max() < 1e-6

    def test_matches_formula_as_written(self):
        x, y = make_data(2, 30)
        model = model_1d("3/2", 8, -0.5, 1.5)
        s2 = 0.1
        state = optimal_posterior(accumulate_stats(model, x, y), model.kuu(), GaussianLikelihood(s2))
        Kuu = np.asarray(model.kuu().dense())
        Kfu = np.asarray(model.feature_matrix(x))
        Ki = np.linalg.inv(Kuu)
        S = np.linalg.inv(Ki + Ki @ Kfu.T @ Kfu @ Ki / s2)
        m = S @ Ki @ Kfu.T @ y / s2
        np.testing.assert_allclose(state.mean, m, rtol=1e-9, atol=1e-9 * np.abs(m).max())
        np.testing.assert_allclose(state.cov, S, rtol=1e-9, atol=1e-9 * np.abs(S).max())

    def test_factor_is_lower_triangular(self):
        x, y = make_data(3, 10)
        model = model_1d("5/2", 4, -0.5, 1.5)
        L = np.asarray(optimal_posterior(accumulate_stats(model, x, y), model.kuu(),
                                         GaussianLikelihood(0.1)).cov_factor)
        np.testing.assert_array_equal(L, np.tril(L))
        assert np.all(np.diag(L) > 0)


class TestCollapsedElbo:
    def test_no_data(self):
        model = model_1d("1/2", 2, 0, 1)
        stats = accumulate_stats(model, np.zeros((0, 1)), np.zeros(0))
        assert float(collapsed_elbo(stats, model.kuu(), GaussianLikelihood(0.3))) == 0.0

    def test_single_point(self):
        model = model_1d("3/2", 200, -1, 1, 1.0, 0.2)
        stats = accumulate_stats(model, np.zeros(1), np.zeros(1))
        value = float(collapsed_elbo(stats, model.kuu(), GaussianLikelihood(1.0)))
        assert value == pytest.approx(-0.5 * math.log(4 * math.pi), abs=1e-3)
        assert value == pytest.approx(-1.265512, abs=1e-3)

    @pytest.mark.parametrize("order", ["1/2", "3/2", "5/2"])
    def test_equals_dense_general_elbo(self, order):
        x, y = make_data(4, 45)
        model = model_1d(order, 6, -0.6, 1.6, 1.3, 0.25)
        lik = GaussianLikelihood(0.07)
        stats = accumulate_stats(model, x, y)
        state = optimal_posterior(stats, model.kuu(), lik)
        value = float(collapsed_elbo(stats, model.kuu(), lik))
        dense = dense_general_elbo(model, x, y, 0.07, np.asarray(state.mean), np.asarray(state.cov))
        assert value == pytest.approx(dense, rel=1e-8)

    @pytest.mark.parametrize("order", ["1/2", "3/2", "5/2"])
    def test_bounded_by_log_marginal_likelihood(self, order):
        x, y = make_data(5, 40)
        kernel = MaternKernel(order, 1.0, 0.2)
        lik = GaussianLikelihood(0.1)
        lml, _, _ = full_gp_fit_predict(kernel, lik, x, y)
        for M in (0, 5, 50, 200):
            model = AdditiveModel.single(FourierBasis(-0.75, 1.75, M), kernel)
            assert float(collapsed_elbo(accumulate_stats(model, x, y), model.kuu(), lik)) <= lml + 1e-9

    @pytest.mark.xfail(strict=True, reason="M=200 does not reach a 1e-6 relative gap; see ledger")
    def test_tight_at_two_hundred(self):
        x, y = make_data(6, 40)
        kernel = MaternKernel("3/2", 1.0, 0.2)
        lik = GaussianLikelihood(0.1)
        lml, _, _ = full_gp_fit_predict(kernel, lik, x, y)
        model = AdditiveModel.single(FourierBasis(-0.75, 1.75, 200), kernel)
        elbo = float(collapsed_elbo(accumulate_stats(model, x, y), model.kuu(), lik))
        assert (lml - elbo) / abs(lml) < 1e-6

    @given(seed=st.integers(0, 10_000), order=st.sampled_from(["1/2", "3/2", "5/2"]),
           ell=st.floats(0.05, 1.0), s2=st.floats(0.01, 1.0))
    def test_non_decreasing_in_m(self, seed, order, ell, s2):
        x, y = make_data(seed, 15)
        kernel = MaternKernel(order, 1.0, ell)
        lik = GaussianLikelihood(s2)
        prev = -np.inf
        for M in (0, 1, 3, 8, 20):
            model = AdditiveModel.single(FourierBasis(-0.5, 1.5, M), kernel)
            e = float(collapsed_elbo(accumulate_stats(model, x, y), model.kuu(), lik))
            assert e >= prev - 1e-8 * abs(e)
            prev = e

    def test_jitter_cap(self):
        x, y = make_data(7, 10)
        model = model_1d("1/2", 2, -0.5, 1.5)
        stats = accumulate_stats(model, x, y)
        kuu = model.kuu()
        with pytest.raises(ValueError):
            regression.fit(model, x, y, optimize=False, jitter=1.0)
        small = 1e-9 * float(jnp.mean(kuu.diag()))
        a = float(collapsed_elbo(stats, kuu, GaussianLikelihood(0.1), small))
        b = float(collapsed_elbo(stats, kuu, GaussianLikelihood(0.1)))
        assert a == pytest.approx(b, rel=1e-6)


class TestPredict:
    def test_prior_state(self):
        model = model_1d("5/2", 4, 0, 1, 1.7, 0.3)
        kuu = model.kuu()
        xs = np.linspace(-0.5, 1.5, 9)
        mean, var = predict(prior_state(kuu), kuu, model, xs)
        np.testing.assert_allclose(mean, 0.0, atol=1e-15)
        np.testing.assert_allclose(var, 1.7, rtol=1e-10)

    def test_far_outside(self):
        x, y = make_data(8, 30)
        model = model_1d("3/2", 20, -0.5, 1.5, 1.0, 0.2)
        fit = regression.fit(model, x, y, noise_variance=0.1, optimize=False)
        mean, var = fit.predict(np.array([1.5 + 10 * 0.2]))
        assert abs(float(mean[0])) < 1e-3
        assert float(var[0]) == pytest.approx(1.0, abs=1e-3)

    def test_matches_dense_gp(self):
        x, y = make_data(9, 30)
        kernel = MaternKernel("3/2", 1.0, 0.2)
        lik = GaussianLikelihood(0.1)
        model = AdditiveModel.single(FourierBasis(-0.75, 1.75, 200), kernel)
        fit = regression.fit(model, x, y, noise_variance=0.1, optimize=False)
        xs = np.linspace(0, 1, 11)
        mean, var = fit.predict(xs)
        _, m_ref, v_ref = full_gp_fit_predict(kernel, lik, x, y, xs)
        np.testing.assert_allclose(mean, m_ref, atol=1e-3)
        np.testing.assert_allclose(var, v_ref, atol=1e-3)

    def test_variance_positive(self):
        x, y = make_data(10, 50)
        fit = regression.fit(model_1d("1/2", 30, -0.5, 1.5), x, y, optimize=False)
        _, var = fit.predict(np.linspace(-3, 4, 200))
        assert np.all(np.asarray(var) > 0)

    def test_empty(self):
        model = model_1d("1/2", 2, 0, 1)
        mean, var = predict(prior_state(model.kuu()), model.kuu(), model, np.zeros((0, 1)))
        assert mean.shape == (0,) and var.shape == (0,)


class TestHyperparameterGradient:
    @pytest.mark.parametrize("order", ["1/2", "3/2", "5/2"])
    def test_finite_differences(self, order, rng):
        x, y = make_data(11, 40)
        model = model_1d(order, 10, -0.75, 1.75)
        stats = accumulate_stats(model, x, y)
        for _ in range(3):
            theta = np.array([rng.uniform(-1, 1), rng.uniform(-2.5, 0), rng.uniform(-4, 0)])
            _, g = hyperparameter_objective_and_gradient(theta, model, stats)
            h = 1e-5
            for i in range(3):
                e = np.zeros(3)
                e[i] = h
                fd = (hyperparameter_objective_and_gradient(theta + e, model, stats)[0]
                      - hyperparameter_objective_and_gradient(theta - e, model, stats)[0]) / (2 * h)
                assert g[i] == pytest.approx(fd, rel=1e-4, abs=1e-6)

    def test_outside_route_matches_stats_route(self):
        x, y = make_data(12, 25)
        model = model_1d("3/2", 6, -0.5, 1.5)
        theta = np.log([1.2, 0.3, 0.05])
        a = hyperparameter_objective_and_gradient(theta, model, accumulate_stats(model, x, y))
        b = hyperparameter_objective_and_gradient(theta, model, X=x, y=y)
        assert a[0] == pytest.approx(b[0], rel=1e-12)
        np.testing.assert_allclose(a[1], b[1], rtol=1e-9)

    def test_no_data(self):
        model = model_1d("1/2", 2, 0, 1)
        stats = accumulate_stats(model, np.zeros((0, 1)), np.zeros(0))
        value, grad = hyperparameter_objective_and_gradient(np.zeros(3), model, stats)
        assert value == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_joint_scaling(self):
        # scaling y by c and both variances by c^2 shifts the objective by N log c,
        # exactly as for the exact GP
        x, y = make_data(13, 30)
        model = model_1d("3/2", 15, -0.75, 1.75)
        theta = np.log([0.8, 0.25, 0.1])
        shift = np.array([math.log(2), 0.0, math.log(2)])
        f1 = hyperparameter_objective_and_gradient(theta, model, accumulate_stats(model, x, y))[0]
        f2 = hyperparameter_objective_and_gradient(theta + shift, model,
                                                   accumulate_stats(model, x, math.sqrt(2) * y))[0]
        assert f2 - f1 == pytest.approx(30 * 0.5 * math.log(2), rel=1e-10)
        k = MaternKernel("3/2", 0.8, 0.25)
        l1 = full_gp_fit_predict(k, GaussianLikelihood(0.1), x, y)[0]
        l2 = full_gp_fit_predict(k.replace(variance=1.6), GaussianLikelihood(0.2), x, math.sqrt(2) * y)[0]
        assert l1 - l2 == pytest.approx(f2 - f1, rel=1e-10)


class TestFit:
    def test_improves_elbo_and_is_deterministic(self):
        x, y = make_data(14, 80)
        model = model_1d("3/2", 20, -0.75, 1.75, 1.0, 1.0)
        start = regression.fit(model, x, y, noise_variance=0.5, optimize=False)
        a = regression.fit(model, x, y, noise_variance=0.5)
        b = regression.fit(model, x, y, noise_variance=0.5)
        assert a.converged
        assert a.elbo > start.elbo
        assert a.elbo == b.elbo
        assert a.hyperparameters() == b.hyperparameters()
        assert set(a.hyperparameters()) == {"variance_0", "lengthscale_0", "noise_variance"}

    def test_outside_data(self):
        x, y = make_data(15, 30, -0.2, 1.2)
        model = model_1d("3/2", 10, 0.0, 1.0)
        with pytest.raises(DataError):
            regression.fit(model, x, y)
        fit = regression.fit(model, x, y, allow_outside=True, maxiter=50)
        assert math.isfinite(fit.elbo)

    def test_product_model(self):
        rng = np.random.default_rng(16)
        X = rng.uniform(size=(60, 2))
        y = np.sin(3 * X[:, 0]) * np.cos(2 * X[:, 1]) + 0.1 * rng.standard_normal(60)
        model = ProductModel.from_data(X, "5/2", 3, 1.0, 0.4)
        fit = regression.fit(model, X, y, noise_variance=0.05, optimize=False)
        lml, _, _ = full_gp_fit_predict(model, GaussianLikelihood(0.05), X, y)
        assert fit.elbo <= lml
