import math

import jax.numpy as jnp
import numpy as np
import pytest
from scipy import stats

from vffgp import (AdditiveModel, DataError, FourierBasis, GaussianLikelihood, MaternKernel, Poisson,
                   ProductModel, WhitenedModel, WhitenedState, accumulate_stats, hmc_sample,
                   lgcp_model, log_target, optimal_posterior)
from vffgp.mcmc import bin_events, lgcp_log_likelihood, write_trace


def gaussian_problem(M=5, N=50, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, N)
    y = np.sin(6 * x) + 0.3 * rng.standard_normal(N)
    model = AdditiveModel.single(FourierBasis(-0.5, 1.5, M), MaternKernel("3/2", 1.0, 0.3))
    return model, GaussianLikelihood(0.09), x, y


def mvn_logpdf(u, mean, cov):
    return stats.multivariate_normal(mean, cov).logpdf(u)


def batch_se(a, num_batches=50):
    n = a.shape[0] // num_batches * num_batches
    means = a[:n].reshape(num_batches, -1, *a.shape[1:]).mean(1)
    return means.std(0, ddof=1) / math.sqrt(num_batches)


class TestLogTarget:
    def test_prior_term_at_zero(self):
        model = AdditiveModel.single(FourierBasis(0, 1, 3), MaternKernel("5/2"))
        wm = WhitenedModel(model, GaussianLikelihood(1.0), np.zeros(0), X=np.zeros((0, 1)),
                           sample_hyper=False)
        assert wm.num_v == 7 + 3
        value, grad = log_target(WhitenedState(np.zeros(10), np.zeros(0)), wm)
        assert value == pytest.approx(-5 * math.log(2 * math.pi), rel=1e-14)
        np.testing.assert_array_equal(grad, 0.0)

    def test_gaussian_offset_is_constant(self, rng):
        # q(v) / q(u = Rv) = N(v; 0, I) / N(Rv; 0, Kuu), so subtracting both
        # priors and the optimal Gaussian leaves a constant
        model, lik, x, y = gaussian_problem()
        wm = WhitenedModel(model, lik, y, X=x, sample_hyper=False)
        kuu = model.kuu()
        state = optimal_posterior(accumulate_stats(model, x, y), kuu, lik)
        R = np.asarray(kuu.sqrt().dense())
        Kuu = np.asarray(kuu.dense())
        mh, Sh = np.asarray(state.mean), np.asarray(state.cov)
        offsets = []
        for _ in range(12):
            v = rng.standard_normal(wm.num_v)
            u = R @ v
            value, _ = log_target(WhitenedState(v, np.zeros(0)), wm)
            offsets.append(value - stats.norm.logpdf(v).sum() + mvn_logpdf(u, np.zeros(len(u)), Kuu)
                           - mvn_logpdf(u, mh, Sh))
        assert np.ptp(offsets) < 1e-6 * abs(np.mean(offsets))

    @pytest.mark.parametrize("sample_hyper", [False, True])
    def test_gradient_against_finite_differences(self, sample_hyper, rng):
        model, _, x, _ = gaussian_problem(M=4, N=30)
        y = (x > 0.5).astype(float)
        from vffgp import Bernoulli
        wm = WhitenedModel(model, Bernoulli("logit"), y, X=x, sample_hyper=sample_hyper)
        for _ in range(3):
            z = rng.standard_normal(wm.dim) * 0.5
            value, grad = wm.value_and_grad(z)
            h = 1e-6
            for i in range(wm.dim):
                e = np.zeros(wm.dim)
                e[i] = h
                fd = (float(wm.value_and_grad(z + e)[0]) - float(wm.value_and_grad(z - e)[0])) / (2 * h)
                assert float(grad[i]) == pytest.approx(fd, rel=1e-4, abs=1e-6)

    def test_outside_inputs_follow_hyperparameters(self, rng):
        # with inputs outside [a, b] the features depend on the lengthscale
        model = AdditiveModel.single(FourierBasis(0.2, 0.8, 3), MaternKernel("1/2", 1.0, 0.3))
        x = np.linspace(0, 1, 15)
        wm = WhitenedModel(model, Poisson(0.1), np.ones(15), X=x)
        z = rng.standard_normal(wm.dim) * 0.3
        _, grad = wm.value_and_grad(z)
        h = 1e-6
        e = np.zeros(wm.dim)
        e[1] = h
        fd = (float(wm.value_and_grad(z + e)[0]) - float(wm.value_and_grad(z - e)[0])) / (2 * h)
        assert float(grad[1]) == pytest.approx(fd, rel=1e-4)

    def test_grid_matches_scattered_inputs(self, rng):
        grid = (np.linspace(0.05, 0.95, 4), np.linspace(0.1, 0.9, 3))
        X = np.stack(np.meshgrid(*grid, indexing="ij"), -1).reshape(-1, 2)
        model = ProductModel.from_data(np.array([[0.0, 0.0], [1.0, 1.0]]), "3/2", 2, 1.0, 0.3)
        counts = rng.poisson(2.0, 12).astype(float)
        a = WhitenedModel(model, Poisson(0.5), counts, grid=grid)
        b = WhitenedModel(model, Poisson(0.5), counts, X=X)
        z = rng.standard_normal(a.dim) * 0.3
        va, ga = a.value_and_grad(z)
        vb, gb = b.value_and_grad(z)
        assert float(va) == pytest.approx(float(vb), rel=1e-12)
        np.testing.assert_allclose(ga, gb, rtol=1e-9, atol=1e-12)

    def test_needs_exactly_one_input_kind(self):
        model, lik, x, y = gaussian_problem(M=1, N=3)
        with pytest.raises(ValueError):
            WhitenedModel(model, lik, y)

    def test_target_count_mismatch(self):
        model, lik, x, y = gaussian_problem(M=1, N=3)
        with pytest.raises(ValueError):
            WhitenedModel(model, lik, y[:2], X=x)


class TestWhitening:
    @pytest.mark.parametrize("order", ["1/2", "3/2", "5/2"])
    def test_reconstructed_covariance(self, order):
        model = AdditiveModel.single(FourierBasis(0, 1, 3), MaternKernel(order, 1.0, 0.3))
        kuu = model.kuu()
        R = kuu.sqrt()
        rng = np.random.default_rng(0)
        V = rng.standard_normal((R.num_inputs, 1_000_000))
        U = np.asarray(R.matvec(V))
        dense = np.asarray(kuu.dense())
        assert np.linalg.norm(U @ U.T / V.shape[1] - dense) / np.linalg.norm(dense) < 0.05


class TestSampler:
    def test_zero_iterations(self):
        model, lik, x, y = gaussian_problem(M=2, N=10)
        wm = WhitenedModel(model, lik, y, X=x)
        init = WhitenedState(np.full(wm.num_v, 0.1), np.asarray(wm.theta0))
        chain = hmc_sample(init, wm, 0, seed=3)
        assert len(chain) == 1
        np.testing.assert_array_equal(chain.samples[0], wm.pack(init))

    def test_negative_iterations(self):
        model, lik, x, y = gaussian_problem(M=1, N=3)
        wm = WhitenedModel(model, lik, y, X=x)
        with pytest.raises(ValueError):
            hmc_sample(wm.initial_state(), wm, -1, 0)

    def test_deterministic(self):
        model, lik, x, y = gaussian_problem(M=2, N=10)
        wm = WhitenedModel(model, lik, y, X=x)
        a = hmc_sample(wm.initial_state(), wm, 50, seed=11)
        b = hmc_sample(wm.initial_state(), wm, 50, seed=11)
        c = hmc_sample(wm.initial_state(), wm, 50, seed=12)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert not np.array_equal(a.samples, c.samples)

    def test_standard_normal_target(self):
        # no data: the target is the N(0, I) prior on a 2-vector
        model = AdditiveModel.single(FourierBasis(0, 1, 0), MaternKernel("1/2", 1.0, 0.5))
        wm = WhitenedModel(model, GaussianLikelihood(1.0), np.zeros(0), X=np.zeros((0, 1)),
                           sample_hyper=False)
        chain = hmc_sample(WhitenedState(np.zeros(2), np.zeros(0), 0.5, 3), wm, 500_000, seed=0)
        draws = chain.retained[::4]
        assert draws.shape == (100_000, 2)
        for i in range(2):
            assert stats.kstest(draws[:, i], "norm").pvalue > 0.01

    def test_gaussian_likelihood_reproduces_closed_form(self):
        model, lik, x, y = gaussian_problem()
        wm = WhitenedModel(model, lik, y, X=x, sample_hyper=False)
        chain = hmc_sample(wm.initial_state(0.05, 20), wm, 62_500, seed=1)
        assert 0.5 <= chain.acceptance_rate <= 0.95
        kuu = model.kuu()
        state = optimal_posterior(accumulate_stats(model, x, y), kuu, lik)
        U = chain.v() @ np.asarray(kuu.sqrt().dense()).T
        assert U.shape[0] == 50_000
        mh, Sh = np.asarray(state.mean), np.asarray(state.cov)
        assert np.all(np.abs(U.mean(0) - mh) < 3 * batch_se(U))
        C = U - mh
        P = C[:, :, None] * C[:, None, :]
        assert np.all(np.abs(P.mean(0) - Sh) < 3 * batch_se(P))

    def test_divergences_are_rejected(self):
        model, lik, x, y = gaussian_problem(M=2, N=10)
        wm = WhitenedModel(model, lik, y, X=x, sample_hyper=False)
        chain = hmc_sample(wm.initial_state(step_size=1e200, num_leapfrog=5), wm, 5, seed=0,
                           warmup_fraction=0.0)
        assert chain.num_divergent == 5
        np.testing.assert_array_equal(chain.samples[-1], chain.samples[0])

    def test_trace_file(self, tmp_path):
        model, lik, x, y = gaussian_problem(M=1, N=5)
        wm = WhitenedModel(model, lik, y, X=x)
        chain = hmc_sample(wm.initial_state(), wm, 10, seed=0)
        write_trace(chain, tmp_path / "trace.csv")
        lines = (tmp_path / "trace.csv").read_text().splitlines()
        assert lines[0].split(",")[:4] == ["log_variance_0", "log_lengthscale_0",
                                           "log_noise_variance", "v0"]
        assert len(lines) == 1 + len(chain.retained)


class TestBinning:
    def test_count_conservation(self, rng):
        b = bin_events(rng.uniform(size=(127, 2)), (32, 32))
        assert b.counts.sum() == 127
        assert b.counts.shape == (1024,)
        assert b.bin_area == pytest.approx(1 / 1024)

    def test_boundary_goes_to_lower_bin(self):
        b = bin_events(np.array([0.0, 0.25, 0.5, 1.0]), 4)
        np.testing.assert_array_equal(b.counts, [2, 1, 0, 1])

    def test_slowest_first_dimension(self):
        b = bin_events(np.array([[0.9, 0.1]]), (2, 3))
        assert b.counts.tolist() == [0, 0, 0, 1, 0, 0]

    def test_domain_normalization(self):
        b = bin_events(np.array([[10.0], [19.0]]), 2, domain=[(10.0, 20.0)])
        np.testing.assert_array_equal(b.counts, [1, 1])

    @pytest.mark.parametrize("events", [np.array([[1.2, 0.5]]), np.array([[-0.1, 0.5]]),
                                        np.array([[np.nan, 0.5]])])
    def test_outside_domain(self, events):
        with pytest.raises(DataError):
            bin_events(events, (4, 4))

    def test_bad_grid(self):
        with pytest.raises(DataError):
            bin_events(np.array([[0.5]]), 0)

    def test_zero_events_unit_rate(self):
        G = 16
        value = lgcp_log_likelihood(np.zeros(G), np.zeros(G), Poisson(1.0))
        assert value == -G

    def test_lgcp_model_offset_and_shape(self, rng):
        events = rng.uniform(size=(40, 2))
        wm = lgcp_model(events, (8, 8), num_frequencies=3)
        assert wm.binned.counts.sum() == 40
        assert wm.param_names() == ["log_variance", "log_lengthscale_0", "log_lengthscale_1", "offset"]
        assert float(wm.theta0[-1]) == pytest.approx(math.log(40))
        assert [(b.a, b.b) for b in wm.model.bases] == [(-1.0, 2.0), (-1.0, 2.0)]


class TestLgcpSelfConsistency:
    def test_short_chain_agrees_with_long_chain(self):
        rng = np.random.default_rng(21)
        s = np.linspace(0, 1, 400)
        rate = 60 * np.exp(np.sin(5 * s))
        events = rng.uniform(size=rng.poisson(rate.mean()))
        keep = rng.uniform(size=events.shape) < np.interp(events, s, rate) / rate.max()
        wm = lgcp_model(events[keep], 40, num_frequencies=12)

        def intensity(chain):
            out = []
            for z in chain.retained[::5]:
                m, v = wm.f_moments(z)
                out.append(np.exp(np.asarray(m) + 0.5 * np.asarray(v) + float(z[-1 - wm.num_v])))
            return np.asarray(out)

        short = intensity(hmc_sample(wm.initial_state(), wm, 1000, seed=1))
        long = intensity(hmc_sample(wm.initial_state(), wm, 10_000, seed=2))
        se = np.sqrt(batch_se(short, 20) ** 2 + batch_se(long, 20) ** 2)
        z = np.abs(short.mean(0) - long.mean(0)) / se
        assert np.mean(z < 3) > 0.95
        assert np.max(z) < 5
