import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpiw.bayes import (
    IwPosteriorSpec,
    McmcConfig,
    NonConvergenceWarning,
    effective_sample_size_mcmc,
    expected_posterior_kld,
    gaussian_mean_kld_model,
    gaussian_mean_posterior,
    gaussian_mean_spec,
    gaussian_prior,
    iw_log_posterior,
    logistic_spec,
    sample_iw_posterior,
    split_rhat,
)
from dpiw.core import Dataset, Provenance, RngStream, WeightVector


def _w(values):
    return WeightVector(np.log(np.asarray(values, float)), Provenance.ESTIMATED)


def _conjugate(x, w, prior_var=10.0):
    """Independent closed form: precision-weighted combination of prior and data."""
    precision = 1 / prior_var + np.sum(w)
    return np.sum(w * x) / precision, 1 / precision


class TestClosedForm:
    @given(st.integers(0, 2 ** 31), st.integers(1, 30))
    def test_matches_independent_formula(self, seed, n):
        gen = np.random.default_rng(seed)
        x, w = gen.normal(size=n), gen.exponential(size=n)
        m, v = gaussian_mean_posterior(x, w)
        em, ev = _conjugate(x, w)
        assert m == pytest.approx(em) and v == pytest.approx(ev)

    def test_kernel_is_gaussian_in_theta(self):
        gen = np.random.default_rng(0)
        x, w = gen.normal(1.0, 1.0, 20), gen.exponential(size=20)
        spec = gaussian_mean_spec(Dataset(x), _w(w))
        m, v = gaussian_mean_posterior(x, w)
        grid = np.array([-1.0, 0.0, 0.7, 2.0])
        lp = np.array([iw_log_posterior(spec, [t]) for t in grid])
        quad = -0.5 * (grid - m) ** 2 / v
        assert np.allclose(lp - lp[0], quad - quad[0])


class TestKernel:
    def test_weight_two_equals_duplication(self):
        x = np.array([0.3, -1.2, 2.0])
        dup = Dataset(np.array([0.3, 0.3, -1.2, 2.0]))
        a = gaussian_mean_spec(Dataset(x), _w([2.0, 1.0, 1.0]))
        b = gaussian_mean_spec(dup, WeightVector.uniform(4))
        for t in (-0.5, 0.1, 1.4):
            assert iw_log_posterior(a, [t]) == pytest.approx(iw_log_posterior(b, [t]))

    def test_zero_weights_give_prior(self):
        x = Dataset(np.array([5.0, 6.0]))
        spec = gaussian_mean_spec(x, WeightVector(np.full(2, -800.0), Provenance.ESTIMATED))
        log_prior, _ = gaussian_prior([0.0], 10.0)
        for t in (-1.0, 3.0):
            assert iw_log_posterior(spec, [t]) == pytest.approx(float(log_prior(np.array([[t]]))[0]))

    def test_non_finite_likelihood_reported(self):
        def log_lik(theta, x, y):
            return np.where(x[None, :, 0] > 0, -np.inf, 0.0) + 0 * theta[:, :1]

        lp, ps = gaussian_prior([0.0], 1.0)
        spec = IwPosteriorSpec(lp, log_lik, Dataset(np.array([-1.0, 1.0])),
                               WeightVector.uniform(2), 1, True, ps)
        with pytest.raises(FloatingPointError, match="observation 1"):
            iw_log_posterior(spec, [0.0])

    def test_unvectorized_callables(self):
        x = Dataset(np.array([0.5, 1.5]))
        spec = IwPosteriorSpec(lambda t: -0.5 * float(t @ t),
                               lambda t, xs, y: -0.5 * (xs[:, 0] - t[0]) ** 2,
                               x, WeightVector.uniform(2), 1, vectorized=False)
        assert iw_log_posterior(spec, [1.0]) == pytest.approx(-0.5 - 0.25)

    def test_logistic_needs_labels(self):
        with pytest.raises(ValueError):
            logistic_spec(Dataset(np.zeros((3, 2))), WeightVector.uniform(3))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            gaussian_mean_spec(Dataset(np.zeros(3)), WeightVector.uniform(2))


class TestDiagnostics:
    def test_rhat_near_one_for_iid_chains(self):
        chains = np.random.default_rng(0).standard_normal((4, 2000, 2))
        assert np.all(np.abs(split_rhat(chains) - 1) < 0.01)

    def test_rhat_flags_separated_chains(self):
        chains = np.random.default_rng(1).standard_normal((4, 500, 1))
        chains[0] += 3.0
        assert split_rhat(chains)[0] > 1.1

    def test_rhat_flags_trend(self):
        chains = np.random.default_rng(2).standard_normal((4, 500, 1))
        chains += np.linspace(0, 4, 500)[None, :, None]
        assert split_rhat(chains)[0] > 1.1

    def test_ess_iid(self):
        chains = np.random.default_rng(3).standard_normal((4, 4000, 1))
        assert effective_sample_size_mcmc(chains)[0] == pytest.approx(16_000, rel=0.15)

    def test_ess_ar1(self):
        gen = np.random.default_rng(4)
        phi, n = 0.8, 20_000
        x = np.empty((4, n))
        x[:, 0] = gen.standard_normal(4)
        for t in range(1, n):
            x[:, t] = phi * x[:, t - 1] + math.sqrt(1 - phi ** 2) * gen.standard_normal(4)
        expected = 4 * n * (1 - phi) / (1 + phi)
        assert effective_sample_size_mcmc(x[:, :, None])[0] == pytest.approx(expected, rel=0.15)


class TestSampler:
    def test_conjugate_moments(self):
        gen = np.random.default_rng(5)
        x, w = gen.normal(0.5, 1.0, 50), gen.exponential(size=50)
        post = sample_iw_posterior(gaussian_mean_spec(Dataset(x), _w(w)), McmcConfig(),
                                   RngStream(0))
        m, v = _conjugate(x, w)
        assert post.converged and 0 < post.acceptance_rate < 1
        assert abs(post.mean()[0] - m) < 3 * post.mcse_mean()[0]
        assert post.cov()[0, 0] == pytest.approx(v, rel=0.1)

    def test_two_dimensional_logistic_runs(self):
        gen = np.random.default_rng(6)
        x = gen.normal(size=(200, 2))
        y = (gen.random(200) < 1 / (1 + np.exp(-(x @ [1.0, -1.0] + 0.5)))).astype(int)
        post = sample_iw_posterior(logistic_spec(Dataset(x, y), WeightVector.uniform(200)),
                                   McmcConfig(draws=3000), RngStream(1))
        assert post.converged
        assert post.mean() == pytest.approx([1.0, -1.0, 0.5], abs=0.5)

    def test_deterministic_given_stream(self):
        spec = gaussian_mean_spec(Dataset(np.array([0.1, 0.4])), WeightVector.uniform(2))
        cfg = McmcConfig(draws=200)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonConvergenceWarning)
            a = sample_iw_posterior(spec, cfg, RngStream(9))
            b = sample_iw_posterior(spec, cfg, RngStream(9))
        assert np.array_equal(a.draws, b.draws)

    def test_short_run_warns(self):
        spec = gaussian_mean_spec(Dataset(np.random.default_rng(7).normal(size=500)),
                                  WeightVector.uniform(500), prior_var=1e4)
        with pytest.warns(NonConvergenceWarning):
            post = sample_iw_posterior(spec, McmcConfig(draws=40), RngStream(2))
        assert not post.converged and post.warnings

    def test_needs_initial_state(self):
        lp, _ = gaussian_prior([0.0], 1.0)
        spec = IwPosteriorSpec(lp, lambda t, x, y: np.zeros((len(t), 1)),
                               Dataset(np.zeros(1)), WeightVector.uniform(1), 1)
        with pytest.raises(ValueError, match="init"):
            sample_iw_posterior(spec, McmcConfig(draws=20), RngStream(0))

    def test_draws_csv(self, tmp_path):
        spec = gaussian_mean_spec(Dataset(np.zeros(3)), WeightVector.uniform(3))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonConvergenceWarning)
            post = sample_iw_posterior(spec, McmcConfig(draws=40), RngStream(0))
        post.to_csv(tmp_path / "d.csv", ["mu"])
        with (tmp_path / "d.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["chain", "mu"] and len(rows) == 1 + 4 * 20

    def test_config_validation(self):
        with pytest.raises(ValueError):
            McmcConfig(chains=1)
        with pytest.raises(ValueError):
            McmcConfig(warmup_fraction=1.0)


class TestPosteriorKld:
    def test_gaussian_mean_value(self):
        n = 50
        k = n / (n + 0.1)
        expected = 0.5 - 0.5 * (1 - k) ** 2 + 0.5 * k ** 2
        est, se = expected_posterior_kld(gaussian_mean_kld_model(), n, 2000, RngStream(0),
                                         inner_draws=5000)
        assert abs(est - expected) < 3 * se + 0.02

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            expected_posterior_kld(gaussian_mean_kld_model(), 0, 5, RngStream(0))
