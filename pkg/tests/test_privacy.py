import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpiw import privacy
from dpiw.core import InfeasibleReleaseError, PrivacySpend, Provenance, RngStream, WeightVector
from dpiw.privacy import InfiniteVarianceWarning
from dpiw.ratio import DpSgdConfig, LogisticModel


def _raw(n=5):
    return WeightVector(np.linspace(-1, 1, n), Provenance.ESTIMATED)


class TestScales:
    def test_laplace_rho_substitution(self):
        assert privacy.laplace_scale_rho(4, 10_000, 0.1, 6.0, 100) == pytest.approx(400 / 6000)

    def test_laplace_rho_linear_in_release_count(self):
        one = privacy.laplace_scale_rho(4, 10_000, 0.1, 6.0, 100)
        assert privacy.laplace_scale_rho(4, 10_000, 0.1, 6.0, 200) == pytest.approx(2 * one)

    def test_laplace_infeasible_reports_maximum(self):
        with pytest.raises(InfeasibleReleaseError) as info:
            privacy.laplace_scale_rho(4, 10_000, 0.1, 6.0, 2250)  # rho = 1.5
        assert info.value.max_release == 1499

    def test_gaussian_gamma_substitution(self):
        expected = math.sqrt(8 * 4 / 36e6 * math.log(2e5))
        got = privacy.gaussian_scale_gamma(4, 10_000, 0.1, 6.0, 1e-5, 1)
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(3.294e-3, rel=1e-3)

    def test_gaussian_gamma_linear_in_release_count(self):
        g1 = privacy.gaussian_scale_gamma(4, 10_000, 0.1, 6.0, 1e-5, 1)
        assert privacy.gaussian_scale_gamma(4, 10_000, 0.1, 6.0, 1e-5, 7) == pytest.approx(7 * g1)

    def test_gaussian_rejects_zero_delta(self):
        with pytest.raises(ValueError):
            privacy.gaussian_scale_gamma(4, 100, 0.1, 1.0, 0.0)

    @given(st.integers(1, 50), st.integers(1, 20), st.floats(0.5, 10.0))
    def test_monotone_in_release_count_and_epsilon(self, n, d, eps):
        big = 10 ** 7
        r = lambda k, e: privacy.gaussian_scale_gamma(d, big, 0.1, e, 1e-5, k)
        assert r(n + 1, eps) > r(n, eps)
        assert r(n, 2 * eps) < r(n, eps)
        l = lambda k, e: privacy.laplace_scale_rho(d, big, 0.1, e, k)
        assert l(n + 1, eps) > l(n, eps)
        assert l(n, 2 * eps) < l(n, eps)

    @given(st.floats(1.0, 1e3), st.floats(0.01, 10.0))
    def test_gaussian_decreases_in_private_size_and_lambda(self, n, lam):
        g = lambda n_, l_: privacy.gaussian_scale_gamma(3, int(n_), l_, 1.0, 1e-5)
        assert g(2 * int(n) + 2, lam) < g(int(n) + 1, lam)
        assert g(int(n) + 1, 2 * lam) < g(int(n) + 1, lam)


class TestLogLaplaceMoments:
    def test_calibrated_mean_is_one(self):
        mean, _ = privacy.log_laplace_moments(math.log(1 - 0.09), 0.3)
        assert mean == pytest.approx(1.0, abs=1e-14)

    def test_variance_at_quarter_scale(self):
        _, var = privacy.log_laplace_moments(math.log(0.9375), 0.25)
        assert var == pytest.approx(0.171875, rel=1e-12)

    def test_variance_infinite_at_half(self):
        assert privacy.log_laplace_moments(0.0, 0.5)[1] == math.inf

    def test_mean_at_half(self):
        assert privacy.log_laplace_moments(0.0, 0.5)[0] == pytest.approx(1 / 0.75)

    def test_monte_carlo_cross_check(self):
        gen = np.random.default_rng(11)
        z = privacy.sample_laplace(0.0, 0.25, 10 ** 7, gen)
        mean, var = privacy.log_laplace_moments(0.0, 0.25)
        ez = np.exp(z)
        assert abs(ez.mean() - mean) < 4 * ez.std() / math.sqrt(z.size)
        assert ez.var() == pytest.approx(var, rel=0.02)


class TestSampler:
    def test_laplace_sampler_matches_distribution(self):
        from scipy import stats

        z = privacy.sample_laplace(0.3, 0.7, 50_000, np.random.default_rng(2))
        assert stats.kstest(z, stats.laplace(loc=0.3, scale=0.7).cdf).pvalue > 1e-3


class TestPrivatize:
    def test_laplace_mean_of_exp_noise_is_one(self):
        w = WeightVector(np.zeros(10 ** 6), Provenance.ESTIMATED)
        out = privacy.privatize_weights_laplace(w, 0.3, RngStream(0), epsilon=1.0)
        v = out.values
        assert abs(v.mean() - 1.0) < 3 * v.std() / math.sqrt(v.size)

    def test_laplace_records_variance_and_spend(self):
        out = privacy.privatize_weights_laplace(_raw(), 0.25, RngStream(0), epsilon=2.0)
        assert out.provenance is Provenance.OUTPUT_LAPLACE
        assert out.info["var_exp_noise"] == pytest.approx(0.171875)
        assert out.spend.epsilon == 2.0 and out.spend.delta == 0.0
        assert out.releasable

    def test_laplace_warns_on_infinite_variance(self):
        with pytest.warns(InfiniteVarianceWarning):
            out = privacy.privatize_weights_laplace(_raw(), 0.6, RngStream(0), epsilon=1.0)
        assert out.info["infinite_variance"]

    def test_laplace_rejects_rho_of_one(self):
        with pytest.raises(ValueError):
            privacy.privatize_weights_laplace(_raw(), 1.0, RngStream(0), epsilon=1.0)

    def test_gaussian_variance_is_exact(self):
        out = privacy.privatize_weights_gaussian(_raw(), 0.1, RngStream(0), epsilon=1.0, delta=1e-5)
        assert out.info["var_exp_noise"] == pytest.approx(math.expm1(0.01), rel=1e-12)
        assert out.spend.delta == 1e-5

    def test_gaussian_zero_scale_is_identity(self):
        w = _raw()
        out = privacy.privatize_weights_gaussian(w, 0.0, RngStream(0), epsilon=1.0, delta=1e-5)
        assert np.array_equal(out.log_values, w.log_values)

    def test_gaussian_mean_of_exp_noise_is_one(self):
        w = WeightVector(np.zeros(10 ** 6), Provenance.ESTIMATED)
        v = privacy.privatize_weights_gaussian(w, 0.3, RngStream(4), epsilon=1.0, delta=1e-5).values
        assert abs(v.mean() - 1.0) < 3 * v.std() / math.sqrt(v.size)


class TestBetaNoise:
    def _model(self):
        return LogisticModel(np.array([0.5, -0.2, 0.1, 0.0]), 0.1, 1000)

    def test_scale_per_coordinate(self):
        draws = np.array([privacy.beta_noised_model(self._model(), 1.0, RngStream(s)).beta
                          for s in range(4000)]) - self._model().beta
        # Laplace(0, b) has mean absolute deviation b
        assert np.abs(draws).mean() == pytest.approx(0.04, rel=0.05)

    def test_huge_epsilon_leaves_coefficients(self):
        out = privacy.beta_noised_model(self._model(), 1e15, RngStream(0))
        assert np.allclose(out.beta, self._model().beta, atol=1e-12)
        assert out.noised

    def test_variance_term(self):
        assert privacy.beta_noise_variance(1, 100, 1.0, 1.0) == pytest.approx(8e-4)
        assert privacy.beta_noise_variance(0, 100, 1.0, 1.0) == 0.0
        assert privacy.beta_noise_variance(3, 100, 1.0, 2.0) == pytest.approx(
            privacy.beta_noise_variance(3, 100, 1.0, 1.0) / 4)


class TestMaxReleasable:
    def test_strict_inequality(self):
        assert privacy.max_releasable_weights(4, 10_000, 0.1, 6.0) == 1499

    def test_finite_variance_halves(self):
        assert privacy.max_releasable_weights(4, 10_000, 0.1, 6.0, True) == 749

    def test_infeasible(self):
        with pytest.raises(InfeasibleReleaseError):
            privacy.max_releasable_weights(100, 10, 0.1, 1.0)

    @given(st.integers(1, 30), st.integers(10, 10 ** 5), st.floats(0.01, 1.0), st.floats(0.1, 10.0))
    def test_result_is_the_largest_feasible(self, d, n, lam, eps):
        try:
            k = privacy.max_releasable_weights(d, n, lam, eps)
        except InfeasibleReleaseError:
            assert 2 * math.sqrt(d) / (n * lam * eps) >= 1.0
            return
        assert privacy.laplace_scale_rho(d, n, lam, eps, k) < 1.0
        with pytest.raises(InfeasibleReleaseError):
            privacy.laplace_scale_rho(d, n, lam, eps, k + 1)


def _independent_accounting(L, n_total, T, sigma, delta):
    q = L / n_total
    e = math.sqrt(2 * math.log(1.25 / delta)) / sigma
    ea = q * e
    basic = T * ea
    adv = math.sqrt(2 * T * math.log(1 / delta)) * ea + T * ea * (math.exp(ea) - 1)
    return q, e, ea, basic, adv


class TestAccountant:
    def test_full_batch_single_step_is_gaussian_mechanism(self):
        cfg = DpSgdConfig(lot_size=100, steps=1, noise_multiplier=2.0, delta=1e-5)
        acc = privacy.dp_sgd_accounting(cfg, 60, 40)
        assert acc.q == 1.0
        assert acc.basic.epsilon == pytest.approx(math.sqrt(2 * math.log(1.25e5)) / 2.0)

    def test_halving_lot_halves_amplified_epsilon(self):
        a = privacy.dp_sgd_accounting(DpSgdConfig(lot_size=200, steps=5), 500, 500)
        b = privacy.dp_sgd_accounting(DpSgdConfig(lot_size=100, steps=5), 500, 500)
        assert b.eps_amplified == pytest.approx(a.eps_amplified / 2)

    def test_matches_independent_arithmetic(self):
        cfg = DpSgdConfig(lot_size=10, steps=100, noise_multiplier=5.2, delta=1e-5)
        acc = privacy.dp_sgd_accounting(cfg, 500, 500)
        q, e, ea, basic, adv = _independent_accounting(10, 1000, 100, 5.2, 1e-5)
        assert acc.q == pytest.approx(0.01, abs=1e-15)
        assert abs(acc.basic.epsilon - basic) < 1e-12
        assert abs(acc.advanced.epsilon - adv) < 1e-12
        assert acc.chosen.epsilon == min(basic, adv) or abs(acc.chosen.epsilon - min(basic, adv)) < 1e-12
        assert acc.advanced.delta == pytest.approx(100 * 0.01 * 1e-5 + 1e-5)

    def test_zero_noise_is_infinite(self):
        spend = privacy.dp_sgd_privacy(DpSgdConfig(noise_multiplier=0.0), 1000, 1000)
        assert spend.epsilon == math.inf
        assert "conservative" in spend.mechanism

    def test_calibration_meets_target(self):
        cfg = DpSgdConfig(lot_size=64, steps=200)
        sigma = privacy.calibrate_noise_multiplier(cfg, 1000, 1000, 3.0)
        from dataclasses import replace

        at = lambda s: privacy.dp_sgd_accounting(replace(cfg, noise_multiplier=s), 1000, 1000).chosen.epsilon
        assert at(sigma) <= 3.0
        assert at(sigma * (1 - 1e-6)) > 3.0 - 1e-6


class TestReleaseFile:
    def test_privatized_written(self, tmp_path):
        w = privacy.privatize_weights_laplace(_raw(), 0.2, RngStream(0), epsilon=1.5)
        path = privacy.write_release_csv(w, tmp_path / "r.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(privacy.RELEASE_COLUMNS)
        assert lines[1].split(",")[2:] == ["output_laplace", "1.5", "0.0"]

    def test_raw_refused(self, tmp_path):
        with pytest.raises(PermissionError, match="unsafe-release"):
            privacy.write_release_csv(_raw(), tmp_path / "r.csv")

    def test_raw_with_flag_records_infinite_epsilon(self, tmp_path):
        path = privacy.write_release_csv(_raw(), tmp_path / "r.csv", unsafe_release=True)
        assert path.read_text().splitlines()[1].split(",")[3] == "inf"

    def test_uniform_has_zero_epsilon(self, tmp_path):
        path = privacy.write_release_csv(WeightVector.uniform(3), tmp_path / "r.csv")
        assert path.read_text().splitlines()[1].split(",")[3] == "0.0"
