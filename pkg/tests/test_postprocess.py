import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats
from scipy.special import expit

from dpiw.core import Provenance, WeightVector
from dpiw.postprocess import (
    PARETO_K_THRESHOLD,
    ParetoWarning,
    beta_calibrate,
    calibrate_weights,
    fit_gpd_tail,
    gpd_quantile,
    psis_smooth,
    psis_tail_size,
    temper,
)


def _w(lv):
    return WeightVector(np.asarray(lv, float), Provenance.ESTIMATED)


def _gaussian_ratio_weights(n, sd_g, seed):
    """Weights N(0,1)/N(0,sd_g^2) at draws from the narrow proposal."""
    x = np.random.default_rng(seed).normal(0.0, sd_g, n)
    return _w(stats.norm.logpdf(x) - stats.norm.logpdf(x, scale=sd_g))


class TestTemper:
    def test_identity(self):
        w = _w([0.3, -1.0])
        assert np.array_equal(temper(w, 1.0).log_values, w.log_values)

    def test_zero_gives_unit_weights(self):
        assert np.allclose(temper(_w([2.0, -3.0]), 0.0).values, 1.0)

    def test_square_root(self):
        assert temper(_w([math.log(9.0)]), 0.5).values[0] == pytest.approx(3.0)

    def test_provenance(self):
        assert temper(_w([0.0]), 0.5).provenance is Provenance.SMOOTHED

    @pytest.mark.parametrize("tau", [-0.1, 1.5])
    def test_rejects_out_of_range(self, tau):
        with pytest.raises(ValueError):
            temper(_w([0.0]), tau)

    @given(arrays(float, 20, elements=st.floats(-30, 30)), st.floats(0.01, 1.0))
    def test_order_preserved(self, lv, tau):
        out = temper(_w(lv), tau).log_values
        assert np.all(np.diff(out[np.argsort(lv, kind="stable")]) >= 0)


class TestGpdFit:
    @pytest.mark.parametrize("k", [0.0, 0.25, 0.5])
    def test_shape_recovery(self, k):
        errs = [abs(fit_gpd_tail(stats.genpareto(c=k).rvs(2000, random_state=s))[0] - k)
                for s in range(20)]
        assert np.mean(errs) <= 0.1

    def test_scale_recovery(self):
        x = stats.genpareto(c=0.2, scale=3.0).rvs(5000, random_state=1)
        assert fit_gpd_tail(x)[1] == pytest.approx(3.0, rel=0.1)

    def test_short_tail(self):
        with pytest.raises(ValueError, match="tail too short"):
            fit_gpd_tail([1.0, 2.0, 3.0, 4.0])

    def test_constant_tail(self):
        with pytest.raises(ValueError, match="degenerate tail"):
            fit_gpd_tail(np.full(10, 2.0))

    def test_quantile_inverts_cdf(self):
        p = np.linspace(0.01, 0.99, 9)
        for k in (-0.3, 0.0, 0.6):
            assert np.allclose(gpd_quantile(p, k, 2.0), stats.genpareto(c=k, scale=2.0).ppf(p))


class TestPsis:
    def test_tail_size(self):
        assert psis_tail_size(100) == 20
        assert psis_tail_size(10_000) == 300

    def test_bounded_weights_nearly_unchanged(self):
        vals = np.random.default_rng(0).uniform(0.5, 2.0, 1000)
        with warnings.catch_warnings():
            warnings.simplefilter("error", ParetoWarning)
            res = psis_smooth(_w(np.log(vals)))
        assert not res.warning and res.k_hat < 0
        assert np.max(np.abs(res.smoothed.values / vals - 1)) < 0.05

    def test_heavy_tail_warns(self):
        with pytest.warns(ParetoWarning):
            res = psis_smooth(_gaussian_ratio_weights(2000, 0.3, 1))
        assert res.warning and res.k_hat > PARETO_K_THRESHOLD

    def test_warning_matches_threshold(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ParetoWarning)
            for sd in (0.3, 0.6, 0.9):
                res = psis_smooth(_gaussian_ratio_weights(1000, sd, 2))
                assert res.warning == (res.k_hat > 0.7)

    def test_needs_25_weights(self):
        with pytest.raises(ValueError):
            psis_smooth(_w(np.zeros(24)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.3, 1.5))
    def test_structural_properties(self, seed, sd):
        w = _gaussian_ratio_weights(200, sd, seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ParetoWarning)
            try:
                res = psis_smooth(w)
            except ValueError:
                return  # a degenerate tail is reported, not smoothed
        lv, out = w.log_values, res.smoothed.log_values
        assert out.max() <= lv.max() + 1e-12
        order = np.argsort(lv, kind="stable")
        body = order[:-res.tail_size]
        assert np.array_equal(out[body], lv[body])
        tail = order[-res.tail_size:]
        assert np.all(np.diff(out[tail]) >= -1e-12)
        assert out[tail].min() >= lv[body].max() - 1e-12


class TestBetaCalibration:
    def test_calibrated_input_gives_identity(self):
        gen = np.random.default_rng(0)
        z = gen.normal(0, 2, 50_000)
        p = expit(z)
        y = (gen.random(z.size) < p).astype(int)
        cal = beta_calibrate(p, y)
        assert cal.a == pytest.approx(1.0, abs=0.05)
        assert cal.b == pytest.approx(1.0, abs=0.05)
        assert cal.c == pytest.approx(0.0, abs=0.05)

    def test_constant_half_balanced(self):
        p = np.full(200, 0.5)
        y = np.tile([0, 1], 100)
        assert beta_calibrate(p, y)(np.array([0.5]))[0] == pytest.approx(0.5, abs=1e-6)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="single class"):
            beta_calibrate([0.2, 0.7], [1, 1])

    def test_overconfident_classifier_improves_log_loss(self):
        gen = np.random.default_rng(1)
        z = gen.normal(0, 1.5, 20_000)
        y = (gen.random(z.size) < expit(z)).astype(int)
        p = expit(3 * z)  # overconfident scores
        cal = beta_calibrate(p, y)
        loss = lambda q: -np.mean(y * np.log(q) + (1 - y) * np.log1p(-q))
        assert loss(cal(p)) < loss(p) - 0.01

    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
    def test_nonnegative_parameters_and_monotone_map(self, s, t, u):
        gen = np.random.default_rng(abs(hash((s, t, u))) % 2 ** 32)
        p = gen.uniform(0.01, 0.99, 300)
        y = (gen.random(300) < expit(s * np.log(p) - t * np.log1p(-p) + u)).astype(int)
        if y.min() == y.max():
            return
        cal = beta_calibrate(p, y)
        assert cal.a >= 0 and cal.b >= 0
        grid = np.linspace(0.001, 0.999, 200)
        assert np.all(np.diff(cal(grid)) >= -1e-12)

    def test_map_logit_is_stable_at_extremes(self):
        gen = np.random.default_rng(3)
        p = gen.uniform(0.05, 0.95, 500)
        cal = beta_calibrate(p, (gen.random(500) < p).astype(int))
        assert np.isfinite(cal.map_logit(np.array([-800.0, 800.0]))).all()
        mid = np.array([-2.0, 0.3])
        assert np.allclose(cal.map_logit(mid), cal.log_odds(expit(mid)))

    def test_calibrate_weights_provenance_and_history(self):
        gen = np.random.default_rng(4)
        p = gen.uniform(0.05, 0.95, 400)
        cal = beta_calibrate(p, (gen.random(400) < p).astype(int))
        out = calibrate_weights(_w([0.0, 1.0]), cal, 100, 100)
        assert out.provenance is Provenance.CALIBRATED
        assert out.history == ("estimated", "calibrated")
        assert out.spend is None
