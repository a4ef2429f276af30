"""Weight stabilization: tempering, Pareto-smoothed importance sampling and
beta calibration of classifier probabilities."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logit, logsumexp

from .core import ConvergenceError, Provenance, WeightVector
from .ratio import _newton_logistic

__all__ = [
    "ParetoWarning",
    "PsisResult",
    "BetaCalibration",
    "temper",
    "fit_gpd_tail",
    "gpd_quantile",
    "psis_tail_size",
    "psis_smooth",
    "beta_calibrate",
    "calibrate_weights",
    "PARETO_K_THRESHOLD",
]

PARETO_K_THRESHOLD = 0.7


class ParetoWarning(UserWarning):
    """Estimated tail shape above the reliability threshold."""


def temper(w: WeightVector, tau: float) -> WeightVector:
    """Raise weights to the power ``tau`` in [0, 1]."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return w.derive(w.log_values * tau, Provenance.SMOOTHED, info={"temper_tau": tau})


def fit_gpd_tail(exceedances, prior_k_weight: float = 10.0) -> tuple:
    """Fit a generalized Pareto distribution to threshold exceedances.

    Uses the Zhang-Stephens empirical-Bayes profile estimator with the
    shape shrunk slightly toward 0.5, as in standard PSIS implementations.

    Returns:
        ``(k_hat, sigma_hat)``; positive ``k_hat`` means a heavy tail.
    """
    x = np.sort(np.asarray(exceedances, dtype=float).ravel())
    n = x.size
    if n < 5:
        raise ValueError(f"tail too short: {n} exceedances, need at least 5")
    if not np.isfinite(x).all() or x[0] < 0:
        raise ValueError("exceedances must be finite and nonnegative")
    if x[-1] <= 0 or x[-1] == x[0]:
        raise ValueError(
            f"degenerate tail: all {n} exceedances equal {x[0]!r}; no scale to estimate")
    prior_bs = 3.0
    m = 30 + int(math.sqrt(n))
    b = 1.0 - np.sqrt(m / (np.arange(1, m + 1) - 0.5))
    quartile = x[int(n / 4 + 0.5) - 1]
    if quartile <= 0:
        quartile = x[x > 0][0]
    b = b / (prior_bs * quartile) + 1.0 / x[-1]
    k = np.log1p(-b[:, None] * x).mean(axis=1)
    profile = n * (np.log(-b / k) - k - 1.0)
    weights = np.exp(profile - logsumexp(profile))
    keep = weights >= 10 * np.finfo(float).eps
    weights, b = weights[keep], b[keep]
    weights /= weights.sum()
    b_post = float(np.sum(b * weights))
    k_post = float(np.log1p(-b_post * x).mean())
    sigma = -k_post / b_post
    k_post = (n * k_post + prior_k_weight * 0.5) / (n + prior_k_weight)
    return k_post, sigma


def gpd_quantile(p, k: float, sigma: float) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if abs(k) < 1e-12:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-k * np.log1p(-p)) / k


def psis_tail_size(n: int) -> int:
    return min(math.ceil(0.2 * n), math.ceil(3.0 * math.sqrt(n)))


@dataclass(frozen=True)
class PsisResult:
    smoothed: WeightVector
    k_hat: float
    sigma_hat: float
    warning: bool
    tail_size: int

    def to_dict(self) -> dict:
        return {"k_hat": self.k_hat, "sigma_hat": self.sigma_hat, "warning": self.warning,
                "tail_size": self.tail_size}


def psis_smooth(w: WeightVector) -> PsisResult:
    """Replace the largest weights by fitted generalized Pareto quantiles.

    The ``M`` largest weights are fitted as exceedances over the next
    largest one and replaced, in rank order, by the GPD quantiles at
    ``(i - 0.5) / M``, capped at the raw maximum. Weights below the tail are
    untouched.
    """
    n = w.n
    if n < 25:
        raise ValueError(f"PSIS needs at least 25 weights, got {n}")
    m = psis_tail_size(n)
    lv = w.log_values
    shift = lv.max()
    order = np.argsort(lv, kind="stable")
    tail_idx = order[-m:]
    cutoff = lv[order[-m - 1]] - shift
    exp_cutoff = math.exp(cutoff)
    exceed = np.exp(lv[tail_idx] - shift) - exp_cutoff
    k_hat, sigma = fit_gpd_tail(exceed)
    new_lv = lv.copy()
    if math.isfinite(k_hat):
        q = gpd_quantile((np.arange(m) + 0.5) / m, k_hat, sigma)
        smoothed_tail = np.minimum(np.log(q + exp_cutoff), 0.0)
        new_lv[tail_idx] = smoothed_tail + shift
    warn = bool(k_hat > PARETO_K_THRESHOLD)
    if warn:
        warnings.warn(f"Pareto shape k_hat = {k_hat:.3f} exceeds {PARETO_K_THRESHOLD}: "
                      "importance estimates are unreliable", ParetoWarning, stacklevel=2)
    smoothed = w.derive(new_lv, Provenance.SMOOTHED,
                        info={"psis_k_hat": k_hat, "psis_warning": warn})
    return PsisResult(smoothed, float(k_hat), float(sigma * math.exp(shift)), warn, m)


@dataclass(frozen=True)
class BetaCalibration:
    """Monotone map ``p -> sigmoid(a ln p - b ln(1 - p) + c)``.

    ``n_positive`` and ``n_negative`` are the holdout class counts; the
    calibrated probabilities refer to that class balance.
    """

    a: float
    b: float
    c: float
    n_positive: int
    n_negative: int

    def __call__(self, probs) -> np.ndarray:
        p = np.asarray(probs, dtype=float)
        if np.any((p <= 0) | (p >= 1)):
            raise ValueError("probabilities must lie strictly inside (0, 1)")
        return expit(self.a * np.log(p) - self.b * np.log1p(-p) + self.c)

    def log_odds(self, probs) -> np.ndarray:
        p = np.asarray(probs, dtype=float)
        return self.a * np.log(p) - self.b * np.log1p(-p) + self.c

    def map_logit(self, z) -> np.ndarray:
        """Calibrated log-odds from uncalibrated log-odds, stable for large ``|z|``."""
        z = np.asarray(z, dtype=float)
        return self.a * log_expit(z) - self.b * log_expit(-z) + self.c

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "n_positive": self.n_positive,
                "n_negative": self.n_negative}


def beta_calibrate(probs, labels, ridge: float = 1e-8) -> BetaCalibration:
    """Fit beta calibration by maximum likelihood on a labelled holdout.

    If the unconstrained fit gives a negative ``a`` or ``b``, that term is
    fixed at zero and the remaining parameters are refitted, which keeps the
    map nondecreasing. When no slope survives, the map is the constant
    holdout base rate.
    """
    p = np.asarray(probs, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if p.shape != y.shape:
        raise ValueError("probabilities and labels differ in length")
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("calibration holdout contains a single class")
    feats = np.column_stack([np.log(p), -np.log1p(-p)])

    def fit(active):
        X = np.column_stack([feats[:, active], np.ones(p.size)])
        try:
            coef, _, _ = _newton_logistic(X, y, ridge)
        except ConvergenceError as exc:
            raise ConvergenceError(f"beta calibration did not converge: {exc}",
                                   **exc.diagnostics) from exc
        full = np.zeros(3)
        full[[*active, 2]] = coef
        return full

    coef = fit([0, 1])
    if coef[0] < 0 and coef[1] < 0:
        coef = np.array([0.0, 0.0, logit(n_pos / y.size)])
    elif coef[0] < 0:
        coef = fit([1])
    elif coef[1] < 0:
        coef = fit([0])
    if coef[0] < 0 or coef[1] < 0:
        coef = np.array([0.0, 0.0, logit(n_pos / y.size)])
    return BetaCalibration(float(coef[0]), float(coef[1]), float(coef[2]), n_pos, n_neg)


def calibrate_weights(w: WeightVector, calibration: BetaCalibration, n_private: int,
                      n_synth: int) -> WeightVector:
    """Recalibrate weights produced from classifier logits.

    The classifier probability is recovered from each log-weight, mapped
    through the calibration, and converted back with the prior-odds term of
    the holdout's class balance.
    """
    prior = math.log(n_private / n_synth)
    lw = calibration.map_logit(w.log_values - prior) + math.log(calibration.n_positive / calibration.n_negative)
    return w.derive(lw, Provenance.CALIBRATED,
                    info={"calibration": calibration.to_dict(),
                          "calibration_note": "holdout treated as analyst-side data"})
