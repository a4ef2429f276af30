"""Noise mechanisms for importance weights and a conservative DP-SGD accountant.

Output noising perturbs each log-weight with noise whose exponential has
mean one, so the importance-sampling estimator stays unbiased. Coefficient
noising (perturbing the logistic coefficients) is kept as a biased baseline.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import (
    InfeasibleReleaseError,
    PrivacySpend,
    Provenance,
    RngStream,
    WeightVector,
)

__all__ = [
    "NoiseSpec",
    "InfiniteVarianceWarning",
    "laplace_scale_rho",
    "gaussian_scale_gamma",
    "log_laplace_moments",
    "laplace_noise_spec",
    "gaussian_noise_spec",
    "sample_laplace",
    "privatize_weights_laplace",
    "privatize_weights_gaussian",
    "beta_noised_model",
    "beta_noise_variance",
    "max_releasable_weights",
    "DpSgdAccounting",
    "dp_sgd_accounting",
    "dp_sgd_privacy",
    "calibrate_noise_multiplier",
    "write_release_csv",
    "RELEASE_COLUMNS",
]


class InfiniteVarianceWarning(RuntimeWarning):
    """Multiplicative noise with unbounded second moment."""


@dataclass(frozen=True)
class NoiseSpec:
    family: str  # "laplace" or "gaussian"
    loc: float
    scale: float

    def __post_init__(self):
        if self.family not in ("laplace", "gaussian"):
            raise ValueError(f"unknown noise family {self.family!r}")
        if not self.scale >= 0:
            raise ValueError(f"noise scale must be nonnegative, got {self.scale}")

    def exp_moments(self) -> tuple:
        """Mean and variance of ``exp(zeta)``; ``inf`` where they diverge."""
        if self.family == "laplace":
            return log_laplace_moments(self.loc, self.scale)
        g2 = self.scale ** 2
        mean = math.exp(self.loc + g2 / 2)
        return mean, math.exp(2 * self.loc + g2) * math.expm1(g2)

    def to_dict(self) -> dict:
        return {"family": self.family, "loc": self.loc, "scale": self.scale}


def _check_positive(**kwargs):
    for name, v in kwargs.items():
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")


def laplace_scale_rho(d: int, n_private: int, lam: float, epsilon: float,
                      n_release: int = 1) -> float:
    """Laplace scale for output noising with the budget split over ``n_release`` weights.

    Raises:
        InfeasibleReleaseError: if the scale reaches 1, where no location
            keeps ``E[exp(zeta)] = 1``.
    """
    _check_positive(d=d, n_private=n_private, lam=lam, epsilon=epsilon, n_release=n_release)
    rho = 2.0 * math.sqrt(d) * n_release / (n_private * lam * epsilon)
    if rho >= 1.0:
        bound = n_private * lam * epsilon / (2.0 * math.sqrt(d))
        max_release = max(math.ceil(bound) - 1, 0)
        raise InfeasibleReleaseError(
            f"Laplace scale rho = {rho:.4g} >= 1 for {n_release} released weights; "
            f"at most {max_release} weights can be released unbiasedly",
            max_release,
        )
    return rho


def gaussian_scale_gamma(d: int, n_private: int, lam: float, epsilon: float,
                         delta: float, n_release: int = 1) -> float:
    _check_positive(d=d, n_private=n_private, lam=lam, epsilon=epsilon, n_release=n_release)
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    eps_each = epsilon / n_release
    return math.sqrt(8.0 * d / (n_private * lam * eps_each) ** 2 * math.log(2.0 / delta))


def log_laplace_moments(mu: float, scale: float) -> tuple:
    """Mean and variance of ``exp(Z)`` for ``Z ~ Laplace(mu, scale)``.

    The mean is finite for ``scale < 1`` and the variance for ``scale < 1/2``;
    divergent moments are returned as ``inf``.
    """
    if not scale >= 0:
        raise ValueError(f"scale must be nonnegative, got {scale}")
    s2 = scale * scale
    mean = math.exp(mu) / (1.0 - s2) if scale < 1 else math.inf
    if scale < 0.5:
        var = math.exp(2 * mu) * (1.0 / (1.0 - 4 * s2) - 1.0 / (1.0 - s2) ** 2)
    else:
        var = math.inf
    return mean, var


def laplace_noise_spec(rho: float) -> NoiseSpec:
    if not 0 < rho < 1:
        raise ValueError(f"rho must lie in (0, 1) for unbiased output noise, got {rho}")
    return NoiseSpec("laplace", math.log1p(-rho * rho), rho)


def gaussian_noise_spec(gamma: float) -> NoiseSpec:
    if not gamma >= 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    return NoiseSpec("gaussian", -0.5 * gamma * gamma, gamma)


def sample_laplace(loc: float, scale, size, gen: np.random.Generator) -> np.ndarray:
    """Laplace draws by inverting the CDF of one uniform per draw."""
    u = gen.random(size) - 0.5
    tail = np.maximum(1.0 - 2.0 * np.abs(u), np.finfo(float).tiny)
    return loc - scale * np.sign(u) * np.log(tail)


def _noise_info(spec: NoiseSpec) -> dict:
    _, var = spec.exp_moments()
    return {"noise": spec.to_dict(), "var_exp_noise": var,
            "infinite_variance": not math.isfinite(var)}


def privatize_weights_laplace(w: WeightVector, rho: float, rng: RngStream, *,
                              epsilon: float) -> WeightVector:
    """Multiply each weight by calibrated log-Laplace noise.

    ``epsilon`` is the total budget the caller used to compute ``rho`` and is
    recorded as the spend. Scales in [1/2, 1) keep the estimator unbiased but
    make its variance infinite; a warning is issued and recorded.
    """
    spec = laplace_noise_spec(rho)
    if rho >= 0.5:
        warnings.warn(
            f"rho = {rho:.4g} >= 0.5: the multiplicative noise has infinite variance",
            InfiniteVarianceWarning, stacklevel=2,
        )
    noise = sample_laplace(spec.loc, spec.scale, w.n, rng.generator())
    spend = PrivacySpend(epsilon, 0.0, f"output Laplace (rho={rho:.6g}, n={w.n})")
    return w.derive(w.log_values + noise, Provenance.OUTPUT_LAPLACE, spend=spend,
                    info=_noise_info(spec))


def privatize_weights_gaussian(w: WeightVector, gamma: float, rng: RngStream, *,
                               epsilon: float, delta: float) -> WeightVector:
    """Multiply each weight by mean-one log-normal noise."""
    spec = gaussian_noise_spec(gamma)
    noise = rng.generator().normal(spec.loc, spec.scale, size=w.n) if gamma > 0 else np.zeros(w.n)
    spend = PrivacySpend(epsilon, delta, f"output Gaussian (gamma={gamma:.6g}, n={w.n})")
    return w.derive(w.log_values + noise, Provenance.OUTPUT_GAUSSIAN, spend=spend,
                    info=_noise_info(spec))


def beta_noised_model(model, epsilon: float, rng: RngStream):
    """Perturb logistic coefficients with Laplace noise (biased baseline).

    Weights computed from the noised coefficients are exponentials of a
    noisy linear form, so the importance estimator built on them is biased
    upward. Use output noising when an unbiased estimate is required.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    scale = 2.0 * math.sqrt(model.d) / (model.n_private * model.lam * epsilon)
    if scale == 0.0:
        noise = np.zeros(model.d)
    else:
        noise = sample_laplace(0.0, scale, model.d, rng.generator())
    spend = PrivacySpend(epsilon, 0.0, f"coefficient Laplace (scale={scale:.6g})")
    return replace(model, beta=model.beta + noise, spend=spend)


def beta_noise_variance(d: int, n_private: int, lam: float, epsilon: float) -> float:
    """Variance added to the coefficient-noised estimator by the coefficient noise."""
    if d < 0:
        raise ValueError("d must be nonnegative")
    _check_positive(n_private=n_private, lam=lam, epsilon=epsilon)
    return 4.0 * (d + 1) * d / (n_private * lam * epsilon) ** 2


def max_releasable_weights(d: int, n_private: int, lam: float, epsilon: float,
                           require_finite_variance: bool = False) -> int:
    """Largest number of weights releasable with scale strictly below the threshold."""
    _check_positive(d=d, n_private=n_private, lam=lam, epsilon=epsilon)
    threshold = 0.5 if require_finite_variance else 1.0
    bound = threshold * n_private * lam * epsilon / (2.0 * math.sqrt(d))
    n = math.ceil(bound) - 1 if math.isfinite(bound) else 0
    # Guard the floating-point edge on both sides of the strict inequality.
    rho = lambda k: 2.0 * math.sqrt(d) * k / (n_private * lam * epsilon)
    while n >= 1 and rho(n) >= threshold:
        n -= 1
    while rho(n + 1) < threshold:
        n += 1
    if n < 1:
        raise InfeasibleReleaseError(
            f"no weight can be released: scale for a single weight is {rho(1):.4g} "
            f">= {threshold}", 0)
    return n


# --------------------------------------------------------------------------
# Accountant for relaxed DP-SGD
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DpSgdAccounting:
    q: float
    eps_step: float
    eps_amplified: float
    basic: PrivacySpend
    advanced: PrivacySpend

    @property
    def chosen(self) -> PrivacySpend:
        return self.advanced if self.advanced.epsilon < self.basic.epsilon else self.basic

    def to_dict(self) -> dict:
        return {"q": self.q, "eps_step": self.eps_step, "eps_amplified": self.eps_amplified,
                "basic": self.basic.to_dict(), "advanced": self.advanced.to_dict(),
                "chosen": self.chosen.to_dict(), "label": "conservative"}


def dp_sgd_accounting(cfg, n_private: int, n_synth: int) -> DpSgdAccounting:
    """Per-step Gaussian-mechanism epsilon, amplified by sampling, then composed.

    Both basic and advanced composition are computed; the accountant does not
    use moments or Renyi bounds, so the totals are conservative.
    """
    delta = cfg.delta
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if cfg.noise_multiplier < 0:
        raise ValueError("noise multiplier must be nonnegative")
    n_total = n_private + n_synth
    if cfg.lot_size > n_total:
        raise ValueError(f"lot size {cfg.lot_size} exceeds N_D + N_G = {n_total}")
    q = cfg.lot_size / n_total
    T = cfg.steps
    log_term = math.log(1.25 / delta)
    if cfg.noise_multiplier == 0:
        eps_step = math.inf
    else:
        eps_step = math.sqrt(2.0 * log_term) / cfg.noise_multiplier
    eps_amp = q * eps_step
    delta_basic = min(T * q * delta, 1 - 1e-15)
    basic = PrivacySpend(T * eps_amp, delta_basic, "DP-SGD basic composition")
    if math.isfinite(eps_amp):
        adv_eps = (math.sqrt(2.0 * T * math.log(1.0 / delta)) * eps_amp
                   + T * eps_amp * math.expm1(eps_amp))
    else:
        adv_eps = math.inf
    advanced = PrivacySpend(adv_eps, min(T * q * delta + delta, 1 - 1e-15),
                            "DP-SGD advanced composition")
    return DpSgdAccounting(q, eps_step, eps_amp, basic, advanced)


def dp_sgd_privacy(cfg, n_private: int, n_synth: int) -> PrivacySpend:
    acc = dp_sgd_accounting(cfg, n_private, n_synth)
    chosen = acc.chosen
    return replace(chosen, mechanism=f"relaxed DP-SGD ({chosen.mechanism}, conservative)")


def calibrate_noise_multiplier(cfg, n_private: int, n_synth: int, target_epsilon: float,
                               upper: float = 1e6) -> float:
    """Smallest noise multiplier whose conservative spend stays within ``target_epsilon``."""
    if not target_epsilon > 0:
        raise ValueError("target epsilon must be positive")
    spend = lambda s: dp_sgd_accounting(replace(cfg, noise_multiplier=s), n_private, n_synth).chosen.epsilon
    if spend(upper) > target_epsilon:
        raise ValueError(f"target epsilon {target_epsilon} unreachable with noise multiplier <= {upper}")
    lo, hi = 0.0, upper
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == 0.0 or spend(mid) > target_epsilon:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-9 * hi:
            break
    return hi


# --------------------------------------------------------------------------
# Release files
# --------------------------------------------------------------------------

RELEASE_COLUMNS = ("index", "log_weight", "provenance", "epsilon", "delta")


def write_release_csv(w: WeightVector, path, unsafe_release: bool = False) -> Path:
    """Write weights for release outside the trust boundary.

    Only weights carrying a finite privacy spend (privatized, derived from a
    private discriminator or model, or uniform) pass the policy. Raw weights
    need ``unsafe_release=True`` and are written with ``epsilon = inf``.
    """
    if not w.releasable and not unsafe_release:
        raise PermissionError(
            f"refusing to release {w.provenance.value} weights (history: "
            f"{' -> '.join(w.history)}): they carry no differential-privacy "
            "guarantee; privatize them first or pass --unsafe-release"
        )
    eps = w.spend.epsilon if w.releasable else math.inf
    delta = w.spend.delta if w.releasable else 0.0
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RELEASE_COLUMNS)
        for i, lv in enumerate(w.log_values):
            writer.writerow([i, repr(float(lv)), w.provenance.value, repr(float(eps)),
                             repr(float(delta))])
    return path
