"""Named weighting schemes shared by the experiment harness and the Bayesian
experiment: fit a ratio model, privatize, and return weights for a set of
synthetic points."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import privacy
from .core import Dataset, PrivacySpend, RngStream, WeightVector
from .ratio import (
    DpSgdConfig,
    fit_logistic_l2,
    fit_mlp_dpsgd,
    fit_mlp_sgd,
    import_external_probabilities,
    log_weights_from_classifier,
)

__all__ = ["SCHEMES", "PRIVATE_SCHEMES", "WeighSettings", "WeighResult", "weigh"]

SCHEMES = ("none", "true", "logreg", "mlp", "beta_noised", "output_lapl", "output_norm",
           "priv_mlp", "discriminator")
PRIVATE_SCHEMES = ("beta_noised", "output_lapl", "output_norm", "priv_mlp")


@dataclass(frozen=True)
class WeighSettings:
    epsilon: float = 3.0  # budget for the weighting stage
    delta: float = 1e-5
    lam: float = 0.1
    finite_variance: bool = True  # output noise scale below 1/2 rather than below 1
    dpsgd: DpSgdConfig = field(default_factory=DpSgdConfig)
    calibrate_dpsgd: bool = True  # choose the noise multiplier to meet ``epsilon``
    discriminator_path: Optional[str] = None


@dataclass(frozen=True)
class WeighResult:
    weights: WeightVector
    subset: Optional[np.ndarray] = None  # indices of released points, when a subset
    spends: tuple = ()
    info: dict = field(default_factory=dict)


def _release_subset(n_points: int, n_release: int, rng: RngStream) -> Optional[np.ndarray]:
    if n_release >= n_points:
        return None
    return np.sort(rng.generator().choice(n_points, n_release, replace=False))


def weigh(scheme: str, real: Dataset, synth: Dataset, points: Dataset, settings: WeighSettings,
          rng: RngStream, true_weights: Optional[Callable[[Dataset], WeightVector]] = None,
          raw_points: Optional[Dataset] = None) -> WeighResult:
    """Weights for ``points`` under ``scheme``.

    ``real`` and ``synth`` are the scaled training sets for the ratio model
    and ``points`` the scaled synthetic points to weight. ``true_weights``
    maps unscaled points (``raw_points``) to oracle weights. Output-noise
    schemes release only as many weights as the budget allows; the chosen
    subset of ``points`` is returned in ``subset``.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown weight scheme {scheme!r}; choose from {', '.join(SCHEMES)}")
    n_d, n_g = real.n, synth.n
    if scheme == "none":
        return WeighResult(WeightVector.uniform(points.n))
    if scheme == "true":
        if true_weights is None:
            raise ValueError("scheme 'true' needs known generating densities")
        return WeighResult(true_weights(raw_points if raw_points is not None else points))
    if scheme == "discriminator":
        if settings.discriminator_path is None:
            raise ValueError("scheme 'discriminator' needs a probability file")
        w = import_external_probabilities(settings.discriminator_path, n_d, n_g)
        if w.n != points.n:
            raise ValueError(f"probability file has {w.n} rows for {points.n} points")
        return WeighResult(w, spends=(w.spend,))
    if scheme in ("mlp", "priv_mlp"):
        cfg = replace(settings.dpsgd, delta=settings.delta)
        if scheme == "mlp":
            model = fit_mlp_sgd(real, synth, cfg, rng.child(0))
            return WeighResult(log_weights_from_classifier(model, points, n_d, n_g))
        if settings.calibrate_dpsgd:
            sigma = privacy.calibrate_noise_multiplier(cfg, n_d, n_g, settings.epsilon)
            cfg = replace(cfg, noise_multiplier=sigma)
        model = fit_mlp_dpsgd(real, synth, cfg, rng.child(0))
        w = log_weights_from_classifier(model, points, n_d, n_g)
        return WeighResult(w, spends=(model.spend,), info={"noise_multiplier": cfg.noise_multiplier})

    model = fit_logistic_l2(real, synth, settings.lam)
    if scheme == "logreg":
        return WeighResult(log_weights_from_classifier(model, points, n_d, n_g))
    if scheme == "beta_noised":
        noised = privacy.beta_noised_model(model, settings.epsilon, rng.child(1))
        w = log_weights_from_classifier(noised, points, n_d, n_g)
        return WeighResult(w, spends=(noised.spend,))

    n_release = min(points.n, privacy.max_releasable_weights(
        model.d, n_d, settings.lam, settings.epsilon, settings.finite_variance))
    subset = _release_subset(points.n, n_release, rng.child(2))
    released = points if subset is None else points.take(subset)
    raw = log_weights_from_classifier(model, released, n_d, n_g)
    if scheme == "output_lapl":
        rho = privacy.laplace_scale_rho(model.d, n_d, settings.lam, settings.epsilon, n_release)
        w = privacy.privatize_weights_laplace(raw, rho, rng.child(3), epsilon=settings.epsilon)
        info = {"rho": rho, "n_release": n_release}
    else:
        gamma = privacy.gaussian_scale_gamma(model.d, n_d, settings.lam, settings.epsilon,
                                             settings.delta, n_release)
        w = privacy.privatize_weights_gaussian(raw, gamma, rng.child(3),
                                               epsilon=settings.epsilon, delta=settings.delta)
        info = {"gamma": gamma, "n_release": n_release}
    return WeighResult(w, subset, (w.spend,), info)
