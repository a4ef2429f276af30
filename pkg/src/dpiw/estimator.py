"""Importance-sampling estimates, their variance under weight noise, and the
effective sample size of a weighted synthetic sample."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import Dataset, WeightVector

__all__ = [
    "EstimateReport",
    "EssReport",
    "importance_estimate",
    "noisy_estimator_variance",
    "effective_sample_size",
]


@dataclass(frozen=True)
class EstimateReport:
    value: float
    variance_estimate: float
    n_used: int
    weight_provenance: str
    self_normalized: bool = False
    ledger: list = field(default_factory=list)

    def __post_init__(self):
        if not self.variance_estimate >= 0:
            raise ValueError("variance estimate must be nonnegative or inf")

    def to_dict(self) -> dict:
        return {"value": self.value, "variance": self.variance_estimate, "n": self.n_used,
                "provenance": self.weight_provenance, "self_normalized": self.self_normalized,
                "privacy_ledger": self.ledger}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _check_lengths(h, w: WeightVector) -> np.ndarray:
    h = np.asarray(h, dtype=float).ravel()
    if h.shape[0] != w.n:
        raise ValueError(f"h has {h.shape[0]} values but there are {w.n} weights")
    if h.shape[0] < 1:
        raise ValueError("need at least one observation")
    return h


def importance_estimate(h_values, w: WeightVector, self_normalize: bool = False) -> EstimateReport:
    """Estimate ``E_{p_D}[h]`` from synthetic draws and their weights.

    The default is the unnormalized mean ``(1/N) sum w_i h_i``; with
    ``self_normalize`` the ratio ``sum w_i h_i / sum w_i`` is returned. The
    variance estimate is the plug-in sample variance (delta method for the
    ratio form), reported as ``inf`` when the weight noise has infinite
    variance.
    """
    h = _check_lengths(h_values, w)
    n = h.shape[0]
    wv = w.values
    ledger = [w.spend.to_dict()] if w.spend is not None else []
    infinite = bool(w.info.get("infinite_variance", False))
    if self_normalize:
        total = wv.sum()
        if not total > 0:
            raise ValueError("self-normalization needs a positive weight sum")
        value = float(np.dot(wv, h) / total)
        var = float(np.sum(wv ** 2 * (h - value) ** 2) / total ** 2)
    else:
        wh = wv * h
        value = float(wh.mean())
        var = float(wh.var(ddof=1) / n) if n > 1 else 0.0
    if infinite:
        var = math.inf
    return EstimateReport(value, var, n, w.provenance.value, self_normalize, ledger)


def noisy_estimator_variance(h_values, w: WeightVector, var_exp_noise: float) -> float:
    """Plug-in variance of the unnormalized estimator after multiplicative noise.

    ``w`` holds the noise-free weights; ``var_exp_noise`` is ``Var[exp(zeta)]``
    of the mechanism. Returns
    ``(sample variance of w h + var_exp_noise * mean((w h)^2)) / N``.
    """
    h = _check_lengths(h_values, w)
    if not var_exp_noise >= 0:
        raise ValueError("noise variance must be nonnegative")
    wh = w.values * h
    n = wh.shape[0]
    if not np.any(wh):
        return 0.0
    if math.isinf(var_exp_noise):
        return math.inf
    base = wh.var(ddof=1) if n > 1 else 0.0
    return float((base + var_exp_noise * np.mean(wh ** 2)) / n)


@dataclass(frozen=True)
class EssReport:
    n_effective: float
    n_synth: int
    ratio: float
    scalarization: str

    def to_dict(self) -> dict:
        return {"n_effective": self.n_effective, "n_synth": self.n_synth,
                "ratio": self.ratio, "scalarization": self.scalarization}


def effective_sample_size(synth: Dataset, w: WeightVector,
                          model_grad: Callable[[np.ndarray, np.ndarray], np.ndarray],
                          theta_hat, scalarization: str = "trace") -> EssReport:
    """Number of real observations worth as much as the weighted synthetic sample.

    ``model_grad(theta, x)`` returns per-observation score vectors (N x p) of
    the unweighted log-likelihood. With weights rescaled to mean 1 and
    ``g_i`` the score at ``theta_hat``,

        V0  = (1/N) sum w_i g_i g_i^T      (score second moment under p_D)
        VIW = (1/N) sum w_i^2 g_i g_i^T    (second moment of the weighted score)

    and ``N_e = N_G * s(V0) / s(VIW)`` where ``s`` is the trace or, with
    ``scalarization="det"``, the p-th root of the determinant.
    """
    if scalarization not in ("trace", "det"):
        raise ValueError("scalarization must be 'trace' or 'det'")
    if w.n != synth.n:
        raise ValueError("weight vector and dataset lengths differ")
    g = np.asarray(model_grad(np.asarray(theta_hat, float), synth.features), dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if not np.isfinite(g).all():
        raise ValueError("score vectors must be finite")
    wn = w.normalized()
    n = synth.n
    v0 = (g.T * wn) @ g / n
    viw = (g.T * wn ** 2) @ g / n
    eig = np.linalg.eigvalsh(v0)
    if eig.max() <= 0 or eig.min() <= 1e-12 * eig.max():
        raise np.linalg.LinAlgError(
            "score second-moment matrix is singular; use more synthetic data or add "
            "regularization to the model")
    if scalarization == "trace":
        ratio = float(np.trace(v0) / np.trace(viw))
    else:
        p = v0.shape[0]
        s0, ld0 = np.linalg.slogdet(v0)
        s1, ld1 = np.linalg.slogdet(viw)
        ratio = float(math.exp((ld0 - ld1) / p))
    return EssReport(n * ratio, n, ratio, scalarization)
