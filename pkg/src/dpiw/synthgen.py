"""Reference data-generating processes with closed-form densities.

Every distribution here exposes exact log-densities, so the true importance
weight ``log p_D(x) - log p_G(x)`` is available as an oracle.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.special import log_expit, logsumexp
from scipy.stats import multivariate_normal

from .core import Dataset, Provenance, RngStream, Source, WeightVector

__all__ = [
    "GmmGrid",
    "UniformMixture",
    "MultivariateGaussian",
    "ConvexCombination",
    "LogisticLabelled",
    "sample",
    "log_density",
    "true_log_weight",
    "preset",
    "spec_from_dict",
    "PRESETS",
]


@dataclass(frozen=True, eq=False)
class GmmGrid:
    """Isotropic Gaussian mixture; by default 25 components on {-2..2}^2."""

    centers: np.ndarray
    sd: float = 0.05
    weights: Optional[np.ndarray] = None
    kind = "GmmGrid"

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        object.__setattr__(self, "centers", c)
        w = np.full(len(c), 1.0 / len(c)) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != (len(c),) or np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=1e-9):
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        object.__setattr__(self, "weights", w)
        if not self.sd > 0:
            raise ValueError("sd must be positive")

    @classmethod
    def grid(cls, levels=(-2, -1, 0, 1, 2), dim: int = 2, sd: float = 0.05) -> "GmmGrid":
        return cls(np.array(list(itertools.product(levels, repeat=dim)), dtype=float), sd)

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    def draw(self, n, gen):
        comp = gen.choice(len(self.centers), size=n, p=self.weights)
        return self.centers[comp] + self.sd * gen.standard_normal((n, self.d)), None

    def log_density(self, x, labels=None):
        sq = ((x[:, None, :] - self.centers[None]) ** 2).sum(axis=2)
        log_norm = -0.5 * self.d * math.log(2 * math.pi * self.sd ** 2)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(logw[None] + log_norm - 0.5 * sq / self.sd ** 2, axis=1)

    def to_dict(self):
        return {"kind": self.kind, "centers": self.centers.tolist(), "sd": self.sd,
                "weights": self.weights.tolist()}


@dataclass(frozen=True, eq=False)
class UniformMixture:
    """Mixture of axis-aligned uniform boxes, each given as ``(lower, upper)``."""

    lower: np.ndarray
    upper: np.ndarray
    weights: np.ndarray
    kind = "UniformMixture"

    def __post_init__(self):
        lo = np.atleast_2d(np.asarray(self.lower, float))
        hi = np.atleast_2d(np.asarray(self.upper, float))
        w = np.asarray(self.weights, float)
        if lo.shape != hi.shape or w.shape != (lo.shape[0],):
            raise ValueError("box bounds and weights have inconsistent shapes")
        if np.any(hi <= lo):
            raise ValueError("every box needs upper > lower")
        if np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=1e-9):
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        for name, v in (("lower", lo), ("upper", hi), ("weights", w)):
            object.__setattr__(self, name, v)

    @property
    def d(self) -> int:
        return self.lower.shape[1]

    def draw(self, n, gen):
        comp = gen.choice(len(self.weights), size=n, p=self.weights)
        u = gen.random((n, self.d))
        return self.lower[comp] + u * (self.upper[comp] - self.lower[comp]), None

    def log_density(self, x, labels=None):
        inside = np.all((x[:, None, :] >= self.lower[None]) & (x[:, None, :] <= self.upper[None]), axis=2)
        dens = inside @ (self.weights / np.prod(self.upper - self.lower, axis=1))
        with np.errstate(divide="ignore"):
            return np.log(dens)

    def to_dict(self):
        return {"kind": self.kind, "lower": self.lower.tolist(), "upper": self.upper.tolist(),
                "weights": self.weights.tolist()}


@dataclass(frozen=True, eq=False)
class MultivariateGaussian:
    mean: np.ndarray
    cov: np.ndarray
    kind = "MultivariateGaussian"

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, float))
        c = np.atleast_2d(np.asarray(self.cov, float))
        if c.shape != (m.size, m.size):
            raise ValueError("covariance shape does not match the mean")
        np.linalg.cholesky(c)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", c)

    @property
    def d(self) -> int:
        return self.mean.size

    def draw(self, n, gen):
        return gen.multivariate_normal(self.mean, self.cov, size=n, method="cholesky"), None

    def log_density(self, x, labels=None):
        return np.atleast_1d(multivariate_normal(self.mean, self.cov).logpdf(x))

    def to_dict(self):
        return {"kind": self.kind, "mean": self.mean.tolist(), "cov": self.cov.tolist()}


@dataclass(frozen=True, eq=False)
class LogisticLabelled:
    """Features from ``features``; label ``y ~ Bernoulli(sigmoid(theta . [x, 1]))``."""

    features: "DistributionSpec"
    theta: np.ndarray
    kind = "LogisticLabelled"

    def __post_init__(self):
        t = np.asarray(self.theta, float)
        if t.shape != (self.features.d + 1,):
            raise ValueError(f"theta needs {self.features.d + 1} entries (intercept last)")
        object.__setattr__(self, "theta", t)

    @property
    def d(self) -> int:
        return self.features.d

    def logit(self, x):
        return x @ self.theta[:-1] + self.theta[-1]

    def draw(self, n, gen):
        x, _ = self.features.draw(n, gen)
        y = (gen.random(n) < 1.0 / (1.0 + np.exp(-self.logit(x)))).astype(np.int8)
        return x, y

    def log_density(self, x, labels=None):
        lp = self.features.log_density(x)
        if labels is None:
            return lp
        z = self.logit(x)
        y = np.asarray(labels)
        return lp + np.where(y == 1, log_expit(z), log_expit(-z))

    def to_dict(self):
        return {"kind": self.kind, "features": self.features.to_dict(), "theta": self.theta.tolist()}


@dataclass(frozen=True, eq=False)
class ConvexCombination:
    """Density ``(1 - gamma) * base + gamma * other``; ``gamma = 0`` gives ``base``."""

    gamma: float
    other: "DistributionSpec"
    base: "DistributionSpec"
    kind = "ConvexCombination"

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.other.d != self.base.d:
            raise ValueError("components have different dimensions")

    @property
    def d(self) -> int:
        return self.base.d

    def draw(self, n, gen):
        pick_other = gen.random(n) < self.gamma
        k = int(pick_other.sum())
        xo, yo = self.other.draw(k, gen)
        xb, yb = self.base.draw(n - k, gen)
        x = np.empty((n, self.d))
        x[pick_other], x[~pick_other] = xo, xb
        if yo is None and yb is None:
            return x, None
        if yo is None or yb is None:
            raise ValueError("cannot mix labelled and unlabelled components")
        y = np.empty(n, dtype=np.int8)
        y[pick_other], y[~pick_other] = yo, yb
        return x, y

    def log_density(self, x, labels=None):
        parts, coefs = [], []
        for g, spec in ((1.0 - self.gamma, self.base), (self.gamma, self.other)):
            if g > 0:
                parts.append(spec.log_density(x, labels))
                coefs.append(math.log(g))
        return logsumexp(np.stack(parts) + np.array(coefs)[:, None], axis=0)

    def to_dict(self):
        return {"kind": self.kind, "gamma": self.gamma, "other": self.other.to_dict(),
                "base": self.base.to_dict()}


DistributionSpec = Union[GmmGrid, UniformMixture, MultivariateGaussian, LogisticLabelled,
                         ConvexCombination]


def spec_from_dict(obj: dict) -> DistributionSpec:
    kind = obj.get("kind")
    if kind == "GmmGrid":
        return GmmGrid(obj["centers"], obj.get("sd", 0.05), obj.get("weights"))
    if kind == "UniformMixture":
        return UniformMixture(obj["lower"], obj["upper"], obj["weights"])
    if kind == "MultivariateGaussian":
        return MultivariateGaussian(obj["mean"], obj["cov"])
    if kind == "LogisticLabelled":
        return LogisticLabelled(spec_from_dict(obj["features"]), obj["theta"])
    if kind == "ConvexCombination":
        return ConvexCombination(float(obj["gamma"]), spec_from_dict(obj["other"]),
                                 spec_from_dict(obj["base"]))
    raise ValueError(f"unknown distribution kind {kind!r}")


def sample(spec: DistributionSpec, n: int, rng: RngStream,
           source: Source = Source.SYNTHETIC) -> Dataset:
    if n < 1:
        raise ValueError("n must be at least 1")
    x, y = spec.draw(n, rng.generator())
    return Dataset(x, y, source)


def log_density(spec: DistributionSpec, points, labels=None) -> np.ndarray:
    """Exact log-density at each row of ``points`` (``-inf`` outside the support).

    For labelled specs the joint density of ``(x, y)`` is returned when
    ``labels`` is given and the feature marginal otherwise.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    if x.shape[1] != spec.d:
        raise ValueError(f"points have {x.shape[1]} columns, spec has dimension {spec.d}")
    return spec.log_density(x, labels)


def true_log_weight(dgp: DistributionSpec, sdgp: DistributionSpec,
                    points: Union[Dataset, np.ndarray]) -> WeightVector:
    """Oracle log-weights ``log p_D - log p_G`` (joint over labels when present)."""
    if isinstance(points, Dataset):
        x, y = points.features, points.labels
    else:
        x, y = np.atleast_2d(np.asarray(points, float)), None
    if not isinstance(dgp, (LogisticLabelled, ConvexCombination)):
        y = None
    lp_d = log_density(dgp, x, y)
    lp_g = log_density(sdgp, x, y)
    bad = np.flatnonzero(~np.isfinite(lp_g))
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"support violation: synthetic density is zero at point {i} "
            f"({x[i].tolist()}) where the weight is undefined")
    return WeightVector(lp_d - lp_g, Provenance.TRUE, None, info={"origin": "generator"})


# --------------------------------------------------------------------------
# Presets
# --------------------------------------------------------------------------

BAYES_MU_D = (-1.25, 1.25)
BAYES_COV_D = ((1.0, 0.5), (0.5, 1.0))
BAYES_MU_G = (2.0, -2.5)
BAYES_COV_G = ((4.0, 0.2), (0.2, 4.0))
BAYES_THETA_D = (1.5, 1.0, 2.5)
BAYES_THETA_G = (-1.5, 1.0, -2.5)


def _gmm_grid_preset():
    dgp = GmmGrid.grid()
    sdgp = UniformMixture(lower=[[-2.5, -2.5], [0.0, -2.5]], upper=[[0.0, 2.5], [2.5, 2.5]],
                          weights=[0.7, 0.3])
    return dgp, sdgp


def _bayes_logistic_preset(gamma: float):
    dgp = LogisticLabelled(MultivariateGaussian(BAYES_MU_D, BAYES_COV_D), BAYES_THETA_D)
    pg = LogisticLabelled(MultivariateGaussian(BAYES_MU_G, BAYES_COV_G), BAYES_THETA_G)
    return dgp, ConvexCombination(gamma, pg, dgp)


PRESETS = ("gmm-grid", "bayes-logistic")


def preset(name: str, gamma: Optional[float] = None):
    """Named ``(dgp, sdgp)`` pairs; ``bayes-logistic`` accepts ``gamma`` or ``bayes-logistic(0.5)``."""
    m = re.fullmatch(r"\s*([a-z-]+)\s*(?:\(\s*([0-9.eE+-]+)\s*\))?\s*", name)
    if not m or m.group(1) not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    key = m.group(1)
    if key == "gmm-grid":
        return _gmm_grid_preset()
    if m.group(2) is not None:
        gamma = float(m.group(2))
    return _bayes_logistic_preset(1.0 if gamma is None else gamma)
