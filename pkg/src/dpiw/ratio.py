"""Density-ratio estimation by real-vs-synthetic classification.

A classifier trained to separate private rows (label 1) from synthetic rows
(label 0) yields log importance weights as its logit plus the prior-odds
correction ``log(N_D / N_G)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.special import expit, log_expit

from . import privacy
from .core import (
    ConvergenceError,
    Dataset,
    PrivacySpend,
    Provenance,
    RngStream,
    WeightVector,
)

__all__ = [
    "LogisticModel",
    "MlpModel",
    "DpSgdConfig",
    "fit_logistic_l2",
    "fit_weighted_logistic",
    "fit_mlp_dpsgd",
    "fit_mlp_sgd",
    "log_weights_from_classifier",
    "log_weights_from_probabilities",
    "import_external_probabilities",
    "logistic_sensitivity",
]


def _with_intercept(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))])


@dataclass(frozen=True, eq=False)
class LogisticModel:
    """L2-regularized logistic classifier.

    ``beta`` has one entry per feature plus a trailing intercept, so its
    length is the ``d`` used by the sensitivity formulas.
    """

    beta: np.ndarray
    lam: float
    n_private: int
    n_synth: int = 0
    grad_norm: float = 0.0
    iterations: int = 0
    spend: Optional[PrivacySpend] = None

    @property
    def d(self) -> int:
        return self.beta.shape[0]

    @property
    def noised(self) -> bool:
        return self.spend is not None

    def logit(self, x: np.ndarray) -> np.ndarray:
        return _with_intercept(np.atleast_2d(x)) @ self.beta

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return expit(self.logit(x))


def _logistic_objective(beta, X, ypm, lam, sw):
    m = ypm * (X @ beta)
    n = X.shape[0]
    f = np.dot(sw, np.logaddexp(0.0, -m)) / n + 0.5 * lam * beta @ beta
    r = sw * ypm * expit(-m)
    g = -(X.T @ r) / n + lam * beta
    return f, g


def _newton_logistic(X, y01, lam, sample_weight=None, tol=1e-8, max_iter=100):
    """Damped Newton with Armijo backtracking on the regularized logistic loss.

    Minimizes ``(1/N) sum_i s_i log(1 + exp(-y_i b'x_i)) + (lam/2)|b|^2``
    with ``y`` in {-1, +1}.
    """
    n, d = X.shape
    ypm = 2.0 * np.asarray(y01, dtype=float) - 1.0
    sw = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    beta = np.zeros(d)
    f, g = _logistic_objective(beta, X, ypm, lam, sw)
    for it in range(1, max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return beta, gnorm, it - 1
        p = expit(X @ beta)
        H = (X.T * (sw * p * (1.0 - p))) @ X / n + lam * np.eye(d)
        step = np.linalg.solve(H, -g)
        t = 1.0
        slope = g @ step
        while True:
            cand = beta + t * step
            f_new, g_new = _logistic_objective(cand, X, ypm, lam, sw)
            if f_new <= f + 1e-4 * t * slope or t < 1e-10:
                break
            t *= 0.5
        beta, f, g = cand, f_new, g_new
    gnorm = float(np.linalg.norm(g))
    if gnorm <= tol:
        return beta, gnorm, max_iter
    raise ConvergenceError(
        f"logistic Newton solver did not converge in {max_iter} iterations "
        f"(gradient norm {gnorm:.3e})",
        grad_norm=gnorm,
    )


def fit_logistic_l2(real: Dataset, synth: Dataset, lam: float, *, tol: float = 1e-8,
                    max_iter: int = 100) -> LogisticModel:
    """Fit the real-vs-synthetic L2 logistic classifier.

    Both datasets should already be scaled to [0, 1]. Real rows get label 1.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if real.d != synth.d:
        raise ValueError(f"feature dimension mismatch: {real.d} vs {synth.d}")
    X = _with_intercept(np.vstack([real.features, synth.features]))
    y = np.concatenate([np.ones(real.n), np.zeros(synth.n)])
    beta, gnorm, iters = _newton_logistic(X, y, lam, tol=tol, max_iter=max_iter)
    return LogisticModel(beta, lam, real.n, synth.n, gnorm, iters)


def fit_weighted_logistic(x: np.ndarray, y01: np.ndarray, lam: float,
                          sample_weight: Optional[np.ndarray] = None) -> LogisticModel:
    """Plain (not real-vs-synthetic) weighted L2 logistic regression.

    Each example's loss is multiplied by its weight; weights are rescaled to
    mean 1 so ``lam`` keeps its meaning.
    """
    y01 = np.asarray(y01)
    if np.unique(y01).size < 2:
        raise ValueError("training labels contain a single class")
    sw = None
    if sample_weight is not None:
        sw = np.asarray(sample_weight, dtype=float)
        sw = sw / sw.mean()
    beta, gnorm, iters = _newton_logistic(_with_intercept(np.atleast_2d(x)), y01, lam, sw)
    return LogisticModel(beta, lam, 0, 0, gnorm, iters)


def logistic_sensitivity(d: int, n_private: int, lam: float) -> float:
    """Bound on the change of any log-weight when one private row changes."""
    if d <= 0 or n_private <= 0 or not lam > 0:
        raise ValueError("d, n_private and lambda must be positive")
    return 2.0 * math.sqrt(d) / (n_private * lam)


# --------------------------------------------------------------------------
# MLP classifier and relaxed DP-SGD
# --------------------------------------------------------------------------

HIDDEN = (64, 64)


def _layer_shapes(d: int, hidden=HIDDEN):
    dims = (d,) + tuple(hidden) + (1,)
    shapes = []
    for a, b in zip(dims[:-1], dims[1:]):
        shapes.append((a, b))
        shapes.append((b,))
    return shapes


def _unpack(theta: np.ndarray, d: int, hidden=HIDDEN):
    out, i = [], 0
    for shp in _layer_shapes(d, hidden):
        k = int(np.prod(shp))
        out.append(theta[i:i + k].reshape(shp))
        i += k
    return out


def _n_params(d: int, hidden=HIDDEN) -> int:
    return sum(int(np.prod(s)) for s in _layer_shapes(d, hidden))


def _init_params(d: int, gen: np.random.Generator, hidden=HIDDEN) -> np.ndarray:
    parts = []
    for shp in _layer_shapes(d, hidden):
        if len(shp) == 2:
            parts.append(gen.normal(0.0, math.sqrt(2.0 / shp[0]), size=shp).ravel())
        else:
            parts.append(np.zeros(shp))
    return np.concatenate(parts)


def _forward(theta, x, d):
    W1, b1, W2, b2, W3, b3 = _unpack(theta, d)
    a1 = x @ W1 + b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ W2 + b2
    h2 = np.maximum(a2, 0.0)
    z = h2 @ W3[:, 0] + b3[0]
    return z, (a1, h1, a2, h2)


def _per_example_grads(theta, x, y, d):
    """Per-example gradients of the logistic cross-entropy, shape (B, P)."""
    W1, b1, W2, b2, W3, b3 = _unpack(theta, d)
    z, (a1, h1, a2, h2) = _forward(theta, x, d)
    dz = expit(z) - y
    gW3 = h2 * dz[:, None]
    da2 = dz[:, None] * W3[:, 0] * (a2 > 0)
    gW2 = np.einsum("bi,bj->bij", h1, da2)
    da1 = (da2 @ W2.T) * (a1 > 0)
    gW1 = np.einsum("bi,bj->bij", x, da1)
    B = x.shape[0]
    grads = np.concatenate(
        [gW1.reshape(B, -1), da1, gW2.reshape(B, -1), da2, gW3, dz[:, None]], axis=1
    )
    loss = np.logaddexp(0.0, z) - y * z
    return grads, loss


@dataclass(frozen=True, eq=False)
class MlpModel:
    """d -> 64 -> 64 -> 1 rectifier network with a logistic output."""

    params: np.ndarray
    d: int
    spend: Optional[PrivacySpend] = None
    n_private: int = 0
    n_synth: int = 0

    def logit(self, x: np.ndarray) -> np.ndarray:
        return _forward(self.params, np.atleast_2d(x), self.d)[0]

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return expit(self.logit(x))

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        z = self.logit(x)
        return float(np.mean(np.logaddexp(0.0, z) - y * z))

    def per_example_grads(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return _per_example_grads(self.params, np.atleast_2d(x), np.asarray(y, float), self.d)[0]


@dataclass(frozen=True)
class DpSgdConfig:
    lot_size: int = 256
    clip_norm: float = 1.0
    noise_multiplier: float = 5.2
    steps: int = 1000
    learning_rate: float = 0.1
    delta: float = 1e-5

    def __post_init__(self):
        if self.lot_size < 1 or self.steps < 1:
            raise ValueError("lot_size and steps must be positive integers")
        if not self.clip_norm > 0 or not self.learning_rate > 0:
            raise ValueError("clip_norm and learning_rate must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be nonnegative")


@dataclass
class SgdTrace:
    """Optional per-step record, filled when a trace is requested."""

    params: list = field(default_factory=list)
    max_clipped_norm: list = field(default_factory=list)
    lot_sizes: list = field(default_factory=list)


def _run_sgd(real: Dataset, synth: Dataset, cfg: DpSgdConfig, rng: RngStream,
             private: bool, trace: Optional[SgdTrace]) -> np.ndarray:
    x = np.vstack([real.features, synth.features])
    y = np.concatenate([np.ones(real.n), np.zeros(synth.n)])
    n, d = x.shape
    if cfg.lot_size > n:
        raise ValueError(f"lot size {cfg.lot_size} exceeds N_D + N_G = {n}")
    q = cfg.lot_size / n
    lot_gen = rng.child(0).generator()
    noise_gen = rng.child(1).generator()
    theta = _init_params(d, rng.child(2).generator())
    noise_sd = cfg.noise_multiplier * cfg.clip_norm
    for t in range(cfg.steps):
        idx = np.flatnonzero(lot_gen.random(n) < q)
        while idx.size == 0:
            idx = np.flatnonzero(lot_gen.random(n) < q)
        g, loss = _per_example_grads(theta, x[idx], y[idx], d)
        if not np.isfinite(loss).all() or not np.isfinite(g).all():
            raise ConvergenceError(f"training diverged at step {t}: non-finite loss", step=t)
        if private:
            norms = np.linalg.norm(g, axis=1)
            g = g / np.maximum(1.0, norms / cfg.clip_norm)[:, None]
            clipped = np.linalg.norm(g, axis=1).max()
            if clipped > cfg.clip_norm * (1.0 + 1e-9):
                raise RuntimeError(f"step {t}: clipped gradient norm {clipped} exceeds C")
            is_private = y[idx] == 1.0
            if noise_sd > 0 and is_private.any():
                g[is_private] += noise_gen.normal(0.0, noise_sd, size=(int(is_private.sum()), g.shape[1]))
            if trace is not None:
                trace.max_clipped_norm.append(float(clipped))
        step_grad = g.sum(axis=0) / cfg.lot_size
        theta = theta - cfg.learning_rate * step_grad
        if trace is not None:
            trace.params.append(theta.copy())
            trace.lot_sizes.append(int(idx.size))
    return theta


def fit_mlp_dpsgd(real: Dataset, synth: Dataset, cfg: DpSgdConfig, rng: RngStream,
                  trace: Optional[SgdTrace] = None) -> MlpModel:
    """Train the ratio MLP with relaxed DP-SGD.

    Each lot is Poisson-sampled with rate ``L / (N_D + N_G)``. Every
    per-example gradient is clipped to norm ``C``; Gaussian noise
    ``N(0, sigma^2 C^2 I)`` is added only to gradients of private examples,
    and the lot sum is divided by ``L``.
    """
    theta = _run_sgd(real, synth, cfg, rng, private=True, trace=trace)
    spend = privacy.dp_sgd_privacy(cfg, real.n, synth.n)
    return MlpModel(theta, real.d, spend, real.n, synth.n)


def fit_mlp_sgd(real: Dataset, synth: Dataset, cfg: DpSgdConfig, rng: RngStream,
                trace: Optional[SgdTrace] = None) -> MlpModel:
    """Non-private minibatch SGD with the same lot sampling and initialization."""
    theta = _run_sgd(real, synth, cfg, rng, private=False, trace=trace)
    return MlpModel(theta, real.d, None, real.n, synth.n)


# --------------------------------------------------------------------------
# Logits to log-weights
# --------------------------------------------------------------------------

def log_weights_from_classifier(model: Union[LogisticModel, MlpModel], points: Dataset,
                                n_private: int, n_synth: int) -> WeightVector:
    lw = model.logit(points.features) + math.log(n_private / n_synth)
    if isinstance(model, LogisticModel):
        if model.noised:
            return WeightVector(lw, Provenance.BETA_NOISED, model.spend,
                                info={"origin": "logistic", "biased": True})
        return WeightVector(lw, Provenance.ESTIMATED, None,
                            info={"origin": "logistic", "d": model.d,
                                  "n_private": model.n_private, "lam": model.lam})
    spend = model.spend
    if spend is not None and not math.isfinite(spend.epsilon):
        spend = None
    return WeightVector(lw, Provenance.ESTIMATED, spend, info={"origin": "mlp"})


def log_weights_from_probabilities(probs: np.ndarray, n_private: int, n_synth: int,
                                   spend: Optional[PrivacySpend] = None,
                                   origin: str = "probabilities") -> WeightVector:
    p = np.asarray(probs, dtype=float)
    lw = np.log(p) - np.log1p(-p) + math.log(n_private / n_synth)
    return WeightVector(lw, Provenance.ESTIMATED, spend, info={"origin": origin})


def import_external_probabilities(path, n_private: int, n_synth: int,
                                  clamp: bool = False) -> WeightVector:
    """Weights from a DP discriminator's probabilities (CSV column ``prob``).

    Released at no extra privacy cost: the probabilities are post-processing
    of an already private discriminator.
    """
    path = Path(path)
    probs = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "prob" not in [f.strip() for f in reader.fieldnames]:
            raise ValueError(f"{path}: expected a header with column 'prob'")
        for lineno, row in enumerate(reader, start=2):
            raw = row.get("prob", row.get(" prob"))
            try:
                p = float(raw)
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: missing or non-numeric probability") from None
            if not 0.0 < p < 1.0:
                if not clamp or not math.isfinite(p):
                    raise ValueError(f"{path}:{lineno}: probability {p} outside (0, 1)")
                p = min(max(p, 1e-6), 1.0 - 1e-6)
            probs.append(p)
    if not probs:
        raise ValueError(f"{path}: no rows")
    spend = PrivacySpend(0.0, 0.0, "post-processing of DP discriminator")
    return log_weights_from_probabilities(np.asarray(probs), n_private, n_synth, spend,
                                          origin="discriminator")
