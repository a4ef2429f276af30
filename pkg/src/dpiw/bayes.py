"""Importance-weighted Bayesian updating.

The weighted posterior is ``pi(theta) * prod_i f(x_i | theta) ** w_i``:
each synthetic observation contributes its log-likelihood scaled by its
importance weight. Sampling uses adaptive random-walk Metropolis with
split-Rhat and effective-sample-size diagnostics.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import log_expit

from .core import Dataset, RngStream, Source, WeightVector, minmax_scale

__all__ = [
    "IwPosteriorSpec",
    "McmcConfig",
    "PosteriorSamples",
    "NonConvergenceWarning",
    "iw_log_posterior",
    "sample_iw_posterior",
    "split_rhat",
    "effective_sample_size_mcmc",
    "gaussian_prior",
    "gaussian_mean_spec",
    "gaussian_mean_posterior",
    "logistic_spec",
    "KldModel",
    "gaussian_mean_kld_model",
    "expected_posterior_kld",
    "bayes_logistic_experiment",
]


class NonConvergenceWarning(RuntimeWarning):
    """Split-Rhat above the convergence threshold."""


@dataclass(frozen=True, eq=False)
class IwPosteriorSpec:
    """Weighted posterior kernel.

    ``log_likelihood(theta, x, y)`` returns per-observation log-densities.
    With ``vectorized=True`` it receives a (B, p) batch of parameters and
    returns (B, N); otherwise it receives one (p,) vector and returns (N,).
    ``log_prior`` follows the same convention. ``prior_sample(gen, n)``
    draws initial states for the sampler.
    """

    log_prior: Callable
    log_likelihood: Callable
    data: Dataset
    weights: WeightVector
    dim: int
    vectorized: bool = True
    prior_sample: Optional[Callable] = None

    def __post_init__(self):
        if self.weights.n != self.data.n:
            raise ValueError("weights and data lengths differ")


def _batch_log_post(spec: IwPosteriorSpec, thetas: np.ndarray, w: np.ndarray) -> np.ndarray:
    thetas = np.atleast_2d(thetas)
    x, y = spec.data.features, spec.data.labels
    if spec.vectorized:
        lp = np.asarray(spec.log_prior(thetas), dtype=float).reshape(-1)
        ll = np.asarray(spec.log_likelihood(thetas, x, y), dtype=float)
    else:
        lp = np.array([spec.log_prior(t) for t in thetas], dtype=float)
        ll = np.stack([np.asarray(spec.log_likelihood(t, x, y), dtype=float) for t in thetas])
    active = w != 0
    bad = ~np.isfinite(ll) & active[None, :]
    inside = np.isfinite(lp)
    if np.any(bad[inside]):
        row, col = np.argwhere(bad & inside[:, None])[0]
        raise FloatingPointError(
            f"non-finite log-likelihood for observation {col} at theta {thetas[row].tolist()}")
    ll = np.where(active[None, :], ll, 0.0)
    out = lp + ll @ w
    out[~inside] = -np.inf
    return out


def iw_log_posterior(spec: IwPosteriorSpec, theta) -> float:
    """Weighted log-posterior kernel ``log pi(theta) + sum_i w_i log f(x_i | theta)``."""
    return float(_batch_log_post(spec, np.asarray(theta, float)[None, :], spec.weights.values)[0])


# --------------------------------------------------------------------------
# Diagnostics
# --------------------------------------------------------------------------

def split_rhat(chains: np.ndarray) -> np.ndarray:
    """Split-Rhat per coordinate for draws shaped (chains, draws, p)."""
    c, n, p = chains.shape
    half = n // 2
    parts = np.concatenate([chains[:, :half], chains[:, half:2 * half]], axis=0)
    m, k = parts.shape[:2]
    means = parts.mean(axis=1)
    within = parts.var(axis=1, ddof=1).mean(axis=0)
    between = k * means.var(axis=0, ddof=1)
    var_plus = (k - 1) / k * within + between / k
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_plus / within)
    return np.where(within > 0, rhat, np.nan)


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x - x.mean(), size)
    return np.fft.irfft(f * np.conj(f), size)[:n] / n


def effective_sample_size_mcmc(chains: np.ndarray) -> np.ndarray:
    """Multi-chain ESS per coordinate with Geyer's initial monotone sequence."""
    c, n, p = chains.shape
    out = np.empty(p)
    for j in range(p):
        x = chains[:, :, j]
        acov = np.stack([_autocov(x[i]) for i in range(c)])
        chain_var = acov[:, 0] * n / (n - 1.0)
        mean_var = chain_var.mean()
        var_plus = mean_var * (n - 1.0) / n
        if c > 1:
            var_plus += x.mean(axis=1).var(ddof=1)
        if not var_plus > 0:
            out[j] = np.nan
            continue
        rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
        rho[0] = 1.0
        pair_sums = []
        t = 0
        while t + 1 < n:
            s = rho[t] + rho[t + 1]
            if s < 0:
                break
            pair_sums.append(s)
            t += 2
        pair_sums = np.minimum.accumulate(np.asarray(pair_sums)) if pair_sums else np.array([1.0])
        tau = -1.0 + 2.0 * pair_sums.sum()
        out[j] = c * n / max(tau, 1.0 / math.log10(c * n))
    return out


# --------------------------------------------------------------------------
# Adaptive random-walk Metropolis
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class McmcConfig:
    chains: int = 4
    draws: int = 5000  # per chain, including warm-up
    warmup_fraction: float = 0.5
    target_accept: float = 0.234
    rhat_threshold: float = 1.05
    init: Optional[tuple] = None  # fixed initial state overrides prior draws

    def __post_init__(self):
        if self.chains < 2 or self.draws < 20:
            raise ValueError("need at least 2 chains and 20 draws per chain")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class PosteriorSamples:
    draws: np.ndarray  # (chains * kept, p), chain-major
    chain_ids: np.ndarray
    chains: int
    acceptance_rate: float
    rhat: np.ndarray
    ess: np.ndarray
    converged: bool
    warnings: tuple = ()

    @property
    def by_chain(self) -> np.ndarray:
        return self.draws.reshape(self.chains, -1, self.draws.shape[1])

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    def cov(self) -> np.ndarray:
        return np.atleast_2d(np.cov(self.draws, rowvar=False))

    def mcse_mean(self) -> np.ndarray:
        return self.draws.std(axis=0, ddof=1) / np.sqrt(self.ess)

    def diagnostics(self) -> dict:
        return {"chains": self.chains, "acceptance_rate": self.acceptance_rate,
                "rhat": self.rhat.tolist(), "ess": self.ess.tolist(),
                "converged": self.converged, "warnings": list(self.warnings)}

    def to_csv(self, path, names=None) -> Path:
        p = self.draws.shape[1]
        names = list(names or [f"theta{j}" for j in range(p)])
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["chain"] + names)
            for cid, row in zip(self.chain_ids, self.draws):
                wr.writerow([int(cid)] + [repr(float(v)) for v in row])
        return path


def sample_iw_posterior(spec: IwPosteriorSpec, mcmc: McmcConfig, rng: RngStream) -> PosteriorSamples:
    """Adaptive random-walk Metropolis on the weighted posterior.

    Chains start from independent prior draws. During warm-up each chain
    adapts its proposal covariance to its own history and its step scale by
    Robbins-Monro toward the target acceptance rate; both are frozen
    afterwards and warm-up draws are discarded. A run whose split-Rhat
    exceeds the threshold is returned with ``converged=False`` and a warning.
    """
    p = spec.dim
    c = mcmc.chains
    w = spec.weights.values
    gen_init = rng.child(0).generator()
    gen_prop = rng.child(1).generator()
    gen_acc = rng.child(2).generator()
    if mcmc.init is not None:
        state = np.tile(np.asarray(mcmc.init, float), (c, 1))
    elif spec.prior_sample is not None:
        state = np.asarray(spec.prior_sample(gen_init, c), dtype=float).reshape(c, p)
    else:
        raise ValueError("spec has no prior sampler; pass McmcConfig(init=...)")
    logp = _batch_log_post(spec, state, w)
    if not np.all(np.isfinite(logp)):
        raise ValueError("initial states lie outside the prior support")

    n_total = mcmc.draws
    n_warm = int(round(mcmc.warmup_fraction * n_total))
    log_scale = np.full(c, math.log(2.38 / math.sqrt(p)) + math.log(0.1))
    chol = np.tile(np.eye(p), (c, 1, 1))
    # running moments of the warm-up history after its first quarter, per chain
    mean = np.zeros((c, p))
    m2 = np.zeros((c, p, p))
    count = 0
    adapt_start = n_warm // 4
    kept = np.empty((c, n_total - n_warm, p))
    accepted = 0
    for t in range(n_total):
        z = gen_prop.standard_normal((c, p))
        step = np.einsum("cij,cj->ci", chol, z) * np.exp(log_scale)[:, None]
        prop = state + step
        logp_prop = _batch_log_post(spec, prop, w)
        log_ratio = logp_prop - logp
        accept = np.log(gen_acc.random(c)) < log_ratio
        state = np.where(accept[:, None], prop, state)
        logp = np.where(accept, logp_prop, logp)
        if t < n_warm:
            acc_prob = np.exp(np.minimum(np.nan_to_num(log_ratio, nan=-np.inf), 0.0))
            log_scale += (acc_prob - mcmc.target_accept) / (t + 1) ** 0.6
            if t >= adapt_start:
                count += 1
                delta = state - mean
                mean += delta / count
                m2 += np.einsum("ci,cj->cij", delta, state - mean)
                if count >= 2 * p + 10 and count % 10 == 0:
                    cov = m2 / (count - 1) + 1e-12 * np.eye(p)
                    for i in range(c):
                        try:
                            chol[i] = np.linalg.cholesky(cov[i])
                        except np.linalg.LinAlgError:
                            pass
                    if count == 2 * p + 10:
                        # switch from the isotropic start to the learned shape
                        log_scale[:] = math.log(2.38 / math.sqrt(p))
        else:
            kept[:, t - n_warm] = state
            accepted += int(accept.sum())
    n_kept = n_total - n_warm
    rhat = split_rhat(kept)
    ess = effective_sample_size_mcmc(kept)
    converged = bool(np.all(np.nan_to_num(rhat, nan=np.inf) <= mcmc.rhat_threshold))
    notes = ()
    if not converged:
        msg = f"split-Rhat {np.nanmax(rhat):.3f} exceeds {mcmc.rhat_threshold}"
        warnings.warn(msg, NonConvergenceWarning, stacklevel=2)
        notes = (msg,)
    return PosteriorSamples(
        draws=kept.reshape(-1, p),
        chain_ids=np.repeat(np.arange(c), n_kept),
        chains=c,
        acceptance_rate=accepted / (c * n_kept),
        rhat=rhat,
        ess=ess,
        converged=converged,
        warnings=notes,
    )


# --------------------------------------------------------------------------
# Built-in models
# --------------------------------------------------------------------------

def gaussian_prior(mean, var: float):
    """Isotropic Gaussian prior: ``(log_prior, prior_sample)`` for (B, p) batches."""
    mean = np.atleast_1d(np.asarray(mean, float))
    p = mean.size
    sd = math.sqrt(var)
    const = -0.5 * p * math.log(2 * math.pi * var)

    def log_prior(theta):
        return const - 0.5 * np.sum((np.atleast_2d(theta) - mean) ** 2, axis=1) / var

    def prior_sample(gen, n):
        return mean + sd * gen.standard_normal((n, p))

    return log_prior, prior_sample


def gaussian_mean_spec(data: Dataset, weights: WeightVector, prior_mean=0.0,
                       prior_var: float = 10.0, sigma: float = 1.0) -> IwPosteriorSpec:
    """Gaussian likelihood with known isotropic sd and unknown mean."""
    d = data.d
    log_prior, prior_sample = gaussian_prior(np.broadcast_to(prior_mean, (d,)), prior_var)
    const = -0.5 * d * math.log(2 * math.pi * sigma ** 2)

    def log_lik(theta, x, y=None):
        diff = x[None, :, :] - np.atleast_2d(theta)[:, None, :]
        return const - 0.5 * np.sum(diff ** 2, axis=2) / sigma ** 2

    return IwPosteriorSpec(log_prior, log_lik, data, weights, d, True, prior_sample)


def gaussian_mean_posterior(x, w, prior_mean: float = 0.0, prior_var: float = 10.0,
                            sigma: float = 1.0) -> tuple:
    """Closed-form weighted posterior mean and variance for the 1-d Gaussian mean model."""
    x = np.asarray(x, float).ravel()
    w = np.asarray(w, float).ravel()
    precision = 1.0 / prior_var + w.sum() / sigma ** 2
    mean = (prior_mean / prior_var + np.dot(w, x) / sigma ** 2) / precision
    return float(mean), float(1.0 / precision)


def logistic_spec(data: Dataset, weights: WeightVector, prior_var: float = 10.0) -> IwPosteriorSpec:
    """Bayesian logistic regression; ``theta`` has the intercept last."""
    if data.labels is None:
        raise ValueError("logistic model needs labelled data")
    p = data.d + 1
    log_prior, prior_sample = gaussian_prior(np.zeros(p), prior_var)

    def log_lik(theta, x, y):
        theta = np.atleast_2d(theta)
        z = theta[:, :-1] @ x.T + theta[:, -1:]
        return np.where(y[None, :] == 1, log_expit(z), log_expit(-z))

    return IwPosteriorSpec(log_prior, log_lik, data, weights, p, True, prior_sample)


# --------------------------------------------------------------------------
# Expected posterior KLD diagnostic
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class KldModel:
    """Ingredients of the nested Monte Carlo for the expected posterior KLD.

    ``sample_data(gen, n)`` draws from the real-data distribution;
    ``log_f(theta, x)`` returns a (S, N) matrix of log-densities for a batch
    of S parameters; ``sample_posterior(x, gen, s)`` draws S parameters from
    the standard posterior given data ``x``.
    """

    sample_data: Callable
    log_f: Callable
    sample_posterior: Callable


def gaussian_mean_kld_model(data_mean: float = 0.0, data_sd: float = 1.0,
                            prior_var: float = 10.0, sigma: float = 1.0) -> KldModel:
    def sample_data(gen, n):
        return data_mean + data_sd * gen.standard_normal(n)

    def log_f(theta, x):
        theta = np.asarray(theta, float).reshape(-1, 1)
        return -0.5 * math.log(2 * math.pi * sigma ** 2) - 0.5 * (x[None, :] - theta) ** 2 / sigma ** 2

    def sample_posterior(x, gen, s):
        m, v = gaussian_mean_posterior(x, np.ones_like(x), 0.0, prior_var, sigma)
        return m + math.sqrt(v) * gen.standard_normal(s)

    return KldModel(sample_data, log_f, sample_posterior)


def expected_posterior_kld(model: KldModel, n: int, mc_reps: int, rng: RngStream,
                           posterior_draws: int = 200, inner_draws: int = 2000) -> tuple:
    """Nested Monte Carlo estimate of the expected posterior KLD for ``n = m``.

    For each outer replicate a real dataset ``x_1..x_n`` is drawn, then
    parameters from its posterior, and the quantity
    ``sum_i log f(x_i; theta) - n * E_{x'}[log f(x'; theta)]`` is averaged,
    with the inner expectation over ``inner_draws`` fresh observations.

    Returns:
        ``(estimate, standard_error)`` over outer replicates.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if mc_reps < 2:
        warnings.warn("fewer than 2 outer replicates: standard error is undefined",
                      RuntimeWarning, stacklevel=2)
    gen = rng.generator()
    vals = np.empty(mc_reps)
    for r in range(mc_reps):
        x = np.asarray(model.sample_data(gen, n))
        thetas = model.sample_posterior(x, gen, posterior_draws)
        fresh = np.asarray(model.sample_data(gen, inner_draws))
        own = model.log_f(thetas, x).sum(axis=1)
        expected = model.log_f(thetas, fresh).mean(axis=1)
        vals[r] = np.mean(own - n * expected)
    se = float(vals.std(ddof=1) / math.sqrt(mc_reps)) if mc_reps > 1 else math.inf
    return float(vals.mean()), se


# --------------------------------------------------------------------------
# Convex-combination logistic experiment
# --------------------------------------------------------------------------

def _with_label_column(data: Dataset) -> Dataset:
    """Features plus the label as an extra column, for joint density-ratio fitting."""
    return Dataset(np.column_stack([data.features, data.labels]), None, data.source)


def bayes_logistic_experiment(gamma: float, n: int, seeds, schemes=("none", "true"),
                              mcmc: McmcConfig = McmcConfig(), settings=None,
                              feature_bound: float = 10.0, stream_id: int = 0) -> list:
    """Weighted Bayesian logistic regression on convex-combination synthetic data.

    For each seed, ``n`` real and ``n`` synthetic labelled points are drawn
    from the ``bayes-logistic`` preset. The real-data posterior is the
    reference; each scheme's weighted posterior on the synthetic data is
    summarized by its mean squared distance to the generating parameter and
    the Mahalanobis distance between its mean and the reference mean under
    the reference covariance.

    Ratio models for estimated schemes are fitted on (x, y) scaled with the
    public bounds ``[-feature_bound, feature_bound]`` for x.
    """
    from . import metrics, pipeline, synthgen

    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    settings = settings or pipeline.WeighSettings()
    dgp, sdgp = synthgen.preset("bayes-logistic", gamma=gamma)
    theta_d = np.asarray(synthgen.BAYES_THETA_D)
    d = dgp.d
    bounds = np.array([[-feature_bound, feature_bound]] * d + [[0.0, 1.0]])
    rows = []
    for seed in seeds:
        base = RngStream(int(seed), stream_id)
        real = synthgen.sample(dgp, n, base.child(0), Source.PRIVATE)
        synth = synthgen.sample(sdgp, n, base.child(1))
        ref = sample_iw_posterior(logistic_spec(real, WeightVector.uniform(n)), mcmc, base.child(2))
        ref_mean, ref_cov = ref.mean(), ref.cov()
        real_s = minmax_scale(_with_label_column(real), bounds)
        synth_s = minmax_scale(_with_label_column(synth), bounds)
        for k, scheme in enumerate(schemes):
            stream = base.child(10 + k)
            res = pipeline.weigh(scheme, real_s, synth_s, synth_s, settings, stream.child(0),
                                 true_weights=lambda pts: synthgen.true_log_weight(dgp, sdgp, pts),
                                 raw_points=synth)
            data = synth if res.subset is None else synth.take(res.subset)
            post = sample_iw_posterior(logistic_spec(data, res.weights), mcmc, stream.child(1))
            mean = post.mean()
            rows.append({
                "seed": int(seed),
                "scheme": scheme,
                "gamma": gamma,
                "n_used": data.n,
                "mse": float(np.mean(np.sum((post.draws - theta_d) ** 2, axis=1))),
                "posterior_mean": mean.tolist(),
                "posterior_var": np.diag(post.cov()).tolist(),
                "mcse_mean": post.mcse_mean().tolist(),
                "mahalanobis": metrics.mahalanobis(mean, ref_mean, ref_cov),
                "reference_mean": ref_mean.tolist(),
                "reference_mse": float(np.mean(np.sum((ref.draws - theta_d) ** 2, axis=1))),
                "converged": post.converged and ref.converged,
                "max_rhat": float(np.nanmax(post.rhat)),
                "epsilon": float(sum(sp.epsilon for sp in res.spends)),
            })
    return rows
