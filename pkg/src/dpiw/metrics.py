"""Weighted two-sample discrepancies, downstream AUC and posterior distances."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from .core import ConvergenceError, Dataset, RngStream, WeightVector

__all__ = [
    "MetricReport",
    "weighted_mmd2",
    "weighted_wasserstein",
    "exact_ot",
    "sinkhorn_ot",
    "rank_auc",
    "downstream_auc",
    "mahalanobis",
    "EXACT_OT_MAX_N",
]

EXACT_OT_MAX_N = 512


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    config: dict = field(default_factory=dict)
    n_synth: int = 0
    n_real: int = 0

    def __float__(self) -> float:
        return float(self.value)

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "config": dict(self.config),
                "n_synth": self.n_synth, "n_real": self.n_real}


def _equalize(synth: Dataset, w: np.ndarray, real: Dataset, rng: Optional[RngStream]):
    """Subsample the larger set uniformly so both have the same size."""
    xs, xr = synth.features, real.features
    note = {}
    if xs.shape[0] == xr.shape[0]:
        return xs, w, xr, note
    if rng is None:
        raise ValueError("sample sizes differ; pass an RngStream to subsample the larger set")
    gen = rng.generator()
    n = min(xs.shape[0], xr.shape[0])
    if xs.shape[0] > n:
        idx = np.sort(gen.choice(xs.shape[0], n, replace=False))
        xs, w = xs[idx], w[idx]
        note["subsampled"] = "synthetic"
    else:
        xr = xr[np.sort(gen.choice(xr.shape[0], n, replace=False))]
        note["subsampled"] = "real"
    note["subsample_stream"] = [rng.seed, rng.stream_id, list(rng.path)]
    return xs, w, xr, note


def _gaussian_kernel(a, b, bandwidth):
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * bandwidth ** 2))


def weighted_mmd2(synth: Dataset, w: WeightVector, real: Dataset, bandwidth: float = 1.0,
                  rng: Optional[RngStream] = None) -> MetricReport:
    """Weighted unbiased MMD^2 between reweighted synthetic and real samples.

    Synthetic row ``i`` is paired with real row ``i``; the U-statistic sums
    the usual four-term kernel over pairs ``i != j`` with synthetic weights
    rescaled to mean 1, so uniform weights give the standard estimator.
    """
    if w.n != synth.n:
        raise ValueError("weight vector and synthetic dataset lengths differ")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    xs, wv, xr, note = _equalize(synth, w.normalized(), real, rng)
    n = xs.shape[0]
    if n < 2:
        raise ValueError("MMD needs at least 2 observations per sample")
    wv = wv / wv.mean()
    kxx = _gaussian_kernel(xs, xs, bandwidth)
    kzz = _gaussian_kernel(xr, xr, bandwidth)
    kxz = _gaussian_kernel(xs, xr, bandwidth)
    term_xx = wv @ kxx @ wv - np.sum(wv ** 2 * np.diag(kxx))
    term_zz = kzz.sum() - np.trace(kzz)
    term_xz = wv @ kxz.sum(axis=1) - np.sum(wv * np.diag(kxz))
    value = (term_xx + term_zz - 2.0 * term_xz) / (n * (n - 1))
    return MetricReport("mmd2", float(value), {"bandwidth": bandwidth, **note}, n, n)


def exact_ot(a: np.ndarray, b: np.ndarray, cost: np.ndarray) -> float:
    """Exact discrete optimal transport cost by linear programming (HiGHS)."""
    n, m = cost.shape
    rows = sparse.kron(sparse.eye(n), np.ones((1, m)))
    cols = sparse.kron(np.ones((1, n)), sparse.eye(m))
    A = sparse.vstack([rows, cols]).tocsr()[:-1]  # one marginal constraint is redundant
    rhs = np.concatenate([a, b])[:-1]
    res = linprog(cost.ravel(), A_eq=A, b_eq=rhs, bounds=(0, None), method="highs")
    if res.status != 0:
        raise ConvergenceError(f"transport LP failed: {res.message}", status=res.status)
    return float(res.fun)


def sinkhorn_ot(a: np.ndarray, b: np.ndarray, cost: np.ndarray, reg: float = 0.01,
                tol: float = 1e-9, max_iter: int = 10_000) -> tuple:
    """Entropic transport cost by stabilized Sinkhorn with epsilon scaling.

    The regularization starts at the largest cost and is halved toward
    ``reg``, warm-starting the dual potentials; iterations at the final
    level stop when the L1 marginal violation falls below ``tol``. Scaling
    vectors are folded into the potentials whenever they grow large, so
    the kernel never underflows.

    Returns:
        ``(cost of the entropic plan, total iterations)``.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    # zero-mass points carry no transport
    rows, cols = a > 0, b > 0
    a, b, cost = a[rows], b[cols], cost[np.ix_(rows, cols)]
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    schedule = []
    eps = max(float(cost.max()), reg)
    while eps > reg:
        schedule.append(eps)
        eps /= 2.0
    schedule.append(reg)
    total = 0
    for level, eps in enumerate(schedule):
        final = level == len(schedule) - 1
        budget = max_iter - total if final else 50
        used = 0
        while used < budget:
            kernel = np.exp((f[:, None] + g[None, :] - cost) / eps)
            u = np.ones(a.size)
            v = np.ones(b.size)
            absorb = False
            while used < budget:
                used += 1
                total += 1
                u = a / (kernel @ v)
                v = b / (kernel.T @ u)
                if not (np.isfinite(u).all() and np.isfinite(v).all()):
                    raise ConvergenceError("Sinkhorn scaling overflowed", iterations=total)
                if max(np.abs(np.log(u)).max(), np.abs(np.log(v)).max()) > 30.0:
                    absorb = True
                    break
                if final and total % 10 == 0:
                    err = np.abs(u * (kernel @ v) - a).sum()
                    if err < tol:
                        plan = u[:, None] * kernel * v[None, :]
                        return float(np.sum(plan * cost)), total
            f = f + eps * np.log(u)
            g = g + eps * np.log(v)
            if not absorb:
                break
    raise ConvergenceError(f"Sinkhorn did not reach tolerance {tol} in {max_iter} iterations",
                           iterations=total)


def weighted_wasserstein(synth: Dataset, w: WeightVector, real: Dataset,
                         reg: float = 0.01, tol: float = 1e-9, max_iter: int = 10_000,
                         exact_max_n: int = EXACT_OT_MAX_N) -> MetricReport:
    """Wasserstein-1 between the weighted synthetic and uniform real empirical laws."""
    if w.n != synth.n:
        raise ValueError("weight vector and synthetic dataset lengths differ")
    if not np.isfinite(w.log_values).all():
        raise ValueError("weights must be finite")
    a = w.normalized()
    a = a / a.sum()
    b = np.full(real.n, 1.0 / real.n)
    cost = cdist(synth.features, real.features, "euclidean")
    if max(synth.n, real.n) <= exact_max_n:
        value = exact_ot(a, b, cost)
        config = {"method": "exact"}
    else:
        value, iters = sinkhorn_ot(a, b, cost, reg, tol, max_iter)
        config = {"method": "sinkhorn", "reg": reg, "tol": tol, "iterations": iters}
    return MetricReport("wasserstein1", max(value, 0.0), config, synth.n, real.n)


def rank_auc(scores, labels) -> float:
    """Area under the ROC curve from the Mann-Whitney rank statistic, ties at 1/2."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes in the evaluation labels")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def downstream_auc(synth: Dataset, w: WeightVector, real_test: Dataset,
                   lam: float = 1e-3) -> MetricReport:
    """Train weighted L2 logistic regression on synthetic data, score on real test data."""
    from .ratio import fit_weighted_logistic

    if synth.labels is None or real_test.labels is None:
        raise ValueError("downstream AUC needs labelled synthetic and test data")
    if np.unique(synth.labels).size < 2:
        raise ValueError("synthetic training labels contain a single class")
    if np.unique(real_test.labels).size < 2:
        raise ValueError("test labels contain a single class")
    model = fit_weighted_logistic(synth.features, synth.labels, lam, w.normalized())
    value = rank_auc(model.logit(real_test.features), real_test.labels)
    return MetricReport("auc", value, {"model": "weighted_logistic", "lam": lam},
                        synth.n, real_test.n)


def mahalanobis(mean_a, mean_b, cov) -> float:
    diff = np.atleast_1d(np.asarray(mean_a, float) - np.asarray(mean_b, float))
    cov = np.atleast_2d(np.asarray(cov, float))
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("covariance is singular or not positive definite") from None
    z = np.linalg.solve(chol, diff)
    return float(math.sqrt(z @ z))
