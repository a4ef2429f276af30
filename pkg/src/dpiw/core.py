"""Shared data model: datasets, scaling, weight vectors, privacy spends and
seeded random streams.

Everything here is immutable after construction. Arrays handed to the
constructors are copied and marked read-only so instances can be shared
between threads and worker processes.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before meeting its tolerance."""

    def __init__(self, message: str, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class InfeasibleReleaseError(ValueError):
    """Requested noise calibration cannot keep the weights unbiased."""

    def __init__(self, message: str, max_release: int):
        super().__init__(message)
        self.max_release = max_release


class Source(enum.Enum):
    PRIVATE = "private"
    SYNTHETIC = "synthetic"


class Provenance(enum.Enum):
    TRUE = "true"
    ESTIMATED = "estimated"
    BETA_NOISED = "beta_noised"
    OUTPUT_LAPLACE = "output_laplace"
    OUTPUT_GAUSSIAN = "output_gaussian"
    SMOOTHED = "smoothed"
    CALIBRATED = "calibrated"
    UNIFORM = "uniform"


PRIVATIZED = frozenset(
    {Provenance.BETA_NOISED, Provenance.OUTPUT_LAPLACE, Provenance.OUTPUT_GAUSSIAN}
)


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PrivacySpend:
    epsilon: float
    delta: float = 0.0
    mechanism: str = ""

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if not 0 <= self.delta < 1:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")

    def __add__(self, other: "PrivacySpend") -> "PrivacySpend":
        return compose_spends([self, other])

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "delta": self.delta, "mechanism": self.mechanism}


def compose_spends(ledger: Iterable[PrivacySpend]) -> PrivacySpend:
    """Basic composition: epsilons and deltas add up."""
    ledger = list(ledger)
    eps = math.fsum(s.epsilon for s in ledger)
    delta = math.fsum(s.delta for s in ledger)
    mechanism = " + ".join(s.mechanism for s in ledger if s.mechanism)
    return PrivacySpend(eps, delta, mechanism)


@dataclass(frozen=True)
class RngStream:
    """Counter-based, splittable random stream.

    A stream is identified by ``(seed, stream_id, path)``; ``generator()``
    always restarts it from the beginning, so two calls give identical draws.
    Child streams are independent of the parent and of each other.
    """

    seed: int
    stream_id: int = 0
    path: tuple = ()

    def child(self, key: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + (int(key),))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.seed) & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(int(self.stream_id),) + self.path,
        )
        return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    source: Source = Source.SYNTHETIC
    bounds: Optional[np.ndarray] = None  # (d, 2) bounds the features were scaled with
    clamp_count: int = 0
    columns: Optional[tuple] = None

    def __post_init__(self):
        x = np.array(self.features, dtype=float, copy=True)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"features must be an N x d matrix with N, d >= 1, got shape {x.shape}")
        x.setflags(write=False)
        object.__setattr__(self, "features", x)
        if self.labels is not None:
            y = np.asarray(self.labels)
            if y.shape != (x.shape[0],):
                raise ValueError(f"labels must have length {x.shape[0]}, got shape {y.shape}")
            if not np.isin(y, (0, 1)).all():
                raise ValueError("labels must be 0 or 1")
            object.__setattr__(self, "labels", _frozen(y, dtype=np.int8))
        if self.bounds is not None:
            object.__setattr__(self, "bounds", _frozen(self.bounds))
        if self.columns is not None:
            object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def is_scaled(self) -> bool:
        return self.bounds is not None

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return replace(self, features=self.features[idx], labels=labels, clamp_count=0)


def _check_bounds(bounds, d: int) -> np.ndarray:
    b = np.asarray(bounds, dtype=float)
    if b.shape == (2,):
        b = np.tile(b, (d, 1))
    if b.shape != (d, 2):
        raise ValueError(f"bounds must have shape ({d}, 2), got {b.shape}")
    bad = [j for j in range(d) if not b[j, 1] > b[j, 0]]
    if bad:
        detail = ", ".join(f"feature {j}: min={b[j, 0]}, max={b[j, 1]}" for j in bad)
        raise ValueError(f"degenerate scaling bounds (need max > min): {detail}")
    return b


def minmax_scale(data: Dataset, bounds) -> Dataset:
    """Map each feature to [0, 1] with declared public bounds.

    Values outside the bounds are clamped; the number of clamped entries is
    stored in ``clamp_count``.
    """
    b = _check_bounds(bounds, data.d)
    lo, hi = b[:, 0], b[:, 1]
    z = (data.features - lo) / (hi - lo)
    outside = int(np.count_nonzero((z < 0) | (z > 1)))
    z = np.clip(z, 0.0, 1.0)
    return replace(data, features=z, bounds=b, clamp_count=outside)


def train_test_split(data: Dataset, train_fraction: float, rng: RngStream):
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if data.n < 2:
        raise ValueError("need at least 2 rows to split")
    # tolerance guards against products like 0.7 * 10 = 7.000000000000001
    n_train = min(math.ceil(train_fraction * data.n - 1e-9), data.n - 1)
    perm = rng.generator().permutation(data.n)
    return data.take(np.sort(perm[:n_train])), data.take(np.sort(perm[n_train:]))


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Per-observation importance weights, held as log-weights.

    ``history`` records every provenance the vector has passed through, so
    the order of privatization and post-processing is visible in reports.
    ``info`` carries mechanism metadata such as the multiplicative noise
    variance.
    """

    log_values: np.ndarray
    provenance: Provenance
    spend: Optional[PrivacySpend] = None
    history: tuple = ()
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        lv = np.array(self.log_values, dtype=float, copy=True).ravel()
        if not np.isfinite(lv).all():
            bad = np.flatnonzero(~np.isfinite(lv))[:5]
            raise ValueError(f"log-weights must be finite; offending indices {bad.tolist()}")
        if self.provenance is Provenance.UNIFORM and np.any(lv != 0):
            raise ValueError("uniform weights must all equal 1")
        if self.provenance in PRIVATIZED and self.spend is None:
            raise ValueError(f"{self.provenance.value} weights need a privacy spend")
        lv.setflags(write=False)
        object.__setattr__(self, "log_values", lv)
        if not self.history:
            object.__setattr__(self, "history", (self.provenance.value,))

    @classmethod
    def uniform(cls, n: int) -> "WeightVector":
        return cls(np.zeros(n), Provenance.UNIFORM, PrivacySpend(0.0, 0.0, "uniform"))

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)

    @property
    def n(self) -> int:
        return self.log_values.shape[0]

    def __len__(self) -> int:
        return self.n

    def normalized(self) -> np.ndarray:
        """Weights rescaled to mean 1, computed stably from the logs."""
        lv = self.log_values - self.log_values.max()
        w = np.exp(lv)
        return w / w.mean()

    def derive(self, log_values, provenance: Provenance, **changes) -> "WeightVector":
        """New vector that keeps the spend and extends the history."""
        spend = changes.pop("spend", self.spend)
        info = {**self.info, **changes.pop("info", {})}
        return WeightVector(
            log_values, provenance, spend,
            history=self.history + (provenance.value,), info=info,
        )

    def take(self, idx) -> "WeightVector":
        return replace(self, log_values=self.log_values[np.asarray(idx)])

    @property
    def releasable(self) -> bool:
        # Raw classifier output and oracle weights carry no spend; a spend of
        # infinite epsilon (noise multiplier zero) protects nothing.
        return self.spend is not None and math.isfinite(self.spend.epsilon)


def read_dataset_csv(
    path,
    label_column: Optional[str] = None,
    source: Source = Source.SYNTHETIC,
    feature_columns: Optional[Sequence[str]] = None,
) -> Dataset:
    """Read a numeric CSV with a header row.

    Rows with missing or non-numeric values are rejected with their line
    number.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if label_column is not None and label_column not in header:
            raise ValueError(f"{path}: label column {label_column!r} not in header")
        if feature_columns is None:
            feature_columns = [h for h in header if h != label_column]
        fidx = [header.index(c) for c in feature_columns]
        lidx = header.index(label_column) if label_column is not None else None
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(row[j]) for j in fidx]
                lab = None if lidx is None else float(row[lidx])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: missing or non-numeric value") from None
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
            if lab is not None:
                labels.append(lab)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    y = np.asarray(labels) if lidx is not None else None
    return Dataset(np.asarray(rows), y, source, columns=tuple(feature_columns))


def write_dataset_csv(data: Dataset, path, label_column: str = "label") -> None:
    cols = list(data.columns or [f"x{j}" for j in range(data.d)])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols + ([label_column] if data.labels is not None else []))
        for i in range(data.n):
            row = [repr(float(v)) for v in data.features[i]]
            if data.labels is not None:
                row.append(str(int(data.labels[i])))
            w.writerow(row)
