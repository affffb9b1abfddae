"""Point-estimate metrics, simulation-based bootstrap and sample-set distances."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .seeding import STREAM_BOOTSTRAP, derive_seed
from .task_gen import NoiseRegime, Task


def mse_beta(estimates: Sequence[np.ndarray], truths: Sequence[np.ndarray]) -> float:
    """Mean over tasks of the squared Euclidean estimation error."""
    if len(estimates) != len(truths):
        raise ValueError(f"{len(estimates)} estimates for {len(truths)} truths")
    if not len(estimates):
        raise ValueError("no estimates")
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truths, dtype=np.float64)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    return float(np.mean(np.sum((est - tru) ** 2, axis=-1)))


def cosine_similarity(a, b, with_flag: bool = False):
    """Cosine of the angle between ``a`` and ``b``.

    If either vector is zero the value is defined as 0; with
    ``with_flag=True`` a ``(value, degenerate)`` pair is returned so callers
    can count such cases.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    degenerate = bool(na == 0.0 or nb == 0.0)
    value = 0.0 if degenerate else float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return (value, degenerate) if with_flag else value


@dataclass
class BootstrapReport:
    n_obs: int
    n_replicates: int
    per_coef_sd: np.ndarray
    sigma_boot: float
    regime_tag: str


def bootstrap_stability(
    estimator: Callable[[Task], np.ndarray],
    beta_true,
    N: int,
    B: int,
    regime: NoiseRegime,
    seed: int,
) -> BootstrapReport:
    """Spread of an estimator across ``B`` fresh datasets from a fixed ``beta_true``.

    Each replicate draws new covariates ``x ~ N(0, I)`` and new residuals from
    ``regime``.  ``sigma_boot`` is the mean over coefficients of the
    across-replicate standard deviation (``B - 1`` denominator).
    """
    if B < 2:
        raise ValueError("need at least two bootstrap replicates")
    beta_true = np.asarray(beta_true, dtype=np.float64)
    p = beta_true.size
    estimates = np.empty((B, p))
    for b in range(B):
        task_seed = derive_seed(seed, STREAM_BOOTSTRAP, N, b)
        rng = np.random.default_rng(task_seed)
        x = rng.standard_normal((N, p))
        y = x @ beta_true + regime.sample(rng, N)
        estimates[b] = estimator(Task(x, y, beta_true, N, regime.kind.value, task_seed))
    per_coef_sd = estimates.std(axis=0, ddof=1)
    return BootstrapReport(N, B, per_coef_sd, float(per_coef_sd.mean()), regime.kind.value)


def energy_distance(samples_a, samples_b) -> float:
    """Half-scaled V-statistic energy distance ``E|X-Y| - (E|X-X'| + E|Y-Y'|) / 2``.

    With the half scaling two point masses a distance ``d`` apart are at
    distance ``d``.  Self-distances are included in the within-sample means,
    so two identical sample sets give exactly zero.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("energy distance needs at least two samples per set")
    ab = cdist(a, b).mean()
    aa = cdist(a, a).mean()
    bb = cdist(b, b).mean()
    return float(max(ab - 0.5 * (aa + bb), 0.0))


def energy_null_quantile(
    sampler: Callable[[int, np.random.Generator], np.ndarray],
    n_a: int,
    n_b: int,
    rng: np.random.Generator,
    n_reps: int = 100,
    q: float = 0.95,
) -> float:
    """Quantile of the energy distance between two independent draws of ``sampler``."""
    null = [energy_distance(sampler(n_a, rng), sampler(n_b, rng)) for _ in range(n_reps)]
    return float(np.quantile(null, q))


def mode_coverage(samples, means) -> np.ndarray:
    """Share of samples whose nearest component mean is each component."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    means = np.asarray(getattr(means, "means", means), dtype=np.float64)
    if len(samples) < 1:
        raise ValueError("no samples")
    nearest = np.argmin(cdist(samples, means), axis=1)
    return np.bincount(nearest, minlength=len(means)) / len(samples)


@dataclass
class MetricRecord:
    metric_name: str
    value: float
    n_tasks: int
    seed: int
    model_tag: str
    checkpoint_epoch: str = ""

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"metric {self.metric_name} is not finite")


METRIC_COLUMNS = ["experiment", "model_tag", "checkpoint", "metric_name", "value", "n_tasks", "seed"]


def append_metrics(path, experiment: str, records: Sequence[MetricRecord]) -> Path:
    """Append records to a run-level CSV, writing the header for a new file."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([experiment, r.model_tag, r.checkpoint_epoch, r.metric_name, repr(float(r.value)), r.n_tasks, r.seed])
    return path
