"""Seeded generators for synthetic linear-regression meta-datasets.

Four task families are provided:

* clustered prior: coefficients are one of ``K`` fixed centroids,
* robustness: Gaussian coefficients with one of four zero-mean noise laws,
* sparse: a random support of prescribed size, Gaussian nonzeros,
* ring: 2-D coefficients from an ``K``-mode Gaussian mixture on a circle.

Each task is a pure function of its generator spec and a 64-bit
``task_seed`` (see :mod:`amortlab.seeding`), so any task can be regenerated
on its own.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .seeding import (
    STREAM_CENTROIDS,
    STREAM_CLUSTERED,
    STREAM_RING,
    STREAM_ROBUST,
    STREAM_SPARSE,
    STREAM_SPARSE_SPLIT,
    derive_seed,
)


class SpecError(ValueError):
    """A generator spec or argument is invalid."""


@dataclass
class Task:
    """One regression problem ``y = X beta + noise``."""

    inputs: np.ndarray
    outputs: np.ndarray
    beta_true: np.ndarray
    n_obs: int
    regime_tag: str
    task_seed: int
    sparsity: int | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.outputs = np.asarray(self.outputs, dtype=np.float64)
        self.beta_true = np.asarray(self.beta_true, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.n_obs:
            raise SpecError(f"inputs shape {self.inputs.shape} inconsistent with n_obs={self.n_obs}")
        if self.outputs.shape != (self.n_obs,):
            raise SpecError(f"outputs shape {self.outputs.shape} inconsistent with n_obs={self.n_obs}")
        if self.beta_true.shape != (self.inputs.shape[1],):
            raise SpecError("beta_true length must equal the number of covariates")

    @property
    def p(self) -> int:
        return self.beta_true.shape[0]

    def tokens(self) -> np.ndarray:
        """Rows ``[x_n; y_n]`` as an ``(n_obs, p + 1)`` array."""
        return np.column_stack([self.inputs, self.outputs])

    def permuted(self, perm: Sequence[int]) -> "Task":
        perm = np.asarray(perm)
        return replace(self, inputs=self.inputs[perm], outputs=self.outputs[perm])

    def subset(self, rows: Sequence[int]) -> "Task":
        """The task restricted to ``rows``, in that order."""
        rows = np.asarray(rows, dtype=np.intp)
        return replace(self, inputs=self.inputs[rows], outputs=self.outputs[rows], n_obs=len(rows))


@dataclass
class MetaDataset:
    """Ordered tasks; the first ``n_train`` are training tasks, the rest test."""

    tasks: list[Task]
    n_train: int
    n_test: int
    global_seed: int
    spec_tag: str
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_train + self.n_test != len(self.tasks):
            raise SpecError("n_train + n_test must equal the number of tasks")

    @property
    def train_tasks(self) -> list[Task]:
        return self.tasks[: self.n_train]

    @property
    def test_tasks(self) -> list[Task]:
        return self.tasks[self.n_train :]

    def save(self, directory) -> Path:
        return save_meta(self, directory)


def _split_sizes(n_tasks: int, n_test: int | None) -> tuple[int, int]:
    if n_test is None:
        n_test = int(round(0.1 * n_tasks))
    if not 0 <= n_test <= n_tasks:
        raise SpecError(f"n_test={n_test} outside [0, {n_tasks}]")
    return n_tasks - n_test, n_test


def _linear_task(rng, beta, n_obs, noise, regime_tag, task_seed, sparsity=None) -> Task:
    x = rng.standard_normal((n_obs, beta.shape[0]))
    eps = noise(rng, n_obs)
    return Task(x, x @ beta + eps, beta, n_obs, regime_tag, task_seed, sparsity)


def _gaussian_noise(sd: float):
    return lambda rng, n: sd * rng.standard_normal(n)


# -- clustered prior -----------------------------------------------------------


@dataclass(frozen=True)
class ClusteredPriorSpec:
    p: int
    K: int
    tau: float
    sigma_noise: float
    n_obs_min: int
    n_obs_max: int
    centroids: np.ndarray

    def __post_init__(self):
        if self.K < 1 or self.p < 1:
            raise SpecError("K and p must be at least 1")
        if self.tau < 0:
            raise SpecError("tau must be non-negative")
        if self.sigma_noise <= 0:
            raise SpecError("sigma_noise must be positive")
        if not 1 <= self.n_obs_min <= self.n_obs_max:
            raise SpecError("need 1 <= n_obs_min <= n_obs_max")
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.shape != (self.K, self.p):
            raise SpecError(f"centroids must have shape ({self.K}, {self.p})")
        object.__setattr__(self, "centroids", c)

    @classmethod
    def sample(
        cls,
        seed: int,
        p: int = 20,
        K: int = 5,
        tau: float = 3.0,
        sigma_noise: float = 1.0,
        n_obs_min: int = 10,
        n_obs_max: int = 30,
    ) -> "ClusteredPriorSpec":
        """Draw centroids ``mu_k ~ N(0, tau^2 I)`` once for a run."""
        if K < 1 or p < 1:
            raise SpecError("K and p must be at least 1")
        rng = np.random.default_rng(derive_seed(seed, STREAM_CENTROIDS))
        centroids = tau * rng.standard_normal((K, p))
        return cls(p, K, tau, sigma_noise, n_obs_min, n_obs_max, centroids)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["centroids"] = self.centroids.tolist()
        return d


def clustered_task(spec: ClusteredPriorSpec, task_seed: int) -> Task:
    rng = np.random.default_rng(task_seed)
    k = int(rng.integers(spec.K))
    n_obs = int(rng.integers(spec.n_obs_min, spec.n_obs_max + 1))
    beta = spec.centroids[k].copy()
    return _linear_task(rng, beta, n_obs, _gaussian_noise(spec.sigma_noise), "clustered", task_seed)


def gen_clustered_meta(
    spec: ClusteredPriorSpec, n_tasks: int, seed: int, n_test: int | None = None
) -> MetaDataset:
    """Tasks whose coefficients are a uniformly chosen centroid of ``spec``."""
    if n_tasks < 1:
        raise SpecError("n_tasks must be at least 1")
    n_train, n_test = _split_sizes(n_tasks, n_test)
    tasks = [clustered_task(spec, derive_seed(seed, STREAM_CLUSTERED, i)) for i in range(n_tasks)]
    return MetaDataset(tasks, n_train, n_test, seed, f"clustered-K{spec.K}", spec.to_dict())


# -- robustness ----------------------------------------------------------------


class NoiseKind(str, Enum):
    GAUSSIAN = "gaussian"
    ASYMMETRIC = "asymmetric"
    BIMODAL = "bimodal"
    TRIMODAL = "trimodal"


@dataclass(frozen=True)
class NoiseRegime:
    """Zero-mean residual law.

    Gaussian-mixture kinds are described by weights, means and sds (means
    are shifted so the mixture mean is exactly zero).  The asymmetric kind
    is ``E - 1`` with ``E ~ Exp(1)``; its single-entry vectors record the
    law's mean (0) and sd (1).
    """

    kind: NoiseKind
    mixture_weights: tuple
    mixture_means: tuple
    mixture_sds: tuple

    def __post_init__(self):
        kind = NoiseKind(self.kind)
        object.__setattr__(self, "kind", kind)
        w = np.asarray(self.mixture_weights, dtype=np.float64)
        m = np.asarray(self.mixture_means, dtype=np.float64)
        s = np.asarray(self.mixture_sds, dtype=np.float64)
        if not (w.shape == m.shape == s.shape) or w.ndim != 1 or w.size == 0:
            raise SpecError("mixture vectors must be non-empty and of equal length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise SpecError("mixture weights must be non-negative and sum to 1")
        if np.any(s <= 0):
            raise SpecError("mixture sds must be positive")
        m = m - np.dot(w, m)
        object.__setattr__(self, "mixture_weights", tuple(w.tolist()))
        object.__setattr__(self, "mixture_means", tuple(m.tolist()))
        object.__setattr__(self, "mixture_sds", tuple(s.tolist()))

    @classmethod
    def gaussian(cls, sd: float = 1.0) -> "NoiseRegime":
        return cls(NoiseKind.GAUSSIAN, (1.0,), (0.0,), (sd,))

    @classmethod
    def asymmetric(cls) -> "NoiseRegime":
        return cls(NoiseKind.ASYMMETRIC, (1.0,), (0.0,), (1.0,))

    @classmethod
    def bimodal(cls, means=(-1.0, 4.0), sds=(1.0, 0.5), weights=(0.8, 0.2)) -> "NoiseRegime":
        return cls(NoiseKind.BIMODAL, tuple(weights), tuple(means), tuple(sds))

    @classmethod
    def trimodal(cls, means=(0.0, -5.0, 5.0), sds=(1.0, 0.7, 0.7), weights=(0.8, 0.1, 0.1)) -> "NoiseRegime":
        return cls(NoiseKind.TRIMODAL, tuple(weights), tuple(means), tuple(sds))

    @classmethod
    def from_kind(cls, kind: str | NoiseKind) -> "NoiseRegime":
        return {
            NoiseKind.GAUSSIAN: cls.gaussian,
            NoiseKind.ASYMMETRIC: cls.asymmetric,
            NoiseKind.BIMODAL: cls.bimodal,
            NoiseKind.TRIMODAL: cls.trimodal,
        }[NoiseKind(kind)]()

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind is NoiseKind.ASYMMETRIC:
            return rng.exponential(1.0, size) - 1.0
        if len(self.mixture_weights) == 1:
            return self.mixture_means[0] + self.mixture_sds[0] * rng.standard_normal(size)
        comp = rng.choice(len(self.mixture_weights), size=size, p=self.mixture_weights)
        means = np.asarray(self.mixture_means)[comp]
        sds = np.asarray(self.mixture_sds)[comp]
        return means + sds * rng.standard_normal(size)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "mixture_weights": list(self.mixture_weights),
            "mixture_means": list(self.mixture_means),
            "mixture_sds": list(self.mixture_sds),
        }


ALL_REGIMES = tuple(NoiseKind)


def robust_task(
    prior_sd: float, regime: NoiseRegime, task_seed: int, p: int, n_obs_min: int, n_obs_max: int
) -> Task:
    rng = np.random.default_rng(task_seed)
    beta = prior_sd * rng.standard_normal(p)
    n_obs = int(rng.integers(n_obs_min, n_obs_max + 1))
    # noise is drawn last: the same task_seed gives identical beta and X under every regime
    return _linear_task(rng, beta, n_obs, regime.sample, regime.kind.value, task_seed)


def gen_robust_meta(
    prior_sd: float,
    regime: NoiseRegime,
    n_tasks: int,
    seed: int,
    n_test: int | None = None,
    p: int = 20,
    n_obs_min: int = 10,
    n_obs_max: int = 30,
) -> MetaDataset:
    """Gaussian-prior tasks with residuals from ``regime``."""
    if prior_sd <= 0:
        raise SpecError("prior_sd must be positive")
    if n_tasks < 1:
        raise SpecError("n_tasks must be at least 1")
    if not 1 <= n_obs_min <= n_obs_max:
        raise SpecError("need 1 <= n_obs_min <= n_obs_max")
    n_train, n_test = _split_sizes(n_tasks, n_test)
    tasks = [
        robust_task(prior_sd, regime, derive_seed(seed, STREAM_ROBUST, i), p, n_obs_min, n_obs_max)
        for i in range(n_tasks)
    ]
    spec = {
        "prior_sd": prior_sd,
        "regime": regime.to_dict(),
        "p": p,
        "n_obs_min": n_obs_min,
        "n_obs_max": n_obs_max,
    }
    return MetaDataset(tasks, n_train, n_test, seed, f"robust-{regime.kind.value}", spec)


# -- sparse --------------------------------------------------------------------


@dataclass(frozen=True)
class SparseTaskSpec:
    """``sparsity_percent`` is the percentage of coefficients that are zero."""

    p: int = 20
    sparsity_percent: int = 50
    coef_sd: float = math.sqrt(3.0)
    n_obs_min: int = 400
    n_obs_max: int = 500

    def __post_init__(self):
        if self.p < 1:
            raise SpecError("p must be at least 1")
        if not 0 <= self.sparsity_percent <= 100:
            raise SpecError("sparsity_percent must lie in [0, 100]")
        if self.coef_sd <= 0:
            raise SpecError("coef_sd must be positive")
        if not 1 <= self.n_obs_min <= self.n_obs_max:
            raise SpecError("need 1 <= n_obs_min <= n_obs_max")

    @property
    def support_size(self) -> int:
        # round half up, not to even
        return int(math.floor(self.p * (1.0 - self.sparsity_percent / 100.0) + 0.5))


def sparse_task(spec: SparseTaskSpec, task_seed: int) -> Task:
    rng = np.random.default_rng(task_seed)
    beta = np.zeros(spec.p)
    support = rng.choice(spec.p, size=spec.support_size, replace=False)
    beta[support] = spec.coef_sd * rng.standard_normal(support.size)
    n_obs = int(rng.integers(spec.n_obs_min, spec.n_obs_max + 1))
    return _linear_task(
        rng, beta, n_obs, _gaussian_noise(1.0), f"sparse-k{spec.sparsity_percent}",
        task_seed, spec.sparsity_percent,
    )


def gen_sparse_meta(
    spec: SparseTaskSpec,
    tasks_per_level: int,
    levels: Sequence[int],
    seed: int,
    n_test: int | None = None,
) -> MetaDataset:
    """``tasks_per_level`` tasks at every sparsity level, shuffled, then split."""
    levels = [int(k) for k in levels]
    for k in levels:
        if not 0 <= k <= 100:
            raise SpecError(f"sparsity level {k} outside [0, 100]")
    if tasks_per_level < 1 or not levels:
        raise SpecError("need at least one level and one task per level")
    tasks = []
    for li, k in enumerate(levels):
        level_spec = replace(spec, sparsity_percent=k)
        for j in range(tasks_per_level):
            tasks.append(sparse_task(level_spec, derive_seed(seed, STREAM_SPARSE, li * tasks_per_level + j)))
    order = np.random.default_rng(derive_seed(seed, STREAM_SPARSE_SPLIT)).permutation(len(tasks))
    tasks = [tasks[i] for i in order]
    n_train, n_test = _split_sizes(len(tasks), n_test)
    meta_spec = asdict(spec)
    meta_spec["levels"] = levels
    meta_spec["tasks_per_level"] = tasks_per_level
    return MetaDataset(tasks, n_train, n_test, seed, "sparse", meta_spec)


# -- ring ----------------------------------------------------------------------


@dataclass(frozen=True)
class RingPriorSpec:
    K: int = 8
    radius: float = 5.0
    component_sd: float = 0.35
    obs_noise_sd: float = 1.0
    p: int = 2

    def __post_init__(self):
        if self.K < 1:
            raise SpecError("K must be at least 1")
        if self.radius <= 0 or self.component_sd <= 0 or self.obs_noise_sd <= 0:
            raise SpecError("radius and standard deviations must be positive")
        if self.p != 2:
            raise SpecError("ring prior is two-dimensional")

    @property
    def means(self) -> np.ndarray:
        angles = 2.0 * np.pi * np.arange(self.K) / self.K
        return self.radius * np.column_stack([np.cos(angles), np.sin(angles)])

    def sample_beta(self, rng: np.random.Generator, size: int) -> np.ndarray:
        comp = rng.integers(self.K, size=size)
        return self.means[comp] + self.component_sd * rng.standard_normal((size, 2))


def ring_task(spec: RingPriorSpec, n_obs: int, task_seed: int) -> Task:
    rng = np.random.default_rng(task_seed)
    beta = spec.sample_beta(rng, 1)[0]
    return _linear_task(rng, beta, n_obs, _gaussian_noise(spec.obs_noise_sd), "ring", task_seed)


def gen_ring_task(spec: RingPriorSpec, n_obs: int, seed: int, index: int = 0) -> Task:
    if n_obs < 0:
        raise SpecError("n_obs must be non-negative")
    return ring_task(spec, n_obs, derive_seed(seed, STREAM_RING, index))


@dataclass
class RingBatch:
    """Padded arrays for many ring tasks; ``mask[i, n]`` marks real rows."""

    beta: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    mask: np.ndarray

    def tokens(self) -> np.ndarray:
        return np.concatenate([self.inputs, self.outputs[..., None]], axis=-1)


def sample_ring_batch(
    spec: RingPriorSpec, size: int, rng: np.random.Generator, n_obs_min: int, n_obs_max: int
) -> RingBatch:
    """Draw ``size`` independent (beta, task) pairs with ``n_obs`` uniform in the range."""
    beta = spec.sample_beta(rng, size)
    n_obs = rng.integers(n_obs_min, n_obs_max + 1, size=size)
    width = max(int(n_obs_max), 1)
    x = rng.standard_normal((size, width, 2))
    y = np.einsum("bnd,bd->bn", x, beta) + spec.obs_noise_sd * rng.standard_normal((size, width))
    mask = np.arange(width)[None, :] < n_obs[:, None]
    x = np.where(mask[..., None], x, 0.0)
    y = np.where(mask, y, 0.0)
    return RingBatch(beta, x, y, mask)


# -- persistence -----------------------------------------------------------------
#
# A MetaDataset directory holds ``manifest.json`` plus ``task_XXXXX.csv`` per
# task.  Each task file has no header; line 1 is beta_true (p values), then
# n_obs lines of ``x_1,...,x_p,y``.  Floats are written with 17 significant
# digits so a save/load round trip is exact.


def _fmt(values) -> str:
    return ",".join(format(float(v), ".17g") for v in values)


def save_meta(meta: MetaDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, task in enumerate(meta.tasks):
        name = f"task_{i:05d}.csv"
        lines = [_fmt(task.beta_true)]
        lines.extend(_fmt(row) for row in task.tokens())
        (directory / name).write_text("\n".join(lines) + "\n", encoding="utf-8")
        entries.append(
            {
                "file": name,
                "task_seed": task.task_seed,
                "n_obs": task.n_obs,
                "regime_tag": task.regime_tag,
                "sparsity": task.sparsity,
                "split": "train" if i < meta.n_train else "test",
            }
        )
    manifest = {
        "spec_tag": meta.spec_tag,
        "global_seed": meta.global_seed,
        "n_train": meta.n_train,
        "n_test": meta.n_test,
        "spec": meta.spec,
        "columns": "line 1: beta_1..beta_p; then n_obs lines: x_1..x_p,y",
        "tasks": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return directory


def load_meta(directory) -> MetaDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    tasks = []
    for entry in manifest["tasks"]:
        lines = (directory / entry["file"]).read_text(encoding="utf-8").splitlines()
        beta = np.array([float(v) for v in lines[0].split(",")])
        rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]]).reshape(-1, beta.size + 1)
        tasks.append(
            Task(rows[:, :-1], rows[:, -1], beta, entry["n_obs"], entry["regime_tag"],
                 entry["task_seed"], entry["sparsity"])
        )
    return MetaDataset(
        tasks, manifest["n_train"], manifest["n_test"], manifest["global_seed"],
        manifest["spec_tag"], manifest["spec"],
    )
