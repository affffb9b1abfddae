"""Classical baselines and exact references.

* :func:`ols_fit` - minimum-norm least squares per task,
* :func:`bayes_posterior_mean_clustered` - posterior mean under the clustered prior,
* :func:`exact_ring_posterior` - conjugate posterior under the ring mixture prior,
* :func:`rw_metropolis` - random-walk Metropolis for 2-D log densities.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .task_gen import ClusteredPriorSpec, RingPriorSpec, Task


def ols_fit(task: Task) -> np.ndarray:
    """Least-squares coefficients; the minimum-norm solution when rank deficient."""
    if task.n_obs < 1:
        raise ValueError("OLS needs at least one observation")
    return np.linalg.lstsq(task.inputs, task.outputs, rcond=None)[0]


def clustered_log_weights(task: Task, spec: ClusteredPriorSpec) -> np.ndarray:
    resid = task.outputs[None, :] - spec.centroids @ task.inputs.T
    return -np.sum(resid * resid, axis=1) / (2.0 * spec.sigma_noise**2)


def clustered_posterior_weights(task: Task, spec: ClusteredPriorSpec) -> np.ndarray:
    """Posterior probability of each centroid (uniform prior over centroids)."""
    logw = clustered_log_weights(task, spec)
    return np.exp(logw - logsumexp(logw))


def bayes_posterior_mean_clustered(task: Task, spec: ClusteredPriorSpec) -> np.ndarray:
    return clustered_posterior_weights(task, spec) @ spec.centroids


@dataclass
class GaussianMixture:
    """Weighted sum of Gaussians in the plane."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        k = self.weights.size
        if self.means.shape != (k, 2) or self.covariances.shape != (k, 2, 2):
            raise ValueError("means must be (K, 2) and covariances (K, 2, 2)")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.max(np.abs(self.covariances - self.covariances.transpose(0, 2, 1))) > 1e-12:
            raise ValueError("covariances must be symmetric")
        self._chol = np.linalg.cholesky(self.covariances)  # raises unless positive-definite
        self._prec = np.linalg.inv(self.covariances)
        self._log_norm = (
            np.log(np.where(self.weights > 0, self.weights, 1.0))
            - np.log(2.0 * np.pi)
            - np.log(np.diagonal(self._chol, axis1=1, axis2=2)).sum(axis=1)
        )
        self._log_norm[self.weights == 0] = -np.inf

    @property
    def n_components(self) -> int:
        return self.weights.size

    def component_logpdf(self, points) -> np.ndarray:
        """``log(w_k N(x | m_k, S_k))`` for every point and component, shape ``(..., K)``."""
        x = np.asarray(points, dtype=np.float64)
        d = x[..., None, :] - self.means
        maha = np.einsum("...ki,kij,...kj->...k", d, self._prec, d)
        return self._log_norm - 0.5 * maha

    def logpdf(self, points) -> np.ndarray:
        return logsumexp(self.component_logpdf(points), axis=-1)

    def pdf(self, points) -> np.ndarray:
        return np.exp(self.logpdf(points))

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances_row_major": self.covariances.reshape(-1, 4).tolist(),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "GaussianMixture":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d["weights"], d["means"], np.array(d["covariances_row_major"]).reshape(-1, 2, 2))


def ring_prior_mixture(spec: RingPriorSpec) -> GaussianMixture:
    k = spec.K
    covs = np.broadcast_to(spec.component_sd**2 * np.eye(2), (k, 2, 2)).copy()
    return GaussianMixture(np.full(k, 1.0 / k), spec.means, covs)


def exact_ring_posterior(task: Task, spec: RingPriorSpec) -> GaussianMixture:
    """Posterior of the 2-D coefficients under the ring mixture prior.

    Every component is conjugate: covariance ``(I/s^2 + X'X/e^2)^-1``, mean
    ``S (mu_k/s^2 + X'y/e^2)``.  Component weights are the prior weight times
    the marginal likelihood ``N(y | X mu_k, s^2 XX' + e^2 I)``; only the
    ``mu_k``-dependent part of its log is needed, which Woodbury reduces to
    2x2 algebra for any number of observations.
    """
    if task.n_obs == 0:
        return ring_prior_mixture(spec)
    s2 = spec.component_sd**2
    e2 = spec.obs_noise_sd**2
    x, y = task.inputs, task.outputs
    a = x.T @ x
    b = x.T @ y
    cov = np.linalg.inv(np.eye(2) / s2 + a / e2)
    cov = 0.5 * (cov + cov.T)
    mu = spec.means
    means = (mu / s2 + b / e2) @ cov.T
    # X' C^-1 X and X' C^-1 y with C = s2 XX' + e2 I
    ridge = np.linalg.solve(e2 / s2 * np.eye(2) + a, np.column_stack([a, b]))
    xcx = (a - a @ ridge[:, :2]) / e2
    xcy = (b - a @ ridge[:, 2]) / e2
    xcx = 0.5 * (xcx + xcx.T)
    logw = mu @ xcy - 0.5 * np.einsum("ki,ij,kj->k", mu, xcx, mu)
    weights = np.exp(logw - logsumexp(logw))
    return GaussianMixture(weights / weights.sum(), means, np.broadcast_to(cov, (spec.K, 2, 2)).copy())


def sample_mixture(mix: GaussianMixture, n: int, seed: int | np.random.Generator) -> np.ndarray:
    """``n`` draws: a component by weight, then a Gaussian draw from it."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if n == 0:
        return np.empty((0, 2))
    comp = rng.choice(mix.n_components, size=n, p=mix.weights)
    z = rng.standard_normal((n, 2))
    return mix.means[comp] + np.einsum("nij,nj->ni", mix._chol[comp], z)


@dataclass
class McmcConfig:
    n_steps: int = 20_000
    burn_in: int = 5_000
    proposal_sd: float = 0.8
    init: tuple = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_steps:
            raise ValueError("need 0 <= burn_in < n_steps")
        if self.proposal_sd < 0:
            raise ValueError("proposal_sd must be non-negative")


def rw_metropolis(log_density: Callable[[np.ndarray], float], cfg: McmcConfig):
    """Symmetric Gaussian random-walk Metropolis chain.

    Returns ``(samples, acceptance_rate)`` where ``samples`` holds the
    ``n_steps - burn_in`` post-burn-in states and the rate counts all steps.
    """
    x = np.asarray(cfg.init, dtype=np.float64).copy()
    lp = float(log_density(x))
    if not math.isfinite(lp):
        raise ValueError("log density is not finite at the initial state")
    rng = np.random.default_rng(cfg.seed)
    steps = cfg.proposal_sd * rng.standard_normal((cfg.n_steps, x.size))
    log_u = np.log(rng.random(cfg.n_steps))
    out = np.empty((cfg.n_steps - cfg.burn_in, x.size))
    accepted = 0
    for i in range(cfg.n_steps):
        prop = x + steps[i]
        lp_prop = float(log_density(prop))
        if log_u[i] < lp_prop - lp:
            x, lp = prop, lp_prop
            accepted += 1
        if i >= cfg.burn_in:
            out[i - cfg.burn_in] = x
    return out, accepted / cfg.n_steps


def effective_sample_size(chain: np.ndarray) -> float:
    """Smallest per-coordinate ESS, using Geyer's initial positive sequence."""
    chain = np.atleast_2d(np.asarray(chain, dtype=np.float64))
    if chain.shape[0] == 1:
        chain = chain.T
    n = chain.shape[0]
    ess = []
    for col in chain.T:
        c = col - col.mean()
        var = c @ c / n
        if var == 0:
            ess.append(1.0)
            continue
        f = np.fft.rfft(c, 2 * n)
        acf = np.fft.irfft(f * np.conj(f))[:n] / (n * var)
        tau = -1.0
        for k in range(0, n - 1, 2):
            pair = acf[k] + acf[k + 1]
            if pair <= 0:
                break
            tau += 2.0 * pair
        ess.append(n / max(tau, 1.0 / n))
    return float(min(ess))
