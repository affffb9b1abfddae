import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.distance import cdist
from scipy.stats import skew

from amortlab.task_gen import (
    ClusteredPriorSpec,
    NoiseRegime,
    RingPriorSpec,
    SparseTaskSpec,
    SpecError,
    Task,
    gen_clustered_meta,
    gen_ring_task,
    gen_robust_meta,
    gen_sparse_meta,
    load_meta,
    sample_ring_batch,
    save_meta,
)


def assert_same_tasks(a, b):
    assert len(a.tasks) == len(b.tasks)
    for s, t in zip(a.tasks, b.tasks):
        np.testing.assert_array_equal(s.inputs, t.inputs)
        np.testing.assert_array_equal(s.outputs, t.outputs)
        np.testing.assert_array_equal(s.beta_true, t.beta_true)
        assert (s.n_obs, s.task_seed, s.regime_tag, s.sparsity) == (t.n_obs, t.task_seed, t.regime_tag, t.sparsity)


def test_task_validates_shapes():
    with pytest.raises(ValueError):
        Task(np.zeros((3, 2)), np.zeros(4), np.zeros(2), 3, "x", 0)
    with pytest.raises(ValueError):
        Task(np.zeros((3, 2)), np.zeros(3), np.zeros(5), 3, "x", 0)


def test_degenerate_clustered_prior_gives_zero_coefficients():
    spec = ClusteredPriorSpec.sample(1, p=3, K=1, tau=0.0)
    meta = gen_clustered_meta(spec, 20, seed=2)
    assert all(np.all(t.beta_true == 0) for t in meta.tasks)


def test_clustered_coefficients_are_exact_centroids():
    spec = ClusteredPriorSpec.sample(3)
    meta = gen_clustered_meta(spec, 200, seed=4)
    for t in meta.tasks:
        assert any(np.array_equal(t.beta_true, c) for c in spec.centroids)
        assert 10 <= t.n_obs <= 30 and t.inputs.shape == (t.n_obs, 20)


def test_centroid_variance_matches_tau_squared():
    spec = ClusteredPriorSpec.sample(0, p=20, K=5, tau=3.0)
    meta = gen_clustered_meta(spec, 10_000, seed=6, n_test=0)
    betas = np.array([t.beta_true for t in meta.tasks])
    # the prior mean is known to be zero, so the second moment estimates tau^2
    assert abs(np.mean(betas**2) - 9.0) < 0.15 * 9.0


@pytest.mark.parametrize("kwargs", [dict(K=0), dict(tau=-1.0), dict(sigma_noise=0.0), dict(n_obs_min=0)])
def test_invalid_clustered_spec_rejected(kwargs):
    with pytest.raises(SpecError):
        ClusteredPriorSpec.sample(0, **kwargs)


def test_generation_is_deterministic_and_seeds_disjoint():
    spec = ClusteredPriorSpec.sample(7)
    a = gen_clustered_meta(spec, 50, seed=8)
    assert_same_tasks(a, gen_clustered_meta(spec, 50, seed=8))
    train = {t.task_seed for t in a.train_tasks}
    assert not train & {t.task_seed for t in a.test_tasks}
    assert (a.n_train, a.n_test) == (45, 5)


def test_robust_split_sizes():
    meta = gen_robust_meta(9.0, NoiseRegime.gaussian(), 60, seed=1, n_test=6)
    assert (meta.n_train, meta.n_test) == (54, 6)
    assert len(meta.train_tasks) == 54


def test_gaussian_noise_sd():
    e = NoiseRegime.gaussian().sample(np.random.default_rng(0), 100_000)
    assert abs(e.std() - 1.0) < 0.02


def test_asymmetric_noise_moments():
    e = NoiseRegime.asymmetric().sample(np.random.default_rng(1), 100_000)
    assert abs(e.mean()) < 0.02
    assert abs(skew(e) - 2.0) < 0.2


@pytest.mark.parametrize("kind", ["gaussian", "asymmetric", "bimodal", "trimodal"])
def test_every_regime_has_zero_mean(kind):
    e = NoiseRegime.from_kind(kind).sample(np.random.default_rng(2), 100_000)
    assert abs(e.mean()) < 3 * e.std() / np.sqrt(e.size)


def test_multimodal_regimes_are_shifted_to_zero_mean():
    for regime in (NoiseRegime.bimodal(), NoiseRegime.trimodal()):
        assert abs(np.dot(regime.mixture_weights, regime.mixture_means)) < 1e-12


def test_regimes_share_coefficients_and_design():
    a = gen_robust_meta(9.0, NoiseRegime.gaussian(), 10, seed=3)
    b = gen_robust_meta(9.0, NoiseRegime.trimodal(), 10, seed=3)
    for s, t in zip(a.tasks, b.tasks):
        np.testing.assert_array_equal(s.beta_true, t.beta_true)
        np.testing.assert_array_equal(s.inputs, t.inputs)
        assert not np.array_equal(s.outputs, t.outputs)


def test_robust_prior_sd_must_be_positive():
    with pytest.raises(SpecError):
        gen_robust_meta(0.0, NoiseRegime.gaussian(), 5, seed=0)


def test_bad_regime_weights_rejected():
    with pytest.raises(ValueError):
        NoiseRegime.bimodal(weights=(0.5, 0.6))


def test_paper_sparse_grid_has_6000_tasks():
    spec = SparseTaskSpec(n_obs_min=1, n_obs_max=1)
    meta = gen_sparse_meta(spec, 300, range(5, 101, 5), seed=0)
    assert len(meta.tasks) == 6000 and (meta.n_train, meta.n_test) == (5400, 600)


@pytest.mark.parametrize("k,nonzero", [(100, 0), (50, 10), (20, 16), (80, 4), (5, 19), (0, 20)])
def test_sparse_support_size(k, nonzero):
    spec = SparseTaskSpec(sparsity_percent=k, n_obs_min=2, n_obs_max=3)
    meta = gen_sparse_meta(spec, 20, [k], seed=k)
    for t in meta.tasks:
        assert np.count_nonzero(t.beta_true) == nonzero and t.sparsity == k


def test_sparse_level_out_of_range_rejected():
    with pytest.raises(SpecError):
        gen_sparse_meta(SparseTaskSpec(), 1, [101], seed=0)


def test_ring_means_on_circle():
    means = RingPriorSpec().means
    np.testing.assert_allclose(means[0], [5, 0], atol=1e-15)
    np.testing.assert_allclose(means[1], [5 / np.sqrt(2), 5 / np.sqrt(2)], atol=1e-14)
    np.testing.assert_allclose(means[2], [0, 5], atol=1e-14)
    np.testing.assert_allclose(np.linalg.norm(means, axis=1), 5.0, rtol=1e-15)


def test_empty_ring_task_still_has_coefficients():
    t = gen_ring_task(RingPriorSpec(), 0, seed=1)
    assert t.inputs.shape == (0, 2) and t.outputs.shape == (0,) and t.beta_true.shape == (2,)


def test_ring_coefficients_fill_buckets_evenly():
    spec = RingPriorSpec()
    beta = spec.sample_beta(np.random.default_rng(3), 100_000)
    shares = np.bincount(cdist(beta, spec.means).argmin(axis=1), minlength=8) / beta.shape[0]
    assert np.all(np.abs(shares - 0.125) < 0.01)


def test_ring_batch_masks_padding():
    b = sample_ring_batch(RingPriorSpec(), 50, np.random.default_rng(4), 0, 6)
    assert b.tokens().shape == (50, 6, 3)
    assert np.all(b.tokens()[~b.mask] == 0)
    assert (~b.mask.any(axis=1)).any()


def test_meta_round_trip_is_exact(tmp_path):
    meta = gen_robust_meta(9.0, NoiseRegime.bimodal(), 12, seed=5)
    save_meta(meta, tmp_path / "m")
    back = load_meta(tmp_path / "m")
    assert_same_tasks(meta, back)
    assert (back.n_train, back.n_test, back.spec_tag) == (meta.n_train, meta.n_test, meta.spec_tag)


def test_sparse_meta_round_trip_keeps_levels(tmp_path):
    meta = gen_sparse_meta(SparseTaskSpec(n_obs_min=2, n_obs_max=4), 3, [20, 80], seed=1)
    assert_same_tasks(meta, load_meta(save_meta(meta, tmp_path / "s")))


@given(st.integers(0, 2**63), st.integers(0, 100))
def test_any_task_regenerates_from_its_seed(seed, index):
    spec = RingPriorSpec()
    a = gen_ring_task(spec, 5, seed, index)
    b = gen_ring_task(spec, 5, seed, index)
    np.testing.assert_array_equal(a.outputs, b.outputs)
    assert a.task_seed == b.task_seed


@given(st.permutations(range(6)))
def test_permuted_task_keeps_rows_paired(perm):
    t = gen_ring_task(RingPriorSpec(), 6, 0)
    u = t.permuted(perm)
    np.testing.assert_array_equal(u.inputs, t.inputs[list(perm)])
    np.testing.assert_array_equal(u.outputs, t.outputs[list(perm)])
