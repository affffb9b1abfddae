import dataclasses
import math

import numpy as np
import pytest

from amortlab.nn_core import NumericError, grad_check
from amortlab.flow_posterior import (
    FlowBatch,
    FlowModel,
    OdeConfig,
    Scheme,
    cfm_loss,
    flow_trajectory,
    integrate_flow,
    load_flow,
    odeint,
    sample_posterior,
    save_flow,
    token_features,
    train_flow,
)
from amortlab.set_estimators import TrainConfig, TrainingError
from amortlab.task_gen import RingPriorSpec, Task, gen_ring_task, sample_ring_batch

RING = RingPriorSpec()


def small_flow(seed=0, **kw):
    kw = {"d_ctx": 4, "enc_hidden": 8, "latent": 6, "vel_hidden": 10, "vel_layers": 2, **kw}
    return FlowModel.build(np.random.default_rng(seed), **kw)


def zero_velocity(model):
    last = model.velocity_net.layers[-1]
    last.weights[...] = 0.0
    last.bias[...] = 0.0


def test_flow_batch_interpolant_on_segment(rng):
    z1 = rng.standard_normal((50, 2))
    b = FlowBatch.draw(z1, rng)
    assert np.all((0 <= b.t) & (b.t <= 1))
    np.testing.assert_allclose(b.zt - b.z0, b.t[:, None] * (b.z1 - b.z0), atol=1e-12)


def test_flow_batch_rejects_bad_time():
    with pytest.raises(ValueError):
        FlowBatch(np.zeros((1, 2)), np.zeros((1, 2)), [1.5])


def test_ode_config_validation():
    with pytest.raises(ValueError):
        OdeConfig(n_steps=0)
    assert OdeConfig(scheme="euler").scheme is Scheme.EULER


@pytest.mark.parametrize("scheme", list(Scheme))
def test_zero_and_constant_fields(scheme):
    z0 = np.array([[0.3, -1.2]])
    np.testing.assert_array_equal(odeint(lambda t, z: np.zeros_like(z), z0, 7, scheme), z0)
    c = np.array([1.5, -0.25])
    np.testing.assert_allclose(odeint(lambda t, z: np.broadcast_to(c, z.shape), z0, 7, scheme), z0 + c, atol=1e-14)


def test_rk4_linear_field_accuracy_and_order():
    z0 = np.array([0.7, -2.0])
    f = lambda t, z: z
    got = odeint(f, z0, 50)
    np.testing.assert_allclose(got, math.e * z0, rtol=1e-6)
    e1 = np.abs(odeint(f, z0, 10) - math.e * z0).max()
    e2 = np.abs(odeint(f, z0, 20) - math.e * z0).max()
    assert 12 <= e1 / e2 <= 20


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_odeint_reports_failing_step():
    with pytest.raises(NumericError) as err:
        odeint(lambda t, z: np.exp(np.exp(z * 50)), np.ones(2), 10, Scheme.EULER)
    assert err.value.index == 0


def test_token_features_keep_padding_zero(rng):
    tok = rng.standard_normal((2, 3, 3))
    tok[1, 2] = 0
    f = token_features(tok)
    assert f.shape == (2, 3, 9)
    np.testing.assert_array_equal(f[1, 2], 0)
    np.testing.assert_array_equal(token_features(tok, "raw"), tok)
    np.testing.assert_allclose(f[0, 0, 4], tok[0, 0, 0] * tok[0, 0, 1])


def test_model_shape_validation(rng):
    m = small_flow()
    assert m.velocity_net.n_in == 3 + m.d_ctx
    with pytest.raises(ValueError):
        FlowModel(m.context_encoder, m.velocity_net, features="raw")
    with pytest.raises(ValueError):
        FlowModel(m.context_encoder, small_flow(d_ctx=5).velocity_net, features="quadratic")


def test_empty_task_context_is_the_empty_pool_value():
    m = small_flow()
    empty = gen_ring_task(RING, 0, 1)
    r = m.context(empty)
    dec, _ = m.context_encoder.decoder.forward(np.zeros((1, m.context_encoder.decoder.n_in)))
    np.testing.assert_allclose(r, dec[0], atol=1e-15)


def test_zero_field_loss_is_mean_squared_displacement():
    m = small_flow()
    zero_velocity(m)
    tasks = [gen_ring_task(RING, 3, 0), gen_ring_task(RING, 5, 1)]
    b = FlowBatch(np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([[3.0, 4.0], [1.0, 2.0]]), [0.2, 0.9])
    loss, _ = cfm_loss(m, b, tasks)
    assert loss == pytest.approx(13.0, abs=1e-14)


def test_perfect_field_has_zero_loss():
    # with z1 == z0 the target is zero, which a zeroed output layer reproduces
    m = small_flow()
    zero_velocity(m)
    z = np.random.default_rng(1).standard_normal((4, 2))
    loss, _ = cfm_loss(m, FlowBatch(z, z.copy(), [0.1, 0.4, 0.6, 1.0]), [gen_ring_task(RING, 2, s) for s in range(4)])
    assert loss == 0.0


def test_positive_loss_for_generic_model(rng):
    m = small_flow()
    batch = sample_ring_batch(RING, 8, rng, 0, 4)
    loss, _ = cfm_loss(m, FlowBatch.draw(batch.beta, rng), batch)
    assert loss > 0


def test_cfm_gradients_match_finite_differences(rng):
    m = small_flow(3)
    m.context_encoder.in_scale = np.linspace(0.5, 2.0, 9)
    batch = sample_ring_batch(RING, 5, rng, 0, 4)
    fb = FlowBatch.draw(batch.beta, rng)
    err = grad_check(m, lambda mm: cfm_loss(mm, fb, batch))
    assert err < 1e-5


def test_list_and_ring_batch_give_same_loss(rng):
    m = small_flow()
    batch = sample_ring_batch(RING, 6, rng, 0, 5)
    tasks = [Task(batch.inputs[i, batch.mask[i]], batch.outputs[i, batch.mask[i]], batch.beta[i],
                  int(batch.mask[i].sum()), "ring", 0) for i in range(6)]
    fb = FlowBatch.draw(batch.beta, rng)
    assert cfm_loss(m, fb, batch)[0] == pytest.approx(cfm_loss(m, fb, tasks)[0], rel=1e-12)


def test_field_matches_full_forward(rng):
    m = small_flow()
    task = gen_ring_task(RING, 4, 2)
    r = m.context(task)
    z = rng.standard_normal((6, 2))
    full, _ = m.velocity_net.forward(np.concatenate([np.full((6, 1), 0.3), z, np.tile(r, (6, 1))], axis=1))
    np.testing.assert_allclose(m.field(r)(0.3, z), full, atol=1e-13)


def test_zero_field_flow_is_identity():
    m = small_flow()
    zero_velocity(m)
    z0 = np.array([0.5, -0.5])
    np.testing.assert_array_equal(integrate_flow(m, gen_ring_task(RING, 4, 0), z0), z0)
    with pytest.raises(ValueError):
        integrate_flow(m, gen_ring_task(RING, 4, 0), [np.nan, 0.0])


def test_sampling_is_deterministic_and_empty_ok():
    m = small_flow()
    task = gen_ring_task(RING, 4, 3)
    assert sample_posterior(m, task, 0).shape == (0, 2)
    a = sample_posterior(m, task, 50, seed=9)
    np.testing.assert_array_equal(a, sample_posterior(m, task, 50, seed=9))
    assert not np.array_equal(a, sample_posterior(m, task, 50, seed=10))


def test_samples_agree_with_single_integrations():
    m = small_flow()
    task = gen_ring_task(RING, 4, 3)
    s = sample_posterior(m, task, 3, seed=2)
    z0 = np.random.default_rng(2).standard_normal((3, 2))
    for i in range(3):
        np.testing.assert_allclose(integrate_flow(m, task, z0[i]), s[i], atol=1e-12)


def test_row_permutation_leaves_samples_unchanged():
    m = small_flow()
    task = gen_ring_task(RING, 6, 4)
    perm = np.random.default_rng(0).permutation(6)
    shuffled = dataclasses.replace(task, inputs=task.inputs[perm], outputs=task.outputs[perm])
    np.testing.assert_allclose(m.context(shuffled), m.context(task), atol=1e-9)
    np.testing.assert_allclose(sample_posterior(m, shuffled, 20, seed=1), sample_posterior(m, task, 20, seed=1), atol=1e-9)


def test_trajectory_ends_match_sampling():
    m = small_flow()
    task = gen_ring_task(RING, 4, 5)
    traj = flow_trajectory(m, task, 30, [0.0, 0.5, 1.0], seed=3)
    assert sorted(traj) == [0.0, 0.5, 1.0]
    np.testing.assert_array_equal(traj[0.0], np.random.default_rng(3).standard_normal((30, 2)))
    np.testing.assert_allclose(traj[1.0], sample_posterior(m, task, 30, seed=3), atol=1e-12)


def test_zero_epochs_leave_model_unchanged():
    m = small_flow()
    before = m.snapshot()
    res = train_flow(m, RING, 16, TrainConfig(epochs=0))
    assert res.trace == []
    for a, b in zip(before, m.params()):
        np.testing.assert_array_equal(a, b)


def test_training_reduces_loss_and_is_deterministic():
    cfg = TrainConfig(epochs=6, batch_tasks=64, checkpoints=(1, 6), learning_rate=3e-3, seed=2)
    a, b = small_flow(), small_flow()
    ra = train_flow(a, RING, 256, cfg)
    rb = train_flow(b, RING, 256, cfg)
    assert [r.epoch for r in ra.trace] == [1, 6]
    assert ra.trace[-1].train_loss < ra.trace[0].train_loss
    for x, y in zip(a.params(), b.params()):
        np.testing.assert_array_equal(x, y)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_validates_and_reports_divergence():
    with pytest.raises(ValueError):
        train_flow(small_flow(), RING, 0, TrainConfig(epochs=1))
    with pytest.raises(TrainingError):
        train_flow(small_flow(), RING, 32, TrainConfig(epochs=3, batch_tasks=32, learning_rate=1e200))


def test_checkpoint_round_trip(tmp_path):
    m = small_flow()
    train_flow(m, RING, 64, TrainConfig(epochs=1, batch_tasks=64))
    back = load_flow(save_flow(tmp_path / "f.ckpt", m))
    task = gen_ring_task(RING, 4, 1)
    np.testing.assert_array_equal(sample_posterior(back, task, 20, seed=1), sample_posterior(m, task, 20, seed=1))
    assert back.features == m.features


def test_several_pairs_per_task_match_duplicated_tasks(rng):
    m = small_flow(4)
    m.context_encoder.in_scale = np.linspace(0.5, 2.0, 9)
    tasks = [gen_ring_task(RING, n, s) for n, s in [(3, 1), (0, 2), (5, 3)]]
    z1 = np.repeat(np.stack([t.beta_true for t in tasks]), 2, axis=0)
    fb = FlowBatch.draw(z1, rng)
    shared = cfm_loss(m, fb, tasks)
    dup = cfm_loss(m, fb, [t for t in tasks for _ in range(2)])
    assert shared[0] == pytest.approx(dup[0], rel=1e-12)
    for a, b in zip(shared[1], dup[1]):
        np.testing.assert_allclose(a, b, atol=1e-12)
    with pytest.raises(ValueError):
        cfm_loss(m, FlowBatch.draw(z1[:5], rng), tasks)
