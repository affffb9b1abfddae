"""Conditional flow matching for 2-D posterior sampling.

A Deep Sets encoder summarises a task into a context vector ``r``; a
time-conditioned MLP ``v(t, z, r)`` is regressed onto the straight-line
velocity ``z1 - z0`` between a base draw ``z0 ~ N(0, I)`` and a coefficient
vector ``z1`` drawn jointly with the task.  Integrating ``dz/dt = v`` from
``t = 0`` to ``1`` turns base draws into approximate posterior draws.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .nn_core import Activation, MlpModel, NumericError, OptimizerState, cosine_lr, init_mlp, optimizer_step
from .seeding import STREAM_FLOW, derive_seed
from .set_estimators import DeepSetsModel, Pool, TrainConfig, TrainingError, TraceRow
from .task_gen import RingBatch, RingPriorSpec, Task, sample_ring_batch

log = logging.getLogger(__name__)


class Scheme(str, Enum):
    EULER = "euler"
    RK4 = "rk4"


@dataclass(frozen=True)
class OdeConfig:
    n_steps: int = 50
    scheme: Scheme = Scheme.RK4

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")


def odeint(f: Callable, z0: np.ndarray, n_steps: int, scheme: Scheme = Scheme.RK4,
           t0: float = 0.0, t1: float = 1.0) -> np.ndarray:
    """Fixed-step integration of ``dz/dt = f(t, z)`` from ``t0`` to ``t1``."""
    scheme = Scheme(scheme)
    z = np.array(z0, dtype=np.float64)
    h = (t1 - t0) / n_steps
    for i in range(n_steps):
        t = t0 + i * h
        if scheme is Scheme.EULER:
            z = z + h * f(t, z)
        else:
            k1 = f(t, z)
            k2 = f(t + 0.5 * h, z + 0.5 * h * k1)
            k3 = f(t + 0.5 * h, z + 0.5 * h * k2)
            k4 = f(t + h, z + h * k3)
            z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite state at integration step {i}", index=i)
    return z


@dataclass
class FlowBatch:
    z0: np.ndarray
    z1: np.ndarray
    t: np.ndarray
    zt: np.ndarray = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if np.any(self.t < 0) or np.any(self.t > 1):
            raise ValueError("t must lie in [0, 1]")
        if self.zt is None:
            self.zt = (1.0 - self.t)[:, None] * self.z0 + self.t[:, None] * self.z1

    @classmethod
    def draw(cls, z1: np.ndarray, rng: np.random.Generator) -> "FlowBatch":
        z1 = np.asarray(z1, dtype=np.float64)
        return cls(rng.standard_normal(z1.shape), z1, rng.random(z1.shape[0]))


TOKEN_FEATURES = {"raw": 3, "quadratic": 9}


def token_features(tokens: np.ndarray, kind: str = "quadratic") -> np.ndarray:
    """Per-token encoder inputs: ``(x1, x2, y)``, optionally followed by their
    pairwise products ``x1^2, x1 x2, x2^2, x1 y, x2 y, y^2``.

    Padded (all-zero) tokens stay zero.
    """
    if kind == "raw":
        return tokens
    x1, x2, y = tokens[..., 0], tokens[..., 1], tokens[..., 2]
    return np.stack([x1, x2, y, x1 * x1, x1 * x2, x2 * x2, x1 * y, x2 * y, y * y], axis=-1)


class FlowModel:
    """Context encoder plus velocity field ``v(t, z, r)``."""

    def __init__(self, context_encoder: DeepSetsModel, velocity_net: MlpModel, features: str = "raw"):
        if features not in TOKEN_FEATURES:
            raise ValueError(f"unknown token features {features!r}")
        if context_encoder.p + 1 != TOKEN_FEATURES[features]:
            raise ValueError("encoder input width does not match the token features")
        self.features = features
        d_ctx = context_encoder.n_out
        if velocity_net.n_in != 3 + d_ctx or velocity_net.n_out != 2:
            raise ValueError("velocity net must map (t, z, r) of width 3 + d_ctx to R^2")
        self.context_encoder = context_encoder
        self.velocity_net = velocity_net

    @property
    def d_ctx(self) -> int:
        return self.context_encoder.n_out

    @classmethod
    def build(
        cls,
        rng: np.random.Generator,
        d_ctx: int = 32,
        enc_hidden: int = 64,
        enc_layers: int = 0,
        latent: int = 64,
        dec_layers: int = 2,
        vel_hidden: int = 128,
        vel_layers: int = 4,
        pool: Pool = Pool.SUM,
        features: str = "quadratic",
    ) -> "FlowModel":
        """Encoder and field with Tanh hidden layers.

        With the default ``enc_layers=0`` the per-token map is affine, so
        the sum-pooled quadratic features are exactly the sufficient
        statistics ``X'X``, ``X'y``, ``y'y`` and ``n`` of a linear-Gaussian
        likelihood, up to an affine map; the decoder does the nonlinear work.
        """
        enc = DeepSetsModel.build(
            TOKEN_FEATURES[features] - 1, rng, hidden=enc_hidden, encoder_layers=enc_layers, latent=latent,
            decoder_layers=dec_layers, pool=pool, activation=Activation.TANH, n_out=d_ctx,
        )
        vel = init_mlp([3 + d_ctx] + [vel_hidden] * vel_layers + [2], Activation.TANH, rng)
        return cls(enc, vel, features)

    def params(self) -> list[np.ndarray]:
        return self.context_encoder.params() + self.velocity_net.params()

    def snapshot(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params()]

    def load_params(self, values) -> None:
        for p, v in zip(self.params(), values, strict=True):
            p[...] = v

    def context_batch(self, tokens: np.ndarray, mask: np.ndarray):
        """Context vectors for padded tasks; empty tasks pool to zero."""
        feats = token_features(tokens, self.features)
        return self.context_encoder._forward_scaled(feats / self.context_encoder.in_scale, mask)

    def context(self, task: Task) -> np.ndarray:
        tokens = task.tokens().reshape(1, task.n_obs, 3)
        if task.n_obs == 0:
            tokens = np.zeros((1, 1, 3))
        mask = np.full((1, tokens.shape[1]), task.n_obs > 0)
        return self.context_batch(tokens, mask)[0][0]

    def field(self, r: np.ndarray) -> Callable[[float, np.ndarray], np.ndarray]:
        """Velocity ``v(t, Z)`` for a fixed context, vectorised over rows of ``Z``.

        The context's contribution to the first layer is computed once.
        """
        first, *rest = self.velocity_net.layers
        w_t = first.weights[:, 0]
        w_z = first.weights[:, 1:3]
        const = first.weights[:, 3:] @ r + first.bias

        def v(t: float, z: np.ndarray) -> np.ndarray:
            h = z @ w_z.T + (t * w_t + const)
            for i, layer in enumerate([first] + rest):
                if i:
                    h = h @ layer.weights.T + layer.bias
                if layer.activation is Activation.TANH:
                    np.tanh(h, out=h)
                elif layer.activation is Activation.RELU:
                    np.maximum(h, 0.0, out=h)
            return h

        return v


def _batch_tokens(tasks) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(tasks, RingBatch):
        return tasks.tokens(), tasks.mask
    width = max(max(t.n_obs for t in tasks), 1)
    tokens = np.zeros((len(tasks), width, 3))
    mask = np.zeros((len(tasks), width), dtype=bool)
    for i, t in enumerate(tasks):
        tokens[i, : t.n_obs] = t.tokens()
        mask[i, : t.n_obs] = True
    return tokens, mask


def cfm_loss(model: FlowModel, batch: FlowBatch, tasks):
    """Mean squared gap between ``v(t, z_t, r)`` and ``z1 - z0``, with gradients.

    ``tasks`` is a list of :class:`Task` or a :class:`RingBatch`.  The batch
    may hold several items per task, stored task-major: with ``m`` items per
    task, item ``i`` belongs to task ``i // m``.  Each task is encoded once.
    """
    tokens, mask = _batch_tokens(tasks)
    n_tasks, n = tokens.shape[0], batch.t.shape[0]
    if n % n_tasks:
        raise ValueError(f"{n} batch items do not split evenly over {n_tasks} tasks")
    per_task = n // n_tasks
    r, enc_cache = model.context_batch(tokens, mask)
    inp = np.concatenate([batch.t[:, None], batch.zt, np.repeat(r, per_task, axis=0)], axis=1)
    v, vel_cache = model.velocity_net.forward(inp)
    diff = v - (batch.z1 - batch.z0)
    loss = float(np.sum(diff * diff) / n)
    if not math.isfinite(loss):
        raise NumericError("non-finite flow-matching loss")
    g_inp, vel_grads = model.velocity_net.backward(vel_cache, 2.0 * diff / n)
    g_r = g_inp[:, 3:].reshape(n_tasks, per_task, -1).sum(axis=1)
    enc_grads = model.context_encoder._backward_scaled(enc_cache, g_r)
    return loss, enc_grads + vel_grads


def integrate_flow(model: FlowModel, task: Task, z0, ode: OdeConfig = OdeConfig()) -> np.ndarray:
    z0 = np.asarray(z0, dtype=np.float64)
    if not np.all(np.isfinite(z0)):
        raise ValueError("z0 must be finite")
    v = model.field(model.context(task))
    return odeint(v, z0.reshape(-1, 2), ode.n_steps, ode.scheme).reshape(z0.shape)


def sample_posterior(model: FlowModel, task: Task, n_samples: int, ode: OdeConfig = OdeConfig(),
                     seed: int = 0) -> np.ndarray:
    """``n_samples`` independent flow draws for ``task`` (deterministic given ``seed``)."""
    if n_samples == 0:
        return np.empty((0, 2))
    z0 = np.random.default_rng(seed).standard_normal((n_samples, 2))
    v = model.field(model.context(task))
    return odeint(v, z0, ode.n_steps, ode.scheme)


def flow_trajectory(model: FlowModel, task: Task, n_particles: int, times: Sequence[float],
                    ode: OdeConfig = OdeConfig(), seed: int = 0) -> dict[float, np.ndarray]:
    """Particle positions at each of ``times`` (increasing, starting at 0)."""
    z = np.random.default_rng(seed).standard_normal((n_particles, 2))
    v = model.field(model.context(task))
    out = {float(times[0]): z.copy()}
    for a, b in zip(times[:-1], times[1:]):
        steps = max(1, math.ceil(ode.n_steps * (b - a)))
        z = odeint(v, z, steps, ode.scheme, a, b)
        out[float(b)] = z.copy()
    return out


@dataclass
class FlowTrainResult:
    model: FlowModel
    trace: list[TraceRow] = field(default_factory=list)


def train_flow(
    model: FlowModel,
    spec: RingPriorSpec,
    n_tasks: int,
    cfg: TrainConfig,
    n_obs_range: tuple[int, int] = (0, 20),
    final_lr_fraction: float = 1.0,
    pairs_per_task: int = 1,
) -> FlowTrainResult:
    """Flow matching on fresh draws from the ring generative process.

    Every epoch draws ``n_tasks`` new (beta, task) pairs, with ``n_obs``
    uniform on ``n_obs_range``, plus ``pairs_per_task`` fresh ``(z0, t)``
    draws per pair (the encoder is then run once for all of them).  The
    learning rate follows a cosine decay from ``cfg.learning_rate`` to
    ``final_lr_fraction`` times it over the whole run.
    """
    if n_tasks < 1 or pairs_per_task < 1:
        raise ValueError("n_tasks and pairs_per_task must be at least 1")
    result = FlowTrainResult(model)
    if cfg.epochs == 0:
        return result
    enc = model.context_encoder
    if not enc.scales_fitted:
        probe = sample_ring_batch(spec, 2000, np.random.default_rng(derive_seed(cfg.seed, STREAM_FLOW, 0, 0)),
                                  max(n_obs_range[0], 1), max(n_obs_range[1], 1))
        sd = token_features(probe.tokens(), model.features)[probe.mask].std(axis=0)
        enc.in_scale = np.where(sd > 0, sd, 1.0)
        enc.scales_fitted = True
    params = model.params()
    state = OptimizerState.for_params(params, learning_rate=cfg.learning_rate)
    n_batches = math.ceil(n_tasks / cfg.batch_tasks)
    total_steps = cfg.epochs * n_batches
    checkpoints = set(cfg.checkpoints)
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for j in range(n_batches):
            size = min(cfg.batch_tasks, n_tasks - j * cfg.batch_tasks)
            rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_FLOW, epoch, j + 1))
            tasks = sample_ring_batch(spec, size, rng, *n_obs_range)
            batch = FlowBatch.draw(np.repeat(tasks.beta, pairs_per_task, axis=0), rng)
            state.learning_rate = cosine_lr(cfg.learning_rate, final_lr_fraction, state.step_count, total_steps)
            try:
                loss, grads = cfm_loss(model, batch, tasks)
            except NumericError as exc:
                raise TrainingError(str(exc), epoch) from exc
            total += loss * size
            optimizer_step(state, params, grads)
        if epoch in checkpoints:
            result.trace.append(TraceRow(epoch, total / n_tasks, float("nan")))
            log.info("flow epoch %d cfm loss %.4f", epoch, total / n_tasks)
    return result


def save_flow(path, model: FlowModel):
    from .nn_core import mlp_config, save_checkpoint

    config = {
        "encoder": model.context_encoder.config(),
        "in_scale": model.context_encoder.in_scale.tolist(),
        "velocity": mlp_config(model.velocity_net),
        "features": model.features,
    }
    return save_checkpoint(path, "flow", config, model.params())


def load_flow(path) -> FlowModel:
    from .nn_core import load_checkpoint, mlp_from_config

    header, params = load_checkpoint(path)
    if header["kind"] != "flow":
        raise ValueError(f"expected a flow checkpoint, found {header['kind']!r}")
    n_enc = sum(2 * (len(header["encoder"][k]["widths"]) - 1) for k in ("encoder", "decoder"))
    enc = DeepSetsModel.from_params(header["encoder"], params[:n_enc])
    enc.in_scale = np.array(header["in_scale"])
    enc.scales_fitted = True
    return FlowModel(enc, mlp_from_config(header["velocity"], params[n_enc:]), header["features"])
