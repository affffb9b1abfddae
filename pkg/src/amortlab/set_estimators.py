"""Permutation-invariant set-to-vector estimators and their training loop.

Tasks of unequal size are batched by zero-padding to the longest task in the
batch and carrying a boolean ``mask``; padded rows never reach a pooled
summary or an attention key, so a batched forward equals the per-task one.
Tokens are the rows ``[x_n; y_n]`` of a task, divided by a fixed per-column
``in_scale``; estimates are multiplied by a fixed ``out_scale``.  Both scales
are set from the training tasks by :func:`fit_scales` and are not trained.
With ``features="quadratic"`` each scaled token ``u`` is extended by the
upper triangle of ``u u^T``, so a pooled summary can carry ``X'X``, ``X'y``
and ``y'y``, the sufficient statistics of a linear-Gaussian task.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn_core import (
    Activation,
    DimensionError,
    MlpModel,
    NumericError,
    OptimizerState,
    cosine_lr,
    init_mlp,
    load_checkpoint,
    mlp_config,
    mlp_from_config,
    optimizer_step,
    save_checkpoint,
)
from .task_gen import MetaDataset, Task

log = logging.getLogger(__name__)

GATE_CLAMP = 1e-6
LN_EPS = 1e-5


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class Pool(str, Enum):
    SUM = "sum"
    MEAN = "mean"


def pad_tasks(tasks: Sequence[Task]):
    """Stack task tokens into ``(B, N_max, p + 1)`` with a ``(B, N_max)`` mask."""
    if not tasks:
        raise ValueError("no tasks to pad")
    p = tasks[0].p
    width = max(max(t.n_obs for t in tasks), 1)
    tokens = np.zeros((len(tasks), width, p + 1))
    mask = np.zeros((len(tasks), width), dtype=bool)
    for i, t in enumerate(tasks):
        tokens[i, : t.n_obs, :p] = t.inputs
        tokens[i, : t.n_obs, p] = t.outputs
        mask[i, : t.n_obs] = True
    return tokens, mask


def masked_pool(h: np.ndarray, mask: np.ndarray, pool: Pool) -> np.ndarray:
    """Sum or mean over valid rows; an empty set pools to the zero vector."""
    summed = np.einsum("bnd,bn->bd", h, mask.astype(h.dtype))
    if pool is Pool.SUM:
        return summed
    count = mask.sum(axis=1, keepdims=True)
    return summed / np.maximum(count, 1)


def masked_pool_backward(grad: np.ndarray, mask: np.ndarray, pool: Pool) -> np.ndarray:
    m = mask.astype(grad.dtype)
    if pool is Pool.MEAN:
        m = m / np.maximum(mask.sum(axis=1, keepdims=True), 1)
    return grad[:, None, :] * m[..., None]


# -- layer norm and attention -------------------------------------------------


def layer_norm(x, gain, shift):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return gain * xhat + shift, (xhat, inv)


def layer_norm_backward(grad, cache, gain):
    xhat, inv = cache
    g_gain = (grad * xhat).reshape(-1, grad.shape[-1]).sum(axis=0)
    g_shift = grad.reshape(-1, grad.shape[-1]).sum(axis=0)
    gx = grad * gain
    gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    return gx, g_gain, g_shift


@dataclass
class AttentionBlock:
    """Multi-head self-attention, residual + norm, feed-forward, residual + norm.

    ``query_proj``, ``key_proj`` and ``value_proj`` have shape
    ``(n_heads, d_model, d_k)``; ``output_proj`` maps the concatenated heads
    back to ``d_model``.
    """

    query_proj: np.ndarray
    key_proj: np.ndarray
    value_proj: np.ndarray
    output_proj: np.ndarray
    output_bias: np.ndarray
    feedforward: MlpModel
    norm1_gain: np.ndarray
    norm1_shift: np.ndarray
    norm2_gain: np.ndarray
    norm2_shift: np.ndarray

    @property
    def n_heads(self) -> int:
        return self.query_proj.shape[0]

    @property
    def d_model(self) -> int:
        return self.query_proj.shape[1]

    @property
    def d_k(self) -> int:
        return self.query_proj.shape[2]

    @classmethod
    def build(cls, d_model: int, n_heads: int, ff_width: int, rng: np.random.Generator) -> "AttentionBlock":
        if d_model % n_heads:
            raise DimensionError("d_model must be divisible by n_heads")
        d_k = d_model // n_heads
        bound = 1.0 / math.sqrt(d_model)
        proj = lambda: rng.uniform(-bound, bound, size=(n_heads, d_model, d_k))  # noqa: E731
        return cls(
            query_proj=proj(),
            key_proj=proj(),
            value_proj=proj(),
            output_proj=rng.uniform(-bound, bound, size=(d_model, d_model)),
            output_bias=np.zeros(d_model),
            feedforward=init_mlp([d_model, ff_width, d_model], Activation.RELU, rng),
            norm1_gain=np.ones(d_model),
            norm1_shift=np.zeros(d_model),
            norm2_gain=np.ones(d_model),
            norm2_shift=np.zeros(d_model),
        )

    def params(self) -> list[np.ndarray]:
        return [
            self.query_proj, self.key_proj, self.value_proj, self.output_proj, self.output_bias,
            self.norm1_gain, self.norm1_shift, *self.feedforward.params(),
            self.norm2_gain, self.norm2_shift,
        ]

    def _full(self, w):
        return w.transpose(1, 0, 2).reshape(self.d_model, -1)

    def _split(self, a):
        b, n, _ = a.shape
        return a.reshape(b, n, self.n_heads, self.d_k).transpose(0, 2, 1, 3)

    def _merge(self, a):
        b, _, n, _ = a.shape
        return a.transpose(0, 2, 1, 3).reshape(b, n, self.n_heads * self.d_k)

    def attention_matrix(self, x: np.ndarray, mask: np.ndarray):
        """Row-softmax attention ``(B, h, N, N)`` with padded keys excluded.

        Also returns the queries (pre-scaled by ``1/sqrt(d_k)``) and keys.
        """
        q = self._split(x @ self._full(self.query_proj)) * (1.0 / math.sqrt(self.d_k))
        k = self._split(x @ self._full(self.key_proj))
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(k))):
            raise NumericError("non-finite attention scores")
        s = q @ k.transpose(0, 1, 3, 2)
        if not mask.all():
            s += np.where(mask, 0.0, -np.inf)[:, None, None, :]
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        return s, q, k

    def forward(self, x: np.ndarray, mask: np.ndarray):
        a, q, k = self.attention_matrix(x, mask)
        v = self._split(x @ self._full(self.value_proj))
        heads = self._merge(a @ v)
        mixed = heads @ self.output_proj.T + self.output_bias
        h1, ln1 = layer_norm(x + mixed, self.norm1_gain, self.norm1_shift)
        f, ff_cache = self.feedforward.forward(h1)
        h2, ln2 = layer_norm(h1 + f, self.norm2_gain, self.norm2_shift)
        return h2, (x, a, q, k, v, heads, ln1, ff_cache, ln2)

    def backward(self, cache, grad: np.ndarray):
        x, a, q, k, v, heads, ln1, ff_cache, ln2 = cache
        d = self.d_model
        g_r2, g_n2g, g_n2s = layer_norm_backward(grad, ln2, self.norm2_gain)
        g_h1_ff, ff_grads = self.feedforward.backward(ff_cache, g_r2)
        g_r1, g_n1g, g_n1s = layer_norm_backward(g_r2 + g_h1_ff, ln1, self.norm1_gain)

        g_out_proj = g_r1.reshape(-1, d).T @ heads.reshape(-1, heads.shape[-1])
        g_out_bias = g_r1.reshape(-1, d).sum(axis=0)
        g_heads = self._split(g_r1 @ self.output_proj)

        g_v = a.transpose(0, 1, 3, 2) @ g_heads
        # softmax backward, in place on the attention-sized buffer
        g_s = g_heads @ v.transpose(0, 1, 3, 2)
        g_s -= np.einsum("bhij,bhij->bhi", g_s, a)[..., None]
        g_s *= a
        g_q = (g_s @ k) * (1.0 / math.sqrt(self.d_k))
        g_k = g_s.transpose(0, 1, 3, 2) @ q

        x2 = x.reshape(-1, d)
        g_x = g_r1.copy()
        proj_grads = []
        for g_part, w in ((g_q, self.query_proj), (g_k, self.key_proj), (g_v, self.value_proj)):
            gm = self._merge(g_part)
            g_full = x2.T @ gm.reshape(-1, gm.shape[-1])
            proj_grads.append(g_full.reshape(d, self.n_heads, self.d_k).transpose(1, 0, 2))
            g_x += gm @ self._full(w).T
        grads = [
            *proj_grads, g_out_proj, g_out_bias, g_n1g, g_n1s, *ff_grads, g_n2g, g_n2s,
        ]
        return g_x, grads

    def config(self) -> dict:
        return {"n_heads": self.n_heads, "d_model": self.d_model, "ff": mlp_config(self.feedforward)}

    @classmethod
    def from_params(cls, config: dict, params: list[np.ndarray]) -> "AttentionBlock":
        n_ff = 2 * (len(config["ff"]["widths"]) - 1)
        ff = mlp_from_config(config["ff"], params[7 : 7 + n_ff])
        return cls(
            params[0], params[1], params[2], params[3], params[4], ff,
            params[5], params[6], params[7 + n_ff], params[8 + n_ff],
        )

    def n_params(self) -> int:
        return 9 + 2 * self.feedforward.depth


def attention_forward(block: AttentionBlock, tokens: np.ndarray) -> np.ndarray:
    """Apply one block to an ``(N, d_model)`` token matrix."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise DimensionError("attention needs an (N, d_model) matrix with N >= 1")
    mask = np.ones((1, tokens.shape[0]), dtype=bool)
    return block.forward(tokens[None], mask)[0][0]


def attention_weights(block: AttentionBlock, tokens: np.ndarray) -> np.ndarray:
    """Per-head attention matrices, shape ``(n_heads, N, N)``."""
    tokens = np.asarray(tokens, dtype=np.float64)
    mask = np.ones((1, tokens.shape[0]), dtype=bool)
    return block.attention_matrix(tokens[None], mask)[0][0]


# -- estimators ----------------------------------------------------------------


@dataclass
class SparseHeadOutput:
    magnitude: np.ndarray
    gate_prob: np.ndarray
    beta_soft: np.ndarray
    beta_hard: np.ndarray


def sparse_head_output(magnitude, gate_prob) -> SparseHeadOutput:
    magnitude = np.asarray(magnitude, dtype=np.float64)
    gate_prob = np.asarray(gate_prob, dtype=np.float64)
    return SparseHeadOutput(
        magnitude, gate_prob, magnitude * gate_prob, np.where(gate_prob > 0.5, magnitude, 0.0)
    )


FEATURE_KINDS = ("raw", "quadratic")


def feature_width(p: int, features: str = "raw") -> int:
    """Encoder input width for tasks with ``p`` covariates."""
    if features not in FEATURE_KINDS:
        raise ValueError(f"unknown token features {features!r}")
    d = p + 1
    return d if features == "raw" else d + d * (d + 1) // 2


def quadratic_features(tokens: np.ndarray) -> np.ndarray:
    """Tokens followed by the upper triangle of their outer products; zero rows stay zero."""
    rows, cols = np.triu_indices(tokens.shape[-1])
    return np.concatenate([tokens, tokens[..., rows] * tokens[..., cols]], axis=-1)


class SetEstimator:
    """Shared scaling, batching and checkpoint logic."""

    kind = "base"
    sparse = False

    def __init__(self, p: int, features: str = "raw"):
        feature_width(p, features)
        self.p = p
        self.features = features
        self.in_scale = np.ones(p + 1)
        self.out_scale = 1.0
        self.scales_fitted = False

    def params(self) -> list[np.ndarray]:
        raise NotImplementedError

    def _forward_scaled(self, tokens, mask):
        raise NotImplementedError

    def inputs(self, tokens: np.ndarray) -> np.ndarray:
        """Scaled tokens, mapped to the encoder's input features."""
        u = tokens / self.in_scale
        return quadratic_features(u) if self.features == "quadratic" else u

    def _backward_scaled(self, cache, grad):
        raise NotImplementedError

    def forward_batch(self, tokens: np.ndarray, mask: np.ndarray):
        """Soft estimates ``(B, p)`` for padded tokens, plus a cache for backward."""
        if tokens.shape[-1] != self.p + 1:
            raise DimensionError(f"tokens must have width {self.p + 1}")
        if not np.all(mask.any(axis=1)):
            raise ValueError("every task needs at least one observation")
        return self._forward_scaled(self.inputs(tokens), mask)

    def backward_batch(self, cache, grad: np.ndarray) -> list[np.ndarray]:
        return self._backward_scaled(cache, grad)

    def predict(self, tasks: Sequence[Task], chunk: int = 64) -> np.ndarray:
        out = []
        for start in range(0, len(tasks), chunk):
            tokens, mask = pad_tasks(tasks[start : start + chunk])
            out.append(self.forward_batch(tokens, mask)[0])
        return np.concatenate(out, axis=0)

    def estimate(self, task: Task) -> np.ndarray:
        if task.n_obs < 1:
            raise ValueError("empty task")
        return self.predict([task])[0]

    def copy(self):
        return copy.deepcopy(self)

    def load_params(self, values: Sequence[np.ndarray]) -> None:
        for p, v in zip(self.params(), values, strict=True):
            p[...] = v

    def snapshot(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params()]


class DeepSetsModel(SetEstimator):
    """``decoder(pool(encoder(token)))`` over the rows of a task."""

    kind = "deepsets"

    def __init__(self, encoder: MlpModel, decoder: MlpModel, pool: Pool = Pool.SUM,
                 features: str = "raw", p: int | None = None):
        p = encoder.n_in - 1 if p is None else p
        if encoder.n_in != feature_width(p, features):
            raise DimensionError(f"encoder input width must be {feature_width(p, features)}")
        if decoder.n_in != encoder.n_out:
            raise DimensionError("decoder input width must equal the latent width")
        super().__init__(p, features)
        self.encoder = encoder
        self.decoder = decoder
        self.pool = Pool(pool)

    @classmethod
    def build(
        cls,
        p: int,
        rng: np.random.Generator,
        hidden: int = 128,
        encoder_layers: int = 3,
        latent: int = 128,
        decoder_layers: int = 2,
        pool: Pool = Pool.SUM,
        activation: Activation = Activation.RELU,
        n_out: int | None = None,
        features: str = "raw",
    ) -> "DeepSetsModel":
        n_out = p if n_out is None else n_out
        encoder = init_mlp([feature_width(p, features)] + [hidden] * encoder_layers + [latent], activation, rng)
        decoder = init_mlp([latent] + [hidden] * decoder_layers + [n_out], activation, rng)
        return cls(encoder, decoder, pool, features, p)

    @property
    def n_out(self) -> int:
        return self.decoder.n_out

    def params(self):
        return self.encoder.params() + self.decoder.params()

    def _forward_scaled(self, tokens, mask):
        h, enc_cache = self.encoder.forward(tokens)
        z = masked_pool(h, mask, self.pool)
        out, dec_cache = self.decoder.forward(z)
        return out * self.out_scale, (mask, enc_cache, dec_cache)

    def _backward_scaled(self, cache, grad):
        mask, enc_cache, dec_cache = cache
        g_z, dec_grads = self.decoder.backward(dec_cache, grad * self.out_scale)
        g_h = masked_pool_backward(g_z, mask, self.pool)
        _, enc_grads = self.encoder.backward(enc_cache, g_h)
        return enc_grads + dec_grads

    def encode(self, tokens, mask):
        """Pooled summary and the decoder output without output scaling."""
        h, _ = self.encoder.forward(self.inputs(tokens))
        return self.decoder(masked_pool(h, mask, self.pool))

    def config(self) -> dict:
        return {
            "pool": self.pool.value, "features": self.features, "p": self.p,
            "encoder": mlp_config(self.encoder), "decoder": mlp_config(self.decoder),
        }

    @classmethod
    def from_params(cls, config, params):
        n_enc = 2 * (len(config["encoder"]["widths"]) - 1)
        enc = mlp_from_config(config["encoder"], params[:n_enc])
        dec = mlp_from_config(config["decoder"], params[n_enc:])
        return cls(enc, dec, Pool(config["pool"]), config.get("features", "raw"), config.get("p"))


def deepsets_forward(model: DeepSetsModel, task: Task) -> np.ndarray:
    return model.estimate(task)


class SetTransformerModel(SetEstimator):
    """Token embedding, attention blocks without positions, mean pool, head(s).

    With ``sparse=True`` there are two heads: a magnitude head and a gate
    head whose logistic output is clamped to ``[1e-6, 1 - 1e-6]``; the
    estimate is ``magnitude * gate``.
    """

    kind = "settransformer"

    def __init__(self, token_embed: MlpModel, blocks: list[AttentionBlock], head: MlpModel,
                 gate_head: MlpModel | None = None, features: str = "raw"):
        p = head.n_out
        if token_embed.n_in != feature_width(p, features):
            raise DimensionError(f"token embedding input width must be {feature_width(p, features)}")
        super().__init__(p, features)
        self.token_embed = token_embed
        self.blocks = list(blocks)
        self.head = head
        self.gate_head = gate_head
        self.sparse = gate_head is not None
        self.pool = Pool.MEAN

    @classmethod
    def build(
        cls,
        p: int,
        rng: np.random.Generator,
        d_model: int = 64,
        n_heads: int = 4,
        n_blocks: int = 2,
        ff_width: int = 128,
        hidden: int = 128,
        sparse: bool = False,
        features: str = "raw",
    ) -> "SetTransformerModel":
        embed = init_mlp([feature_width(p, features), hidden, d_model], Activation.RELU, rng)
        blocks = [AttentionBlock.build(d_model, n_heads, ff_width, rng) for _ in range(n_blocks)]
        head = init_mlp([d_model, hidden, p], Activation.RELU, rng)
        gate = init_mlp([d_model, hidden, p], Activation.RELU, rng) if sparse else None
        return cls(embed, blocks, head, gate, features)

    def params(self):
        out = list(self.token_embed.params())
        for b in self.blocks:
            out.extend(b.params())
        out.extend(self.head.params())
        if self.gate_head is not None:
            out.extend(self.gate_head.params())
        return out

    def encode_tokens(self, tokens, mask):
        """Block outputs before pooling, shape ``(B, N, d_model)`` (unscaled input)."""
        h, _ = self.token_embed.forward(self.inputs(tokens))
        for b in self.blocks:
            h, _ = b.forward(h, mask)
        return h

    def _forward_scaled(self, tokens, mask):
        h, embed_cache = self.token_embed.forward(tokens)
        block_caches = []
        for b in self.blocks:
            h, c = b.forward(h, mask)
            block_caches.append(c)
        r = masked_pool(h, mask, Pool.MEAN)
        mag, head_cache = self.head.forward(r)
        mag = mag * self.out_scale
        if self.gate_head is None:
            return mag, (mask, embed_cache, block_caches, head_cache, None)
        logits, gate_cache = self.gate_head.forward(r)
        gate = np.clip(1.0 / (1.0 + np.exp(-logits)), GATE_CLAMP, 1.0 - GATE_CLAMP)
        cache = (mask, embed_cache, block_caches, head_cache, (gate_cache, mag, gate))
        return mag * gate, cache

    def _backward_scaled(self, cache, grad):
        mask, embed_cache, block_caches, head_cache, gate_part = cache
        if gate_part is None:
            g_r, head_grads = self.head.backward(head_cache, grad * self.out_scale)
            gate_grads = []
        else:
            gate_cache, mag, gate = gate_part
            g_r, head_grads = self.head.backward(head_cache, grad * gate * self.out_scale)
            interior = (gate > GATE_CLAMP) & (gate < 1.0 - GATE_CLAMP)
            g_logit = grad * mag * gate * (1.0 - gate) * interior
            g_r_gate, gate_grads = self.gate_head.backward(gate_cache, g_logit)
            g_r = g_r + g_r_gate
        g_h = masked_pool_backward(g_r, mask, Pool.MEAN)
        block_grads = []
        for b, c in zip(reversed(self.blocks), reversed(block_caches)):
            g_h, bg = b.backward(c, g_h)
            block_grads.append(bg)
        _, embed_grads = self.token_embed.backward(embed_cache, g_h)
        out = list(embed_grads)
        for bg in reversed(block_grads):
            out.extend(bg)
        return out + head_grads + gate_grads

    def heads(self, tasks: Sequence[Task]) -> list[SparseHeadOutput]:
        if not self.sparse:
            raise ValueError("model has no sparsity gate")
        tokens, mask = pad_tasks(tasks)
        _, cache = self.forward_batch(tokens, mask)
        _, mag, gate = cache[4]
        return [sparse_head_output(m, g) for m, g in zip(mag, gate)]

    def predict_hard(self, tasks: Sequence[Task], chunk: int = 64) -> np.ndarray:
        out = []
        for start in range(0, len(tasks), chunk):
            out.extend(h.beta_hard for h in self.heads(tasks[start : start + chunk]))
        return np.array(out)

    def config(self) -> dict:
        return {
            "embed": mlp_config(self.token_embed),
            "blocks": [b.config() for b in self.blocks],
            "head": mlp_config(self.head),
            "gate_head": None if self.gate_head is None else mlp_config(self.gate_head),
            "features": self.features,
        }

    @classmethod
    def from_params(cls, config, params):
        i = 2 * (len(config["embed"]["widths"]) - 1)
        embed = mlp_from_config(config["embed"], params[:i])
        blocks = []
        for bc in config["blocks"]:
            n = 9 + 2 * (len(bc["ff"]["widths"]) - 1)
            blocks.append(AttentionBlock.from_params(bc, params[i : i + n]))
            i += n
        n_head = 2 * (len(config["head"]["widths"]) - 1)
        head = mlp_from_config(config["head"], params[i : i + n_head])
        i += n_head
        gate = None
        if config["gate_head"] is not None:
            gate = mlp_from_config(config["gate_head"], params[i:])
        return cls(embed, blocks, head, gate, config.get("features", "raw"))


def settransformer_forward(model: SetTransformerModel, task: Task):
    """Estimate for one task; a :class:`SparseHeadOutput` for the sparse variant."""
    if task.n_obs < 1:
        raise ValueError("empty task")
    if model.sparse:
        return model.heads([task])[0]
    return model.estimate(task)


ESTIMATOR_KINDS = {"deepsets": DeepSetsModel, "settransformer": SetTransformerModel}


def save_estimator(path, model: SetEstimator) -> Path:
    config = {
        "estimator": model.config(),
        "in_scale": model.in_scale.tolist(),
        "out_scale": float(model.out_scale),
    }
    return save_checkpoint(path, model.kind, config, model.params())


def load_estimator(path) -> SetEstimator:
    header, params = load_checkpoint(path)
    cls = ESTIMATOR_KINDS[header["kind"]]
    model = cls.from_params(header["estimator"], params)
    model.in_scale = np.array(header["in_scale"])
    model.out_scale = float(header["out_scale"])
    model.scales_fitted = True
    return model


# -- training --------------------------------------------------------------------


class LossKind(str, Enum):
    PARAM_MSE = "param_mse"
    PREDICTIVE_MSE = "predictive_mse"


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_tasks: int = 32
    loss: LossKind = LossKind.PARAM_MSE
    checkpoints: tuple = ()
    seed: int = 0
    learning_rate: float = 1e-3
    final_lr_fraction: float = 1.0
    row_subsample: float = 1.0

    def __post_init__(self):
        self.loss = LossKind(self.loss)
        if not 0.0 < self.final_lr_fraction <= 1.0:
            raise ValueError("final_lr_fraction must lie in (0, 1]")
        if not 0.0 < self.row_subsample <= 1.0:
            raise ValueError("row_subsample must lie in (0, 1]")
        self.checkpoints = tuple(sorted(int(c) for c in self.checkpoints))
        if self.epochs < 0 or self.batch_tasks < 1:
            raise ValueError("epochs must be >= 0 and batch_tasks >= 1")
        if any(c < 1 or c > self.epochs for c in self.checkpoints):
            raise ValueError("checkpoints must lie in [1, epochs]")


@dataclass
class TraceRow:
    epoch: int
    train_loss: float
    heldout_mse: float


@dataclass
class TrainResult:
    model: SetEstimator
    trace: list[TraceRow] = field(default_factory=list)
    snapshots: dict[int, list[np.ndarray]] = field(default_factory=dict)


def fit_scales(model: SetEstimator, tasks: Sequence[Task]) -> None:
    """Set ``in_scale`` to per-column token sd and ``out_scale`` to the coefficient rms."""
    tokens = np.concatenate([t.tokens() for t in tasks], axis=0)
    sd = tokens.std(axis=0)
    model.in_scale = np.where(sd > 0, sd, 1.0)
    betas = np.array([t.beta_true for t in tasks])
    rms = float(np.sqrt(np.mean(betas**2)))
    model.out_scale = rms if rms > 0 else 1.0
    model.scales_fitted = True


def batch_loss(model: SetEstimator, tasks: Sequence[Task], loss: LossKind):
    """Mean loss over ``tasks`` and its parameter gradients."""
    tokens, mask = pad_tasks(tasks)
    est, cache = model.forward_batch(tokens, mask)
    b = len(tasks)
    if loss is LossKind.PARAM_MSE:
        diff = est - np.array([t.beta_true for t in tasks])
        value = float(np.sum(diff * diff) / b)
        g = 2.0 * diff / b
    else:
        x = tokens[..., :-1]
        resid = tokens[..., -1] - np.einsum("bnp,bp->bn", x, est)
        n = mask.sum(axis=1)
        value = float(np.sum(np.sum(resid * resid, axis=1) / n) / b)
        g = -2.0 * np.einsum("bnp,bn->bp", x, resid) / (n[:, None] * b)
    return value, model.backward_batch(cache, g)


def evaluate_estimator(model: SetEstimator, tasks: Sequence[Task], metric: str = "mse_beta",
                       hard: bool = False) -> float:
    """Average ``metric`` over ``tasks``: ``mse_beta``, ``cosine`` or ``predictive_mse``."""
    from .eval_uq import cosine_similarity, mse_beta

    if not tasks:
        raise ValueError("empty test set")
    est = model.predict_hard(tasks) if hard else model.predict(tasks)
    truths = [t.beta_true for t in tasks]
    if metric == "mse_beta":
        return mse_beta(list(est), truths)
    if metric == "cosine":
        return float(np.mean([cosine_similarity(e, b) for e, b in zip(est, truths)]))
    if metric == "predictive_mse":
        return float(np.mean([np.mean((t.outputs - t.inputs @ e) ** 2) for e, t in zip(est, tasks)]))
    raise ValueError(f"unknown metric {metric!r}")


def _subsample_rows(task: Task, fraction: float, rng: np.random.Generator) -> Task:
    k = int(rng.integers(max(1, math.ceil(fraction * task.n_obs)), task.n_obs + 1))
    return task.subset(rng.choice(task.n_obs, size=k, replace=False))


def train_estimator(model: SetEstimator, meta: MetaDataset, cfg: TrainConfig,
                    rng: np.random.Generator | None = None) -> TrainResult:
    """Minimise the empirical Bayes risk over ``meta.train_tasks`` with Adam.

    The model is trained in place.  At every epoch in ``cfg.checkpoints`` a
    trace row (mean training loss over the epoch, held-out MSE_beta on
    ``meta.test_tasks``) and a parameter snapshot are recorded.  The step
    size follows a cosine decay to ``cfg.final_lr_fraction`` of its start.
    With ``cfg.row_subsample < 1`` each training task is shown as a random
    subset of at least that fraction of its rows, redrawn at every visit.
    """
    train = meta.train_tasks
    if not train:
        raise ValueError("meta-dataset has no training tasks")
    result = TrainResult(model)
    if cfg.epochs == 0:
        return result
    if not model.scales_fitted:
        fit_scales(model, train)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    params = model.params()
    state = OptimizerState.for_params(params, learning_rate=cfg.learning_rate)
    checkpoints = set(cfg.checkpoints)
    total_steps = cfg.epochs * math.ceil(len(train) / cfg.batch_tasks)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), cfg.batch_tasks):
            batch = [train[i] for i in order[start : start + cfg.batch_tasks]]
            if cfg.row_subsample < 1.0:
                batch = [_subsample_rows(t, cfg.row_subsample, rng) for t in batch]
            try:
                value, grads = batch_loss(model, batch, cfg.loss)
            except NumericError as exc:
                raise TrainingError(str(exc), epoch) from exc
            if not math.isfinite(value):
                raise TrainingError("non-finite training loss", epoch)
            total += value * len(batch)
            state.learning_rate = cosine_lr(cfg.learning_rate, cfg.final_lr_fraction, state.step_count, total_steps)
            optimizer_step(state, params, grads)
        if epoch in checkpoints:
            heldout = evaluate_estimator(model, meta.test_tasks) if meta.n_test else float("nan")
            row = TraceRow(epoch, total / len(train), heldout)
            result.trace.append(row)
            result.snapshots[epoch] = model.snapshot()
            log.info("%s epoch %d train %.4g heldout %.4g", model.kind, epoch, row.train_loss, heldout)
    return result


def write_trace(path, trace: Sequence[TraceRow], append: bool = False) -> Path:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "train_loss", "heldout_mse"])
        for row in trace:
            w.writerow([row.epoch, repr(row.train_loss), repr(row.heldout_mse)])
    return path
