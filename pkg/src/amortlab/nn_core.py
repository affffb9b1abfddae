"""Dense layers, hand-written backpropagation and an Adam optimizer.

Everything here works on float64 numpy arrays.  A dense layer maps the last
axis of its input, so an ``MlpModel`` applied to a ``(batch, tokens, width)``
array treats every token independently; set models in this package rely on
that to share one encoder across all elements of a set.

Parameters are exposed as a flat list of arrays (``params()``) and every
backward pass returns gradients in the same order, which is all the
optimizer and the finite-difference checker need to know about a model.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Input shape does not match a model's declared widths."""


class NumericError(FloatingPointError):
    """A non-finite value appeared during evaluation."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class Activation(str, Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"


# Stable integer codes used in checkpoint headers.
ACTIVATION_CODES = {Activation.IDENTITY: 0, Activation.RELU: 1, Activation.TANH: 2}
_CODE_TO_ACTIVATION = {v: k for k, v in ACTIVATION_CODES.items()}


def _activate(z: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.RELU:
        return np.maximum(z, 0.0)
    if act is Activation.TANH:
        return np.tanh(z)
    return z


def _activation_backward(grad: np.ndarray, z: np.ndarray, a: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.RELU:
        # subgradient at exactly 0 is taken as 0
        return grad * (z > 0.0)
    if act is Activation.TANH:
        return grad * (1.0 - a * a)
    return grad


@dataclass
class DenseLayer:
    """Affine map followed by an elementwise activation.

    ``weights`` has shape ``(n_out, n_in)`` so that ``z = W a + b`` for a
    column vector ``a``; batched inputs are handled as ``a @ W.T + b``.
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"weights {self.weights.shape} and bias {self.bias.shape} are inconsistent"
            )

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]


class MlpModel:
    """Feed-forward network; the last layer is always affine (identity)."""

    def __init__(self, layers: Sequence[DenseLayer]):
        layers = list(layers)
        if not layers:
            raise DimensionError("an MlpModel needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].n_in != layers[i - 1].n_out:
                raise DimensionError(
                    f"layer {i} expects width {layers[i].n_in}, "
                    f"previous layer produces {layers[i - 1].n_out}"
                )
        if layers[-1].activation is not Activation.IDENTITY:
            raise DimensionError("final layer activation must be identity")
        self.layers = layers

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(
            [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def forward(self, x: np.ndarray):
        """Evaluate on ``x`` of shape ``(..., n_in)``; returns ``(out, cache)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"expected trailing width {self.n_in}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        a = x.reshape(-1, self.n_in)
        cache = []
        for i, layer in enumerate(self.layers):
            z = a @ layer.weights.T + layer.bias
            a_next = _activate(z, layer.activation)
            if not np.all(np.isfinite(a_next)):
                raise NumericError(f"non-finite activation in layer {i}", index=i)
            cache.append((a, z, a_next))
            a = a_next
        return a.reshape(lead + (self.n_out,)), (lead, cache)

    def backward(self, cache, grad_out: np.ndarray):
        """Return ``(grad_input, grads)`` for an upstream gradient on the output."""
        lead, layer_cache = cache
        g = np.asarray(grad_out, dtype=np.float64).reshape(-1, self.n_out)
        grads: list[np.ndarray] = [None] * (2 * self.depth)  # type: ignore[list-item]
        for i in range(self.depth - 1, -1, -1):
            layer = self.layers[i]
            a_prev, z, a = layer_cache[i]
            dz = _activation_backward(g, z, a, layer.activation)
            if not np.all(np.isfinite(dz)):
                raise NumericError(f"non-finite gradient in layer {i}", index=i)
            grads[2 * i] = dz.T @ a_prev
            grads[2 * i + 1] = dz.sum(axis=0)
            g = dz @ layer.weights
        return g.reshape(lead + (self.n_in,)), grads

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


def init_mlp(
    widths: Sequence[int],
    activation: Activation | str,
    rng: np.random.Generator,
) -> MlpModel:
    """Fan-in scaled uniform weights, zero biases; last layer is affine."""
    activation = Activation(activation)
    layers = []
    for i in range(len(widths) - 1):
        n_in, n_out = widths[i], widths[i + 1]
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        act = activation if i < len(widths) - 2 else Activation.IDENTITY
        layers.append(DenseLayer(w, np.zeros(n_out), act))
    return MlpModel(layers)


def mlp_forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    return model.forward(x)[0]


def backprop(model: MlpModel, x: np.ndarray, loss_grad: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients of a scalar loss whose output-gradient is ``loss_grad``."""
    _, cache = model.forward(x)
    return model.backward(cache, loss_grad)[1]


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean over rows of the squared Euclidean error, and its gradient."""
    pred = np.atleast_2d(pred)
    diff = pred - np.atleast_2d(target)
    n = diff.shape[0]
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


@dataclass
class OptimizerState:
    """Adam moment buffers plus hyperparameters."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_stab: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "OptimizerState":
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            **hyper,
        )


def cosine_lr(base: float, final_fraction: float, step: int, total_steps: int) -> float:
    """Cosine decay from ``base`` at step 0 to ``base * final_fraction`` at the last step."""
    frac = min(step / max(total_steps - 1, 1), 1.0)
    return base * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def optimizer_step(state: OptimizerState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise DimensionError("params, grads and optimizer buffers differ in length")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon_stab)
    return params, state


def grad_check(
    model,
    loss_fn: Callable,
    step: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(model)`` must return ``(loss, grads)`` with ``grads`` aligned to
    ``model.params()``.  Each parameter entry is perturbed in place and
    restored.  The relative error of an entry is
    ``|g - g_fd| / max(|g|, |g_fd|, floor)``.
    """
    params = model.params()
    _, analytic = loss_fn(model)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        g_flat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = loss_fn(model)[0]
            flat[i] = orig - step
            f_minus = loss_fn(model)[0]
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(g_flat[i]), abs(fd), floor)
            worst = max(worst, abs(g_flat[i] - fd) / denom)
    return worst


# -- checkpoints -------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"AMLBCKPT"
#   uint32    format version (1)
#   uint32    header length in bytes
#   header    UTF-8 JSON, sorted keys; always has "kind" and "shapes"
#   payload   float64 little-endian, each parameter row-major, in order

CHECKPOINT_MAGIC = b"AMLBCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, kind: str, config: dict, params: Sequence[np.ndarray]) -> Path:
    header = dict(config)
    header["kind"] = kind
    header["shapes"] = [list(np.shape(p)) for p in params]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    """Return ``(header, params)`` from a checkpoint file."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, n = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + n].decode("utf-8"))
    offset = 16 + n
    params = []
    for shape in header["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        params.append(arr.astype(np.float64).reshape(shape))
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return header, params


def mlp_config(model: MlpModel) -> dict:
    return {
        "widths": model.widths,
        "activations": [ACTIVATION_CODES[l.activation] for l in model.layers],
    }


def mlp_from_config(config: dict, params: Sequence[np.ndarray]) -> MlpModel:
    acts = [_CODE_TO_ACTIVATION[c] for c in config["activations"]]
    layers = [
        DenseLayer(np.array(params[2 * i]), np.array(params[2 * i + 1]), acts[i])
        for i in range(len(acts))
    ]
    model = MlpModel(layers)
    if model.widths != list(config["widths"]):
        raise DimensionError("checkpoint widths do not match parameter shapes")
    return model


def save_mlp(path, model: MlpModel) -> Path:
    return save_checkpoint(path, "mlp", mlp_config(model), model.params())


def load_mlp(path) -> MlpModel:
    header, params = load_checkpoint(path)
    if header["kind"] != "mlp":
        raise ValueError(f"expected an mlp checkpoint, found {header['kind']!r}")
    return mlp_from_config(header, params)
