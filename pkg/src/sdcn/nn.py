"""Minimal dense network engine: layers, activations, backprop and Adam.

Weights are stored as ``(out_dim, in_dim)`` matrices and batches as
``(batch, dim)`` row matrices, so a layer computes ``x @ W.T + b``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from sdcn.errors import PoisonedStateError, ShapeError, StateError

SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805


class Activation(str, enum.Enum):
    RELU = "relu"
    SELU = "selu"
    IDENTITY = "identity"


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY
    dropout_p: float = 0.0

    def __post_init__(self):
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"weights {self.weights.shape} and bias {self.bias.shape} are inconsistent"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.activation is Activation.SELU and self.dropout_p > 0:
            raise ValueError("plain dropout is not supported on SELU layers")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def astype(self, dtype) -> "DenseLayer":
        return DenseLayer(
            self.weights.astype(dtype), self.bias.astype(dtype), self.activation, self.dropout_p
        )


def kaiming_init(in_dim: int, out_dim: int, rng_seed: int, activation=Activation.IDENTITY,
                 dropout_p: float = 0.0, gain_sq: float | None = None,
                 dtype=np.float32) -> DenseLayer:
    """Kaiming-He normal init: weights ~ N(0, gain_sq / in_dim), zero bias.

    ``gain_sq`` defaults to 2 (the ReLU gain) for ReLU and identity layers
    alike, and to 1 for SELU, which is the He fan-in rule applied to an
    activation that already preserves unit variance.
    """
    if in_dim < 1 or out_dim < 1:
        raise ValueError(f"layer dimensions must be positive, got in={in_dim}, out={out_dim}")
    activation = Activation(activation)
    if gain_sq is None:
        gain_sq = 1.0 if activation is Activation.SELU else 2.0
    rng = np.random.default_rng(rng_seed)
    w = rng.standard_normal((out_dim, in_dim)) * np.sqrt(gain_sq / in_dim)
    return DenseLayer(w.astype(dtype), np.zeros(out_dim, dtype=dtype), activation, dropout_p)


def selu(x):
    """Scaled exponential linear unit, elementwise on scalars or arrays."""
    x = np.asarray(x)
    neg = SELU_LAMBDA * SELU_ALPHA * np.expm1(np.minimum(x, 0))
    out = np.where(x > 0, SELU_LAMBDA * x, neg).astype(np.result_type(x, np.float32), copy=False)
    return out if out.ndim else out.item()


def _activate(act: Activation, z):
    if act is Activation.RELU:
        return np.maximum(z, 0)
    if act is Activation.SELU:
        return selu(z)
    return z


def _activation_grad(act: Activation, z, y):
    """Derivative of the activation at pre-activation ``z`` (output ``y``)."""
    if act is Activation.RELU:
        return (z > 0).astype(z.dtype)
    if act is Activation.SELU:
        # for z <= 0, d/dz lambda*alpha*(e^z - 1) = y + lambda*alpha
        return np.where(z > 0, SELU_LAMBDA, y + SELU_LAMBDA * SELU_ALPHA).astype(z.dtype)
    return None


def _check_input(layer: DenseLayer, x):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(f"expected a (batch, {layer.in_dim}) batch, got shape {x.shape}")
    return x


def _forward(layer: DenseLayer, x, training, rng):
    z = x @ layer.weights.T + layer.bias
    a = _activate(layer.activation, z)
    mask = None
    y = a
    if training and layer.dropout_p > 0:
        if rng is None:
            raise StateError("training-mode dropout needs an rng")
        keep = 1.0 - layer.dropout_p
        mask = (rng.random(a.shape) < keep).astype(a.dtype) / a.dtype.type(keep)
        y = a * mask
    return z, a, y, mask


def forward(layer: DenseLayer, x, training: bool = False, rng=None):
    """y = act(x W^T + b), with inverted dropout after the activation in training."""
    x = _check_input(layer, x)
    return _forward(layer, x, training, rng)[2]


def mse_loss(x, x_rec) -> float:
    """Mean over batch and over dimension of squared differences."""
    x, x_rec = np.asarray(x), np.asarray(x_rec)
    if x.shape != x_rec.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x_rec.shape}")
    diff = x_rec.astype(np.float64) - x
    return float(np.mean(diff * diff))


def mse_grad(x, x_rec):
    """Gradient of :func:`mse_loss` with respect to ``x_rec``."""
    x, x_rec = np.asarray(x), np.asarray(x_rec)
    if x.shape != x_rec.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x_rec.shape}")
    return (2.0 / x.size) * (x_rec - x)


@dataclass
class GradientTape:
    """Per-layer ``(dW, db)`` buffers mirroring a network's parameters."""

    grads: list

    @classmethod
    def like(cls, layers) -> "GradientTape":
        return cls([(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in layers])

    def zero(self):
        for dw, db in self.grads:
            dw[...] = 0
            db[...] = 0


class Network:
    """A stack of dense layers that caches activations for backprop."""

    def __init__(self, layers, name: str = "net"):
        self.layers = list(layers)
        self.name = name
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"{name}: layer sizes {a.out_dim} -> {b.in_dim} do not chain")
        self.tape = GradientTape.like(self.layers)
        self._cache = None

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def __call__(self, x):
        return self.predict(x)

    def predict(self, x):
        """Inference pass; does not touch the backprop cache."""
        for layer in self.layers:
            x = forward(layer, x)
        return x

    def forward(self, x, training: bool = False, rng=None):
        x = _check_input(self.layers[0], x)
        cache = []
        for layer in self.layers:
            z, a, y, mask = _forward(layer, x, training, rng)
            cache.append((x, z, a, mask))
            x = y
        self._cache = cache
        return x

    def backward(self, grad_out):
        """Accumulate parameter gradients into ``self.tape``; return d(loss)/d(input).

        ``grad_out`` is d(loss)/d(output) for the batch of the last forward call.
        """
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before forward")
        g = np.asarray(grad_out)
        if g.shape != self._cache[-1][2].shape:
            raise ShapeError(f"{self.name}: gradient shape {g.shape} != output shape")
        for layer, (x, z, a, mask), (dw, db) in zip(
            reversed(self.layers), reversed(self._cache), reversed(self.tape.grads)
        ):
            if mask is not None:
                g = g * mask
            d_act = _activation_grad(layer.activation, z, a)
            if d_act is not None:
                g = g * d_act
            dw += (g.T @ x).astype(dw.dtype, copy=False)
            db += g.sum(axis=0).astype(db.dtype, copy=False)
            g = g @ layer.weights
        return g

    def zero_grad(self):
        self.tape.zero()

    def parameters(self):
        """Yield ``(name, array)`` pairs in a fixed order."""
        for i, layer in enumerate(self.layers):
            yield f"{self.name}.{i}.weights", layer.weights
            yield f"{self.name}.{i}.bias", layer.bias

    def gradients(self):
        for dw, db in self.tape.grads:
            yield dw
            yield db

    def astype(self, dtype) -> "Network":
        return Network([l.astype(dtype) for l in self.layers], self.name)


@dataclass
class Adam:
    """Adam optimizer; moment buffers are created lazily per parameter."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def step(self, params, grads):
        """Update ``params`` (``(name, array)`` pairs) in place from ``grads``.

        Raises :class:`PoisonedStateError` naming the first parameter whose
        gradient is not finite; no parameter is modified in that case.
        """
        params = list(params)
        grads = list(grads)
        for (name, _), g in zip(params, grads):
            if not np.all(np.isfinite(g)):
                raise PoisonedStateError(f"non-finite gradient in {name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for (name, p), g in zip(params, grads):
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p -= (self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(
                p.dtype, copy=False
            )


def optimizer_step(networks, state: Adam):
    """Apply one Adam update to every parameter of ``networks`` from their tapes."""
    params, grads = [], []
    for net in networks:
        params.extend(net.parameters())
        grads.extend(net.gradients())
    state.step(params, grads)
