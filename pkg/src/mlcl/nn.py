"""Dense numerical core: a small multi-layer perceptron with a sigmoid
multi-label head, an intermediate feature tap, hand-derived reverse-mode
gradients, and an Adam optimizer.

The model is ``f(x) = g(h(x))`` where ``h`` is every layer up to and
including ``feature_tap`` (the feature extractor) and ``g`` is the rest
(the classifier). Losses used for training decompose into a term on the
logits plus an optional term on the tapped features, so a single backward
sweep with two gradient injection points covers the whole loss family.

Arrays are float64 throughout; batches are row-major (one sample per row).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

RELU = "relu"
IDENTITY = "identity"


def sigmoid(z):
    """Numerically stable logistic function."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    """log(1 + exp(z)) without overflow."""
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def bce_elements(logits, targets):
    """Elementwise binary cross-entropy computed from logits.

    Uses the identity ``-[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z``,
    which is stable for any logit magnitude and valid for soft targets in
    [0, 1] as well as hard 0/1 targets.
    """
    return softplus(logits) - targets * logits


def bce(logits, targets):
    """Mean binary cross-entropy over all elements, from logits.

    ``targets`` must be binary; soft-target callers (distillation) should use
    :func:`bce_elements` directly.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ConfigError(f"logits shape {logits.shape} != targets shape {targets.shape}")
    if not np.all((targets == 0.0) | (targets == 1.0)):
        from .errors import ValidationError

        raise ValidationError("bce targets must be 0 or 1")
    return float(np.mean(bce_elements(logits, targets)))


@dataclass
class Layer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str  # RELU or IDENTITY

    def __post_init__(self):
        if self.activation not in (RELU, IDENTITY):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ConfigError(
                f"layer shapes disagree: weight {self.weight.shape}, bias {self.bias.shape}"
            )


@dataclass
class MlpModel:
    """Stack of dense layers with a designated feature-tap index.

    Layers ``0..feature_tap`` form the feature extractor; the remaining
    layers form the classifier. The last layer emits one pre-sigmoid logit
    per class.
    """

    layers: list[Layer]
    feature_tap: int

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("model needs at least one layer")
        if not 0 <= self.feature_tap < len(self.layers):
            raise ConfigError(
                f"feature_tap {self.feature_tap} out of range for {len(self.layers)} layers"
            )
        for k in range(len(self.layers) - 1):
            out_dim = self.layers[k].weight.shape[1]
            in_dim = self.layers[k + 1].weight.shape[0]
            if out_dim != in_dim:
                raise ConfigError(f"layer {k} out dim {out_dim} != layer {k + 1} in dim {in_dim}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.layers[self.feature_tap].weight.shape[1]

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list [W0, b0, W1, b1, ...] (live references)."""
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def set_parameters(self, params: list[np.ndarray]) -> None:
        if len(params) != 2 * len(self.layers):
            raise ConfigError("parameter count mismatch")
        for k, layer in enumerate(self.layers):
            w, b = params[2 * k], params[2 * k + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ConfigError(f"parameter shape mismatch at layer {k}")
            layer.weight = w
            layer.bias = b

    def copy(self) -> "MlpModel":
        return MlpModel(
            layers=[Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            feature_tap=self.feature_tap,
        )


def init_mlp(
    input_dim: int,
    hidden_sizes: list[int],
    n_outputs: int,
    rng: np.random.Generator,
    feature_tap: int | None = None,
) -> MlpModel:
    """Build an MLP with relu hidden layers and an identity output layer.

    Weights are Glorot-uniform (+-sqrt(6/(fan_in+fan_out))), biases zero.
    ``feature_tap`` defaults to the last hidden layer.
    """
    dims = [input_dim] + list(hidden_sizes) + [n_outputs]
    layers = []
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        act = RELU if k < len(dims) - 2 else IDENTITY
        layers.append(Layer(w, b, act))
    if feature_tap is None:
        feature_tap = max(len(layers) - 2, 0)
    return MlpModel(layers=layers, feature_tap=feature_tap)


@dataclass
class ForwardCache:
    """Intermediates retained for the backward sweep."""

    inputs: np.ndarray
    pre_activations: list[np.ndarray]  # z_k per layer
    activations: list[np.ndarray]  # a_k per layer (post-activation)


def _activate(z, kind):
    if kind == RELU:
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z, kind):
    if kind == RELU:
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


def forward(model: MlpModel, inputs: np.ndarray, check_finite: bool = True):
    """Run the network on a batch.

    Returns ``(logits, features, cache)``: pre-sigmoid logits
    (batch x n_outputs), the activations at the feature tap
    (batch x feature_dim), and the cache needed by :func:`backprop`.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != model.input_dim:
        raise ConfigError(
            f"input shape {inputs.shape} incompatible with model input dim {model.input_dim}"
        )
    a = inputs
    pre, post = [], []
    for k, layer in enumerate(model.layers):
        z = a @ layer.weight + layer.bias
        a = _activate(z, layer.activation)
        if check_finite and not np.all(np.isfinite(a)):
            raise NumericError("non-finite activation", layer_index=k)
        pre.append(z)
        post.append(a)
    logits = post[-1]
    features = post[model.feature_tap]
    return logits, features, ForwardCache(inputs=inputs, pre_activations=pre, activations=post)


def classifier_forward(model: MlpModel, features: np.ndarray) -> np.ndarray:
    """Apply only the classifier layers (those after the feature tap)."""
    a = np.asarray(features, dtype=np.float64)
    for layer in model.layers[model.feature_tap + 1 :]:
        z = a @ layer.weight + layer.bias
        a = _activate(z, layer.activation)
    return a


def backprop(
    model: MlpModel,
    cache: ForwardCache,
    d_logits: np.ndarray,
    d_features: np.ndarray | None = None,
) -> list[np.ndarray]:
    """Reverse-mode sweep for losses of the form L(logits, features).

    ``d_logits`` is dL/d(logits); ``d_features``, when given, is dL/d(features)
    and is injected at the feature-tap layer. Returns gradients in the same
    order as :meth:`MlpModel.parameters`.
    """
    n_layers = len(model.layers)
    grads: list[np.ndarray | None] = [None] * (2 * n_layers)
    delta = np.asarray(d_logits, dtype=np.float64)
    # Tap on the last layer means features and logits are the same array.
    if d_features is not None and model.feature_tap == n_layers - 1:
        delta = delta + d_features
        d_features = None
    for k in range(n_layers - 1, -1, -1):
        layer = model.layers[k]
        if d_features is not None and k == model.feature_tap:
            delta = delta + d_features
        dz = delta * _activation_grad(cache.pre_activations[k], layer.activation)
        a_prev = cache.inputs if k == 0 else cache.activations[k - 1]
        grads[2 * k] = a_prev.T @ dz
        grads[2 * k + 1] = dz.sum(axis=0)
        if not np.all(np.isfinite(grads[2 * k])):
            raise NumericError("non-finite gradient", layer_index=k)
        if k > 0:
            delta = dz @ layer.weight.T
    return grads  # type: ignore[return-value]


def loss_gradients(model: MlpModel, inputs: np.ndarray, loss_fn) -> tuple[float, list[np.ndarray]]:
    """Gradient of a scalar loss over (logits, features) w.r.t. every parameter.

    ``loss_fn(logits, features) -> (value, d_logits, d_features_or_None)``.
    """
    logits, features, cache = forward(model, inputs)
    value, d_logits, d_features = loss_fn(logits, features)
    grads = backprop(model, cache, d_logits, d_features)
    return float(value), grads


@dataclass
class AdamState:
    """Adam moment accumulators for a flat parameter list."""

    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 0.0005, **kwargs) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kwargs,
        )


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """One in-place Adam update; increments ``state.step``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ConfigError("params/grads/state length mismatch")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ConfigError(f"grad shape {g.shape} != param shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
