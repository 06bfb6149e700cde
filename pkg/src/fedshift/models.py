"""Small differentiable classifiers over flat parameter vectors.

A model is a linear softmax classifier or a tanh MLP whose weights live in a
single 1-D float64 array.  The layout is fixed: hidden ("trunk") layers first,
output ("head") layer last, each layer stored as row-major weight matrix
followed by bias.  Keeping the head in a known trailing block lets ensembles
share one trunk across clusters by slicing.

All functions are pure and safe to call concurrently.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError, NumericError


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; parameter length is fully determined by it."""

    input_dim: int
    num_classes: int
    hidden: tuple[int, ...] = ()
    shared_trunk: bool = False

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ConfigurationError(f"input_dim must be positive, got {self.input_dim}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be at least 2, got {self.num_classes}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h < 1 for h in self.hidden):
            raise ConfigurationError(f"hidden sizes must be positive, got {self.hidden}")
        if self.shared_trunk and not self.hidden:
            raise ConfigurationError("shared_trunk requires at least one hidden layer")

    @property
    def architecture(self) -> str:
        return "mlp" if self.hidden else "linear"

    @property
    def num_params(self) -> int:
        return _layout(self)[-1].stop

    @property
    def trunk_size(self) -> int:
        """Number of leading parameters belonging to the hidden layers."""
        slices = _layout(self)
        return slices[-2].stop if self.hidden else 0

    @property
    def head_slice(self) -> slice:
        return slice(self.trunk_size, self.num_params)


@lru_cache(maxsize=None)
def _layer_dims(spec: ModelSpec) -> tuple[int, ...]:
    return (spec.input_dim, *spec.hidden, spec.num_classes)


@lru_cache(maxsize=None)
def _layout(spec: ModelSpec) -> tuple[slice, ...]:
    """Alternating (weight, bias) slices into the flat vector, layer by layer."""
    dims = _layer_dims(spec)
    slices = []
    offset = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        slices.append(slice(offset, offset + fan_out * fan_in))
        offset += fan_out * fan_in
        slices.append(slice(offset, offset + fan_out))
        offset += fan_out
    return tuple(slices)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform init in [-s, s] with s = 1/sqrt(fan_in), per layer."""
    dims = _layer_dims(spec)
    params = np.empty(spec.num_params, dtype=np.float64)
    for layer, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        s = 1.0 / np.sqrt(fan_in)
        w_sl, b_sl = _layout(spec)[2 * layer], _layout(spec)[2 * layer + 1]
        params[w_sl] = rng.uniform(-s, s, size=fan_out * fan_in)
        params[b_sl] = rng.uniform(-s, s, size=fan_out)
    return params


def unpack(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) per layer; W has shape (fan_out, fan_in)."""
    dims = _layer_dims(spec)
    out = []
    for layer, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w_sl, b_sl = _layout(spec)[2 * layer], _layout(spec)[2 * layer + 1]
        out.append((params[w_sl].reshape(fan_out, fan_in), params[b_sl]))
    return out


def _check(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray | None = None) -> None:
    if params.shape != (spec.num_params,):
        raise ConfigurationError(
            f"parameter vector has length {params.shape}, spec requires {spec.num_params}"
        )
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ConfigurationError(f"feature array shape {X.shape} does not match input_dim {spec.input_dim}")
    if not np.all(np.isfinite(params)):
        raise NumericError("parameter vector contains non-finite entries")
    if y is not None and len(y) and (y.min() < 0 or y.max() >= spec.num_classes):
        raise ConfigurationError(f"labels outside [0, {spec.num_classes})")


def _forward(spec: ModelSpec, params: np.ndarray, X: np.ndarray):
    """Activations per layer plus logits; activations[0] is the input."""
    layers = unpack(spec, params)
    acts = [X]
    h = X
    for W, b in layers[:-1]:
        h = np.tanh(h @ W.T + b)
        acts.append(h)
    W, b = layers[-1]
    return acts, h @ W.T + b


def _log_softmax_parts(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp with max subtraction."""
    m = logits.max(axis=1)
    return m + np.log(np.exp(logits - m[:, None]).sum(axis=1))


def losses(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy -ln softmax(logits)[y]."""
    _check(spec, params, X, y)
    _, logits = _forward(spec, params, X)
    lse = _log_softmax_parts(logits)
    return lse - logits[np.arange(len(y)), y]


def loss(x: np.ndarray, y: int, params: np.ndarray, spec: ModelSpec) -> float:
    """Cross-entropy of a single labelled sample."""
    return float(losses(spec, params, np.asarray(x, dtype=np.float64)[None, :], np.asarray([y]))[0])


def predict_proba(spec: ModelSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Class probabilities, rows summing to 1."""
    _check(spec, params, X)
    _, logits = _forward(spec, params, X)
    lse = _log_softmax_parts(logits)
    return np.exp(logits - lse[:, None])


def class_probabilities(x: np.ndarray, params: np.ndarray, spec: ModelSpec) -> np.ndarray:
    return predict_proba(spec, params, np.asarray(x, dtype=np.float64)[None, :])[0]


def weighted_grad_sum(
    spec: ModelSpec,
    params: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
) -> np.ndarray:
    """Sum over samples of w_j * grad of the cross-entropy, as a flat vector."""
    _check(spec, params, X, y)
    acts, logits = _forward(spec, params, X)
    lse = _log_softmax_parts(logits)
    probs = np.exp(logits - lse[:, None])
    delta = probs * w[:, None]
    delta[np.arange(len(y)), y] -= w

    layers = unpack(spec, params)
    grad = np.empty(spec.num_params, dtype=np.float64)
    for layer in range(len(layers) - 1, -1, -1):
        w_sl, b_sl = _layout(spec)[2 * layer], _layout(spec)[2 * layer + 1]
        grad[w_sl] = (delta.T @ acts[layer]).ravel()
        grad[b_sl] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ layers[layer][0]) * (1.0 - acts[layer] ** 2)
    return grad


def loss_gradient(sample: tuple[np.ndarray, int], params: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Analytic gradient of the loss at one sample; same length as params."""
    x, y = sample
    X = np.asarray(x, dtype=np.float64)[None, :]
    return weighted_grad_sum(spec, params, X, np.asarray([y]), np.ones(1))


def per_sample_sq_grad_norms(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Squared gradient norm of every sample's loss, without materialising the gradients.

    Per layer, the sample gradient w.r.t. W is an outer product delta x a, so its
    squared Frobenius norm is |delta|^2 * |a|^2, and the bias part adds |delta|^2.
    """
    _check(spec, params, X, y)
    acts, logits = _forward(spec, params, X)
    lse = _log_softmax_parts(logits)
    delta = np.exp(logits - lse[:, None])
    delta[np.arange(len(y)), y] -= 1.0

    layers = unpack(spec, params)
    sq = np.zeros(len(y), dtype=np.float64)
    for layer in range(len(layers) - 1, -1, -1):
        a = acts[layer]
        sq += (delta**2).sum(axis=1) * ((a**2).sum(axis=1) + 1.0)
        if layer > 0:
            delta = (delta @ layers[layer][0]) * (1.0 - acts[layer] ** 2)
    return sq
