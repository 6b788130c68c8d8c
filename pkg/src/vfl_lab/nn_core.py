"""Dense network core: fully connected layers, losses, plain SGD and a
finite-difference gradient checker.

All arrays are float64. A batch is a 2-D array of shape (rows, features) and
layer weights are stored as (in_dim, out_dim) so a forward pass is
``x @ W + b``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from os import PathLike
from typing import Callable, Sequence

import numpy as np

from vfl_lab.errors import ConfigurationError, DataError, NumericalError, ShapeError

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)

LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = IDENTITY

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class Mlp:
    """A stack of fully connected layers. The last layer is always linear."""

    layers: list[Layer]

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


@dataclass
class SgdConfig:
    learning_rate: float
    batch_size: int = 128

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre_activations: list[np.ndarray] = field(default_factory=list)


def mlp_init(layer_dims: Sequence[int], activation: str = RELU, seed: int = 0) -> Mlp:
    """Build an MLP with N(0, gain/fan_in) weights and zero biases.

    ``activation`` applies to every hidden layer; the output layer is linear.
    The gain is 2 for ReLU (He) and 1 for identity networks.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ConfigurationError(f"need at least 2 layer dims, got {dims}")
    if any(d < 1 for d in dims):
        raise ConfigurationError(f"layer dims must be >= 1, got {dims}")
    if activation not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    gain = 2.0 if activation == RELU else 1.0
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))
        act = IDENTITY if k == len(dims) - 2 else activation
        layers.append(Layer(w, np.zeros(fan_out), act))
    return Mlp(layers)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


def mlp_forward(model: Mlp, batch: np.ndarray) -> tuple[ForwardCache, np.ndarray]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"batch shape {x.shape} does not match input dim {model.input_dim}")
    cache = ForwardCache()
    for layer in model.layers:
        cache.inputs.append(x)
        z = x @ layer.weight + layer.bias
        cache.pre_activations.append(z)
        x = np.maximum(z, 0.0) if layer.activation == RELU else z
    _check_finite(x, "forward output")
    return cache, x


def mlp_predict(model: Mlp, batch: np.ndarray) -> np.ndarray:
    return mlp_forward(model, batch)[1]


def mlp_backward(
    model: Mlp, cache: ForwardCache, output_grad: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backpropagate ``output_grad``; returns per-layer (dW, db) and dL/dinput."""
    g = np.asarray(output_grad, dtype=np.float64)
    expected = cache.pre_activations[-1].shape
    if g.shape != expected:
        raise ShapeError(f"output_grad shape {g.shape} != forward output shape {expected}")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)  # type: ignore[list-item]
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if layer.activation == RELU:
            g = g * (cache.pre_activations[k] > 0.0)
        grads[k] = (cache.inputs[k].T @ g, g.sum(axis=0))
        g = g @ layer.weight.T
    return grads, g


def apply_sgd(model: Mlp, grads: list[tuple[np.ndarray, np.ndarray]], learning_rate: float) -> None:
    if learning_rate == 0.0:
        return
    for layer, (dw, db) in zip(model.layers, grads):
        layer.weight -= learning_rate * dw
        layer.bias -= learning_rate * db
    for p in model.parameters():
        _check_finite(p, "parameters after SGD step")


def mlp_backward_sgd(model: Mlp, cache: ForwardCache, output_grad: np.ndarray, cfg: SgdConfig) -> np.ndarray:
    """One SGD step in place. The returned input gradient uses pre-update weights."""
    grads, input_grad = mlp_backward(model, cache, output_grad)
    apply_sgd(model, grads, cfg.learning_rate)
    return input_grad


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


def masked_mse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over the columns where ``mask`` is 1."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    if mask.shape[0] != pred.shape[1]:
        raise ShapeError(f"mask length {mask.shape[0]} != {pred.shape[1]} columns")
    n_cols = mask.sum()
    if n_cols == 0:
        raise ConfigurationError("mask selects no columns")
    count = pred.shape[0] * n_cols
    diff = (pred - target) * mask
    return float(np.sum(diff * diff) / count), 2.0 * diff / count


def grad_check(
    model: Mlp,
    batch: np.ndarray,
    labels: np.ndarray | None = None,
    eps: float = 1e-6,
    loss: LossFn | None = None,
    analytic: list[tuple[np.ndarray, np.ndarray]] | None = None,
    floor: float = 1e-5,
) -> float:
    """Compare analytic parameter gradients with central differences.

    ``loss`` maps network output to (value, dL/doutput); it defaults to
    softmax cross-entropy against ``labels``. ``analytic`` overrides the
    backprop gradients (useful to check the checker). Returns the largest
    ``|analytic - numeric| / max(|numeric|, floor)`` over all parameters.
    The floor keeps round-off in the differences (about 1e-10 absolute for
    O(1) losses) from dominating entries whose true gradient is near zero.
    """
    if not 0.0 < eps <= 1e-2:
        raise ConfigurationError(f"eps must be in (0, 1e-2], got {eps}")
    if loss is None:
        if labels is None:
            raise ConfigurationError("either labels or loss must be given")
        loss = lambda out: softmax_cross_entropy(out, labels)  # noqa: E731

    if analytic is None:
        cache, out = mlp_forward(model, batch)
        analytic, _ = mlp_backward(model, cache, loss(out)[1])

    def value() -> float:
        return loss(mlp_forward(model, batch)[1])[0]

    worst = 0.0
    for layer, (dw, db) in zip(model.layers, analytic):
        for param, grad in ((layer.weight, dw), (layer.bias, db)):
            flat, gflat = param.reshape(-1), np.asarray(grad).reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = value()
                flat[k] = orig - eps
                down = value()
                flat[k] = orig
                numeric = (up - down) / (2.0 * eps)
                err = abs(gflat[k] - numeric) / max(abs(numeric), floor)
                worst = max(worst, err)
    return worst


# -- checkpoint format -----------------------------------------------------

def _fmt(values: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in values)


def dumps_mlp(model: Mlp) -> str:
    lines = [f"mlp v1 {len(model.layers)}"]
    for layer in model.layers:
        lines.append(f"layer {layer.in_dim} {layer.out_dim} {layer.activation}")
        lines.extend(_fmt(row) for row in layer.weight)
        lines.append(_fmt(layer.bias))
    return "\n".join(lines) + "\n"


def read_mlp(lines: io.TextIOBase | list[str]) -> Mlp:
    """Parse one model from an iterator of text lines (consumes exactly its lines)."""
    it = iter(lines)
    header = next(it).split()
    if len(header) != 3 or header[:2] != ["mlp", "v1"]:
        raise DataError(f"bad model header {' '.join(header)!r}")
    layers = []
    for _ in range(int(header[2])):
        tag, n_in, n_out, act = next(it).split()
        if tag != "layer" or act not in ACTIVATIONS:
            raise DataError(f"bad layer line {tag} {n_in} {n_out} {act}")
        n_in, n_out = int(n_in), int(n_out)
        w = np.array([[float(v) for v in next(it).split()] for _ in range(n_in)])
        b = np.array([float(v) for v in next(it).split()])
        if w.shape != (n_in, n_out) or b.shape != (n_out,):
            raise DataError(f"layer {n_in}x{n_out} has malformed values")
        layers.append(Layer(w, b, act))
    return Mlp(layers)


def loads_mlp(text: str) -> Mlp:
    return read_mlp(text.splitlines())


def save_mlp(model: Mlp, path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_mlp(model))


def load_mlp(path: str | PathLike) -> Mlp:
    with open(path, encoding="utf-8") as fh:
        return loads_mlp(fh.read())


def grad_check_suite(n_networks: int = 20, seed: int = 0, rows: int = 4) -> float:
    """Worst grad_check error over random small ReLU networks and both losses.

    Biases are drawn away from zero so no pre-activation sits exactly on the
    ReLU kink, where central differences are meaningless.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_networks):
        dims = [int(v) for v in rng.integers(2, 6, size=int(rng.integers(2, 5)))]
        model = mlp_init(dims, RELU, seed=int(rng.integers(2**31)))
        for layer in model.layers:
            layer.bias[:] = rng.normal(0.0, 0.5, size=layer.bias.shape)
        x = rng.standard_normal((rows, dims[0]))
        labels = rng.integers(0, dims[-1], size=rows)
        worst = max(worst, grad_check(model, x, labels))
        target = rng.standard_normal((rows, dims[-1]))
        mask = (rng.random(dims[-1]) < 0.5).astype(np.float64)
        mask[int(rng.integers(dims[-1]))] = 1.0
        worst = max(worst, grad_check(model, x, loss=lambda out: masked_mse(out, target, mask)))
    return worst
