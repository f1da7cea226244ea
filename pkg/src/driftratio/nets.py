"""Minimal dense networks with exact backpropagation and Adam.

Just enough machinery to train the log-ratio function: stacked affine
layers with ReLU or identity activations, reverse-mode gradients computed
by hand, and a standard Adam optimizer. Everything is float64 and
deterministic given a seed; there is no autodiff graph, no GPU path.

The derivative of ReLU at exactly 0 is taken to be 0. Gradient tests that
compare against finite differences must avoid perturbations that cross a
kink (see ``driftratio.verification``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "identity")


class ShapeError(ValueError):
    """Input or parameter shapes do not compose."""


class TrainingError(RuntimeError):
    """Non-finite loss or gradient encountered during training."""


@dataclass
class Layer:
    """One affine layer: ``act(x @ weights.T + bias)``.

    weights has shape (out_dim, in_dim), bias shape (out_dim,).
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("layer weights must be 2-D and bias 1-D")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} does not match "
                f"{self.weights.shape[0]} output units"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "Layer":
        return Layer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class DenseNet:
    """A stack of :class:`Layer` objects ending in an identity layer.

    The final activation is identity because the network output is the
    unconstrained log of an unnormalized density ratio; positivity comes
    from exponentiation downstream, never from the network itself.
    """

    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(
                    f"layer output {a.out_dim} does not feed layer input {b.in_dim}"
                )
        if self.layers[-1].activation != "identity":
            raise ShapeError("final layer activation must be identity")
        for i, layer in enumerate(self.layers):
            if not (np.isfinite(layer.weights).all() and np.isfinite(layer.bias).all()):
                raise ShapeError(f"non-finite parameters in layer {i}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "DenseNet":
        return DenseNet([layer.copy() for layer in self.layers])

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the network on a batch, shape (n, input_dim) -> (n, output_dim)."""
        out, _ = self.forward_cached(x)
        return out

    def forward_cached(self, x: np.ndarray):
        """Forward pass that also returns the cache needed by :meth:`backward`.

        The cache holds each layer's input and pre-activation values.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(
                f"batch of shape {x.shape} does not match input_dim {self.input_dim}"
            )
        cache = []
        a = x
        for layer in self.layers:
            z = a @ layer.weights.T + layer.bias
            cache.append((a, z))
            if layer.activation == "relu":
                a = np.maximum(z, 0.0)
            else:
                a = z
        return a, cache

    def backward(self, cache, output_grad: np.ndarray):
        """Gradients of ``sum(output * output_grad)`` w.r.t. every parameter.

        Returns ``[(dW, db), ...]`` aligned with ``self.layers``. ReLU
        subgradient at 0 is 0.
        """
        output_grad = np.asarray(output_grad, dtype=np.float64)
        n = cache[0][0].shape[0]
        if output_grad.shape != (n, self.output_dim):
            raise ShapeError(
                f"output_grad shape {output_grad.shape} does not match "
                f"({n}, {self.output_dim})"
            )
        grads = [None] * len(self.layers)
        delta = output_grad
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            a_in, z = cache[i]
            if layer.activation == "relu":
                delta = np.where(z > 0.0, delta, 0.0)
            grads[i] = (delta.T @ a_in, delta.sum(axis=0))
            if i > 0:
                delta = delta @ layer.weights
        return grads


def glorot_uniform(out_dim: int, in_dim: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


def make_net(
    input_dim: int,
    hidden: tuple[int, ...] | list[int],
    output_dim: int,
    rng: np.random.Generator,
) -> DenseNet:
    """Build a ReLU network with an identity output head.

    Hidden weights use Glorot-uniform init with zero bias. The output
    layer is initialized to zero so the network starts as the constant-0
    function: the initial ratio estimate is exactly 1 everywhere, which is
    the correct starting point for a chain whose very first step ratio is
    the identity, and is reachable by the small learning rates used here.
    """
    if input_dim < 1 or output_dim < 1:
        raise ShapeError("input_dim and output_dim must be positive")
    layers = []
    fan_in = input_dim
    for width in hidden:
        layers.append(Layer(glorot_uniform(width, fan_in, rng), np.zeros(width), "relu"))
        fan_in = width
    layers.append(
        Layer(np.zeros((output_dim, fan_in)), np.zeros(output_dim), "identity")
    )
    return DenseNet(layers)


def zero_grads(net: DenseNet):
    return [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in net.layers]


@dataclass
class AdamState:
    """Adam moments for one :class:`DenseNet`, updated in place."""

    m: list
    v: list
    step: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: DenseNet, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m=zero_grads(net),
            v=zero_grads(net),
            step=0,
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )

    def update(self, net: DenseNet, grads):
        """One bias-corrected Adam step on all parameters of ``net``."""
        if len(grads) != len(net.layers):
            raise ShapeError("gradient list does not match network layers")
        for i, (dw, db) in enumerate(grads):
            if not (np.isfinite(dw).all() and np.isfinite(db).all()):
                raise TrainingError(f"non-finite gradient in layer {i}")
        self.step += 1
        t = self.step
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for i, layer in enumerate(net.layers):
            for moment_m, moment_v, grad, param in (
                (self.m[i][0], self.v[i][0], grads[i][0], layer.weights),
                (self.m[i][1], self.v[i][1], grads[i][1], layer.bias),
            ):
                moment_m *= self.beta1
                moment_m += (1.0 - self.beta1) * grad
                moment_v *= self.beta2
                moment_v += (1.0 - self.beta2) * np.square(grad)
                param -= self.learning_rate * (moment_m / c1) / (
                    np.sqrt(moment_v / c2) + self.eps
                )
