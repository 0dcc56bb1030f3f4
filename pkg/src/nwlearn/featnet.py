"""Feature extractor: a small MLP mapping input vectors to feature vectors.

Relu on every layer but the last. Gradients flow whenever the net's
parameters are watched on a live tape; otherwise extraction is a pure
numpy evaluation.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import Tensor, add, matmul, relu, softmax_rows

DEFAULT_HIDDEN_DIMS = (64, 64)
DEFAULT_FEATURE_DIM = 16


class FeatureNet:
    """Fully-connected feature extractor.

    Weights are fan-in-scaled zero-mean normal draws; biases start at zero.
    """

    def __init__(self, layer_dims, rng: Rng):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ConfigError(f"layer_dims needs >= 2 positive entries, got {layer_dims}")
        self.layer_dims = dims
        self.weights = []
        self.biases = []
        for din, dout in zip(dims[:-1], dims[1:]):
            w = rng.normal(0.0, 1.0 / np.sqrt(din), size=(din, dout))
            self.weights.append(Tensor(w))
            self.biases.append(Tensor(np.zeros(dout)))

    @classmethod
    def from_weights(cls, layer_dims, weights, biases) -> "FeatureNet":
        """Rebuild a net from raw arrays (checkpoint loading)."""
        net = cls.__new__(cls)
        net.layer_dims = [int(d) for d in layer_dims]
        net.weights = [Tensor(np.asarray(w, dtype=np.float64)) for w in weights]
        net.biases = [Tensor(np.asarray(b, dtype=np.float64)) for b in biases]
        for w, (din, dout) in zip(net.weights, zip(net.layer_dims[:-1], net.layer_dims[1:])):
            if w.shape != (din, dout):
                raise ConfigError(f"weight shape {w.shape} does not match dims ({din}, {dout})")
        return net

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def state_arrays(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        return [w.data.copy() for w in self.weights], [b.data.copy() for b in self.biases]

    def load_state_arrays(self, weights, biases):
        for p, arr in zip(self.weights, weights):
            p.data = np.array(arr, dtype=np.float64)
        for p, arr in zip(self.biases, biases):
            p.data = np.array(arr, dtype=np.float64)

    def extract(self, inputs) -> Tensor:
        """Apply the net row-wise to an (n, input_dim) matrix.

        The result lands on a tape exactly when the parameters are watched,
        so the caller controls gradient tracking.
        """
        x = inputs if isinstance(inputs, Tensor) else Tensor(np.atleast_2d(inputs))
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"extract: inputs {x.shape} do not match input_dim {self.input_dim}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = add(matmul(h, w), b)
            if i != last:
                h = relu(h)
        return h

    def __call__(self, inputs) -> Tensor:
        return self.extract(inputs)


class LinearHead:
    """Zero-initialized softmax linear classifier over feature vectors.

    Serves both the parametric ERM baselines and the frozen-feature probe.
    """

    def __init__(self, feature_dim: int, n_classes: int):
        if feature_dim < 1 or n_classes < 2:
            raise ConfigError(f"bad head dims ({feature_dim}, {n_classes})")
        self.weight = Tensor(np.zeros((feature_dim, n_classes)))
        self.bias = Tensor(np.zeros(n_classes))

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def state_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.weight.data.copy(), self.bias.data.copy()

    def load_state_arrays(self, weight, bias):
        self.weight.data = np.array(weight, dtype=np.float64)
        self.bias.data = np.array(bias, dtype=np.float64)

    def logits(self, feats) -> Tensor:
        f = feats if isinstance(feats, Tensor) else Tensor(np.atleast_2d(feats))
        if f.shape[1] != self.feature_dim:
            raise ShapeError(f"features {f.shape} do not match head dim {self.feature_dim}")
        return add(matmul(f, self.weight), self.bias)

    def predict_probs(self, feats) -> Tensor:
        return softmax_rows(self.logits(feats))
