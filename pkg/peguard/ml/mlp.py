"""
Multilayer perceptron: ReLU hidden layers, softmax output, mean
cross-entropy, He-normal init, Adam on shuffled minibatches.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from peguard.ml.boosting import cross_entropy, softmax
from peguard.ml.config import MlpParams

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MlpModel:
    weights: Tuple[np.ndarray, ...]  # weights[i] is (fan_in, fan_out)
    biases: Tuple[np.ndarray, ...]

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    def forward(self, X: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        """Layer inputs (X and every hidden activation) plus output probabilities."""
        activations = [np.asarray(X, dtype=np.float64)]
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            activations.append(np.maximum(activations[-1] @ W + b, 0.0))
        logits = activations[-1] @ self.weights[-1] + self.biases[-1]
        return activations, softmax(logits)

    def scores(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)[1]

    def accepts_width(self, width: int) -> bool:
        return self.layer_sizes[0] == width

    def to_dict(self) -> dict:
        return {
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpModel":
        weights = tuple(np.asarray(w, dtype=np.float64) for w in data["weights"])
        biases = tuple(np.asarray(b, dtype=np.float64) for b in data["biases"])
        if not weights or len(weights) != len(biases):
            raise ValueError("need one bias per weight matrix")
        for i, (W, b) in enumerate(zip(weights, biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {i} has inconsistent shapes")
            if i and weights[i - 1].shape[1] != W.shape[0]:
                raise ValueError(f"layer {i} does not chain to layer {i - 1}")
        return cls(weights, biases)


def init_mlp(layer_sizes: Sequence[int], rng: np.random.Generator) -> MlpModel:
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(tuple(weights), tuple(biases))


def mlp_loss(net: MlpModel, X: np.ndarray, y: np.ndarray, sample_weight: Optional[np.ndarray] = None) -> float:
    weight = np.ones(len(y)) if sample_weight is None else sample_weight
    return cross_entropy(net.scores(X), y, weight)


def mlp_gradients(
    net: MlpModel,
    X: np.ndarray,
    y: np.ndarray,
    sample_weight: Optional[np.ndarray] = None,
) -> MlpModel:
    """Gradient of the (weighted) mean cross-entropy, shaped like `net`."""
    weight = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    activations, probs = net.forward(X)
    delta = probs.copy()
    delta[np.arange(len(y)), y] -= 1.0
    delta *= (weight / weight.sum())[:, None]

    grad_w, grad_b = [], []
    for layer in range(len(net.weights) - 1, -1, -1):
        grad_w.append(activations[layer].T @ delta)
        grad_b.append(delta.sum(axis=0))
        if layer:
            delta = (delta @ net.weights[layer].T) * (activations[layer] > 0.0)
    return MlpModel(tuple(reversed(grad_w)), tuple(reversed(grad_b)))


class _Adam:
    def __init__(self, net: MlpModel, params: MlpParams):
        self.params = params
        self.m = [np.zeros_like(p) for p in (*net.weights, *net.biases)]
        self.v = [np.zeros_like(p) for p in self.m]
        self.t = 0

    def step(self, net: MlpModel, grads: MlpModel) -> MlpModel:
        p = self.params
        self.t += 1
        values = [*net.weights, *net.biases]
        updated = []
        for i, (value, g) in enumerate(zip(values, (*grads.weights, *grads.biases))):
            self.m[i] = p.beta1 * self.m[i] + (1 - p.beta1) * g
            self.v[i] = p.beta2 * self.v[i] + (1 - p.beta2) * g * g
            m_hat = self.m[i] / (1 - p.beta1 ** self.t)
            v_hat = self.v[i] / (1 - p.beta2 ** self.t)
            updated.append(value - p.learning_rate * m_hat / (np.sqrt(v_hat) + p.epsilon))
        n = len(net.weights)
        return MlpModel(tuple(updated[:n]), tuple(updated[n:]))


def train_mlp(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    sample_weight: np.ndarray,
    params: MlpParams,
    rng: np.random.Generator,
) -> MlpModel:
    net = init_mlp([X.shape[1], *params.hidden, n_classes], rng)
    optimizer = _Adam(net, params)
    for epoch in range(params.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), params.batch_size):
            batch = order[start:start + params.batch_size]
            net = optimizer.step(net, mlp_gradients(net, X[batch], y[batch], sample_weight[batch]))
        if epoch % 50 == 0:
            logger.debug(f"MLP epoch {epoch}: loss {mlp_loss(net, X, y, sample_weight):.4f}")
    return net
