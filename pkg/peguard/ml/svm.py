"""One-vs-rest linear SVM: hinge loss + L2, full-batch subgradient descent from zero."""

from dataclasses import dataclass

import numpy as np

from peguard.ml.config import SvmParams


@dataclass(frozen=True, eq=False)
class LinearSvmModel:
    weights: np.ndarray  # (d, K)
    bias: np.ndarray  # (K,)

    @property
    def n_classes(self) -> int:
        return len(self.bias)

    def scores(self, X: np.ndarray) -> np.ndarray:
        """Signed margins of each one-vs-rest subproblem."""
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias

    def accepts_width(self, width: int) -> bool:
        return self.weights.shape[0] == width

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "LinearSvmModel":
        weights = np.asarray(data["weights"], dtype=np.float64)
        bias = np.asarray(data["bias"], dtype=np.float64)
        if weights.ndim != 2 or bias.shape != (weights.shape[1],):
            raise ValueError("weights must be (d, K) and bias (K,)")
        return cls(weights, bias)


def train_svm(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    sample_weight: np.ndarray,
    params: SvmParams,
) -> LinearSvmModel:
    """All K subproblems are solved together; each column is independent."""
    n, d = X.shape
    targets = np.where(y[:, None] == np.arange(n_classes)[None, :], 1.0, -1.0)
    norm = sample_weight / sample_weight.sum()
    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)

    for _ in range(params.epochs):
        margins = targets * (X @ W + b)
        # d/dscore of mean weighted hinge is -y on rows inside the margin.
        coeff = np.where(margins < 1.0, -targets, 0.0) * norm[:, None]
        W -= params.step * (X.T @ coeff + params.reg_lambda * W)
        b -= params.step * coeff.sum(axis=0)

    return LinearSvmModel(W, b)
