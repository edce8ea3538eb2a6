"""
Gradient-boosted trees with a softmax objective.

Scores start at the log of the smoothed class priors. Every round fits one
second-order regression tree per class against the softmax gradient and
hessian of the current scores, then adds learning_rate * tree output.
A round whose step would raise the training loss has its leaf values
halved until it does not, so the loss never increases across rounds.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import List, Tuple

import numpy as np

from peguard.ml.config import BoostingParams
from peguard.ml.tree import Tree, grow_newton_tree

logger = logging.getLogger(__name__)

_MIN_HESSIAN = 1e-16
MAX_STEP_HALVINGS = 30


def softmax(raw: np.ndarray) -> np.ndarray:
    shifted = raw - raw.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs: np.ndarray, y: np.ndarray, sample_weight: np.ndarray) -> float:
    picked = np.clip(probs[np.arange(len(y)), y], 1e-300, None)
    return float(-(sample_weight * np.log(picked)).sum() / sample_weight.sum())


@dataclass(frozen=True, eq=False)
class BoostingModel:
    base_score: Tuple[float, ...]
    learning_rate: float
    rounds: Tuple[Tuple[Tree, ...], ...]

    @property
    def n_classes(self) -> int:
        return len(self.base_score)

    def raw_scores(self, X: np.ndarray) -> np.ndarray:
        raw = np.tile(np.asarray(self.base_score), (len(X), 1))
        for trees in self.rounds:
            for k, tree in enumerate(trees):
                raw[:, k] += self.learning_rate * tree.predict_value(X)[:, 0]
        return raw

    def scores(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.raw_scores(X))

    def accepts_width(self, width: int) -> bool:
        return all(t.reads_within(width) for trees in self.rounds for t in trees)

    def to_dict(self) -> dict:
        return {
            "base_score": list(self.base_score),
            "learning_rate": self.learning_rate,
            "rounds": [[t.to_dict() for t in trees] for trees in self.rounds],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BoostingModel":
        base = tuple(float(v) for v in data["base_score"])
        rounds = tuple(tuple(Tree.from_dict(t) for t in trees) for trees in data["rounds"])
        if any(len(trees) != len(base) for trees in rounds):
            raise ValueError("every round needs one tree per class")
        return cls(base, float(data["learning_rate"]), rounds)


def train_boosting(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    sample_weight: np.ndarray,
    params: BoostingParams,
    jobs: int = 1,
) -> Tuple[BoostingModel, List[float]]:
    """Returns the model and the weighted training loss after each round."""
    n = len(y)
    counts = np.bincount(y, weights=sample_weight, minlength=n_classes)
    base = np.log((counts + 1.0) / (counts.sum() + n_classes))
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0

    raw = np.tile(base, (n, 1))
    loss = cross_entropy(softmax(raw), y, sample_weight)
    rounds, losses = [], []

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        for _ in range(params.n_rounds):
            probs = softmax(raw)
            grad = (probs - onehot) * sample_weight[:, None]
            hess = np.maximum(probs * (1.0 - probs), _MIN_HESSIAN) * sample_weight[:, None]

            def fit(k: int) -> Tree:
                return grow_newton_tree(
                    X, grad[:, k], hess[:, k], params.max_depth, params.reg_lambda, params.min_child_weight
                )

            trees = tuple(pool.map(fit, range(n_classes)))
            step = params.learning_rate * np.stack([t.predict_value(X)[:, 0] for t in trees], axis=1)
            scale = 1.0
            for _ in range(MAX_STEP_HALVINGS):
                candidate = cross_entropy(softmax(raw + scale * step), y, sample_weight)
                if candidate <= loss:
                    break
                scale /= 2
            else:
                scale, candidate = 0.0, loss
            if scale != 1.0:
                trees = tuple(replace(t, value=t.value * scale) for t in trees)
            raw += scale * step
            loss = candidate
            rounds.append(trees)
            losses.append(loss)

    logger.debug(f"Boosting loss {losses[0]:.4f} -> {losses[-1]:.4f} over {len(rounds)} rounds")
    model = BoostingModel(tuple(base.tolist()), params.learning_rate, tuple(rounds))
    return model, losses
