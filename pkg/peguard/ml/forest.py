"""
Random forest.

Each tree gets its own seed derive_seed(config.seed, tree_index) for its
bootstrap draw and its per-split feature subsets, so trees can be grown
on any number of threads and the forest stays bit-identical.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from peguard.ml.config import RandomForestParams
from peguard.ml.rng import make_rng
from peguard.ml.tree import Tree, grow_classification_tree

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RandomForestModel:
    trees: Tuple[Tree, ...]
    n_classes: int

    def votes(self, X: np.ndarray) -> np.ndarray:
        """(n, n_trees) class index voted by each tree (ties to the lowest index)."""
        return np.stack([np.argmax(t.predict_value(X), axis=1) for t in self.trees], axis=1)

    def scores(self, X: np.ndarray) -> np.ndarray:
        """Vote fractions per class."""
        votes = self.votes(X)
        counts = np.zeros((len(votes), self.n_classes))
        for k in range(self.n_classes):
            counts[:, k] = (votes == k).sum(axis=1)
        return counts / len(self.trees)

    def accepts_width(self, width: int) -> bool:
        return all(t.reads_within(width) for t in self.trees)

    def to_dict(self) -> dict:
        return {"n_classes": self.n_classes, "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, data: dict) -> "RandomForestModel":
        return cls(tuple(Tree.from_dict(t) for t in data["trees"]), int(data["n_classes"]))


def default_max_features(n_features: int) -> int:
    return max(1, math.ceil(math.sqrt(n_features)))


def train_forest(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    sample_weight: np.ndarray,
    params: RandomForestParams,
    seed: int,
    jobs: int = 1,
) -> RandomForestModel:
    n = len(y)
    max_features = min(params.max_features or default_max_features(X.shape[1]), X.shape[1])

    def grow(tree_index: int) -> Tree:
        rng = make_rng(seed, tree_index)
        weight = sample_weight
        if params.bootstrap:
            # A bootstrap draw is a multiset; row multiplicities act as weights.
            weight = sample_weight * np.bincount(rng.integers(0, n, size=n), minlength=n)
        return grow_classification_tree(
            X, y, n_classes, weight, params.max_depth, params.min_samples_split, max_features, rng
        )

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        trees = tuple(pool.map(grow, range(params.n_trees)))
    logger.debug(f"Grew {len(trees)} trees, mean {np.mean([t.n_nodes for t in trees]):.0f} nodes")
    return RandomForestModel(trees, n_classes)
