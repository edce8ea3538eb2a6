"""
Binary decision trees stored as flat node arrays.

Two growers share the layout:
- gini classification trees (random forest members), leaf value = weighted
  class distribution;
- second-order regression trees (boosting rounds), leaf value =
  -G / (H + lambda).

A split on feature f with threshold t sends x[f] <= t left. Thresholds are
the lower of the two adjacent distinct training values, so a tree only
depends on the ordering of each feature and predictions are unchanged by
any strictly increasing transform applied to train and test alike.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

LEAF = -1
# Below this many rows a Python walk beats numpy's per-call overhead.
SCALAR_WALK_ROWS = 4
_GAIN_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def reads_within(self, width: int) -> bool:
        """Every split reads a column below `width`."""
        inner = self.feature[self.feature != LEAF]
        return bool(np.all((inner >= 0) & (inner < width)))

    @cached_property
    def _lists(self) -> Tuple[List[int], List[float], List[int], List[int]]:
        return (
            self.feature.tolist(),
            self.threshold.tolist(),
            self.left.tolist(),
            self.right.tolist(),
        )

    def leaf_of(self, x: Sequence[float]) -> int:
        feature, threshold, left, right = self._lists
        node = 0
        while feature[node] != LEAF:
            node = left[node] if x[feature[node]] <= threshold[node] else right[node]
        return node

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of X."""
        X = np.asarray(X, dtype=np.float64)
        if len(X) <= SCALAR_WALK_ROWS:
            return np.array([self.leaf_of(row.tolist()) for row in X], dtype=np.int64)
        nodes = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[nodes] != LEAF)
        while active.size:
            current = nodes[active]
            go_left = X[active, self.feature[current]] <= self.threshold[current]
            nodes[active] = np.where(go_left, self.left[current], self.right[current])
            active = active[self.feature[nodes[active]] != LEAF]
        return nodes

    def predict_value(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> Dict[str, list]:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, list]) -> "Tree":
        tree = cls(
            feature=np.asarray(data["feature"], dtype=np.int64),
            threshold=np.asarray(data["threshold"], dtype=np.float64),
            left=np.asarray(data["left"], dtype=np.int64),
            right=np.asarray(data["right"], dtype=np.int64),
            value=np.asarray(data["value"], dtype=np.float64),
        )
        tree.check()
        return tree

    def check(self) -> None:
        """Structural sanity for trees read from disk."""
        n = self.n_nodes
        if n == 0 or not (len(self.threshold) == len(self.left) == len(self.right) == len(self.value) == n):
            raise ValueError("node arrays differ in length")
        if self.value.ndim != 2:
            raise ValueError("leaf values must be a 2-D array")
        inner = self.feature != LEAF
        for children in (self.left[inner], self.right[inner]):
            if np.any(children <= np.flatnonzero(inner)) or np.any(children >= n):
                raise ValueError("child index out of range")


class _NodeBuffer:
    def __init__(self, n_outputs: int):
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.value: List[np.ndarray] = []
        self.n_outputs = n_outputs

    def new(self) -> int:
        self.feature.append(LEAF)
        self.threshold.append(0.0)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.value.append(np.zeros(self.n_outputs))
        return len(self.feature) - 1

    def split(self, node: int, feature: int, threshold: float) -> Tuple[int, int]:
        left, right = self.new(), self.new()
        self.feature[node] = feature
        self.threshold[node] = threshold
        self.left[node] = left
        self.right[node] = right
        return left, right

    def freeze(self) -> Tree:
        return Tree(
            feature=np.asarray(self.feature, dtype=np.int64),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int64),
            right=np.asarray(self.right, dtype=np.int64),
            value=np.vstack(self.value),
        )


def _sorted_column(column: np.ndarray):
    order = np.argsort(column, kind="stable")
    xs = column[order]
    return order, xs, xs[:-1] < xs[1:]


# =========================
# GINI CLASSIFICATION TREE
# =========================
def _best_gini_split(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    features: np.ndarray,
    n_classes: int,
) -> Optional[Tuple[int, float]]:
    weighted = np.zeros((len(y), n_classes))
    weighted[np.arange(len(y)), y] = w
    total = weighted.sum(axis=0)
    total_w = total.sum()
    # Weighted gini of a split is (W - sum(L^2)/wl - sum(R^2)/wr) / W; maximize the subtracted part.
    parent_score = np.dot(total, total) / total_w
    best_score, best = parent_score + _GAIN_TOLERANCE * total_w, None

    for f in features:
        order, xs, distinct = _sorted_column(X[:, f])
        left = np.cumsum(weighted[order], axis=0)[:-1]
        right = total - left
        wl = left.sum(axis=1)
        wr = total_w - wl
        valid = distinct & (wl > 0) & (wr > 0)
        if not valid.any():
            continue
        score = np.full(len(wl), -np.inf)
        score[valid] = (
            np.einsum("ij,ij->i", left[valid], left[valid]) / wl[valid]
            + np.einsum("ij,ij->i", right[valid], right[valid]) / wr[valid]
        )
        i = int(np.argmax(score))
        if score[i] > best_score:
            best_score, best = score[i], (int(f), float(xs[i]))
    return best


def grow_classification_tree(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    sample_weight: np.ndarray,
    max_depth: int,
    min_samples_split: int,
    max_features: int,
    rng: np.random.Generator,
) -> Tree:
    """CART with gini impurity; rows with zero weight are ignored."""
    n_features = X.shape[1]
    buffer = _NodeBuffer(n_classes)
    root = buffer.new()
    stack = [(root, np.flatnonzero(sample_weight > 0), 0)]

    while stack:
        node, idx, depth = stack.pop()
        counts = np.bincount(y[idx], weights=sample_weight[idx], minlength=n_classes)
        buffer.value[node] = counts / counts.sum()
        if depth >= max_depth or len(idx) < min_samples_split or np.count_nonzero(counts) <= 1:
            continue

        if max_features < n_features:
            features = rng.choice(n_features, size=max_features, replace=False)
        else:
            features = np.arange(n_features)
        split = _best_gini_split(X[idx], y[idx], sample_weight[idx], features, n_classes)
        if split is None:
            continue

        feature, threshold = split
        go_left = X[idx, feature] <= threshold
        left, right = buffer.split(node, feature, threshold)
        stack.append((right, idx[~go_left], depth + 1))
        stack.append((left, idx[go_left], depth + 1))

    return buffer.freeze()


# =========================
# SECOND-ORDER REGRESSION TREE
# =========================
def _best_newton_split(
    X: np.ndarray,
    grad: np.ndarray,
    hess: np.ndarray,
    reg_lambda: float,
    min_child_weight: float,
) -> Optional[Tuple[int, float]]:
    G, H = grad.sum(), hess.sum()
    parent = G * G / (H + reg_lambda)
    best_score, best = parent + _GAIN_TOLERANCE, None

    for f in range(X.shape[1]):
        order, xs, distinct = _sorted_column(X[:, f])
        gl = np.cumsum(grad[order])[:-1]
        hl = np.cumsum(hess[order])[:-1]
        gr, hr = G - gl, H - hl
        valid = distinct & (hl >= min_child_weight) & (hr >= min_child_weight)
        if not valid.any():
            continue
        score = np.where(valid, gl * gl / (hl + reg_lambda) + gr * gr / (hr + reg_lambda), -np.inf)
        i = int(np.argmax(score))
        if score[i] > best_score:
            best_score, best = score[i], (f, float(xs[i]))
    return best


def grow_newton_tree(
    X: np.ndarray,
    grad: np.ndarray,
    hess: np.ndarray,
    max_depth: int,
    reg_lambda: float,
    min_child_weight: float,
) -> Tree:
    buffer = _NodeBuffer(1)
    root = buffer.new()
    stack = [(root, np.arange(len(grad)), 0)]

    while stack:
        node, idx, depth = stack.pop()
        buffer.value[node] = np.array([-grad[idx].sum() / (hess[idx].sum() + reg_lambda)])
        if depth >= max_depth or len(idx) < 2:
            continue
        split = _best_newton_split(X[idx], grad[idx], hess[idx], reg_lambda, min_child_weight)
        if split is None:
            continue
        feature, threshold = split
        go_left = X[idx, feature] <= threshold
        left, right = buffer.split(node, feature, threshold)
        stack.append((right, idx[~go_left], depth + 1))
        stack.append((left, idx[go_left], depth + 1))

    return buffer.freeze()
