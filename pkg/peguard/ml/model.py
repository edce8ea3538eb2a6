"""
Classifier facade.

WHAT:
    train(config, dataset) -> TrainedModel
    predict(model, vector) -> Prediction
    predict_batch(model, matrix) -> (class indices, scores)

HOW:
    - weights: uniform, or inverse class frequency when config.class_weights
    - scaling: z-score fitted on the training rows for SVM/MLP
    - the family trainer produces an estimator exposing scores(X)
    - predicted class = argmax of scores, ties to the lowest class index
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from peguard.core.errors import DimensionMismatch, EmptyDataset, SingleClassData
from peguard.ml.boosting import BoostingModel, train_boosting
from peguard.ml.config import ClassifierConfig
from peguard.ml.forest import RandomForestModel, train_forest
from peguard.ml.mlp import MlpModel, train_mlp
from peguard.ml.rng import make_rng
from peguard.ml.svm import LinearSvmModel, train_svm
from peguard.services.features import (
    FEATURE_SCHEMA_VERSION,
    FeatureSetId,
    FeatureVector,
    LabeledDataset,
    ScalerParams,
    fit_scaler,
)

logger = logging.getLogger(__name__)

Estimator = Union[RandomForestModel, BoostingModel, LinearSvmModel, MlpModel]

ESTIMATOR_BY_FAMILY = {
    "rf": RandomForestModel,
    "gbt": BoostingModel,
    "svm": LinearSvmModel,
    "mlp": MlpModel,
}


@dataclass(frozen=True, eq=False)
class TrainedModel:
    family: str
    estimator: Estimator
    class_names: Tuple[str, ...]
    set_id: FeatureSetId
    scaler: Optional[ScalerParams]
    config: ClassifierConfig
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class Prediction:
    class_index: int
    class_name: str
    scores: Tuple[float, ...]

    @property
    def score(self) -> float:
        return self.scores[self.class_index]


def class_weights(y: np.ndarray, n_classes: int) -> np.ndarray:
    """n / (classes present * class count), the usual 'balanced' weighting."""
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    present = np.count_nonzero(counts)
    per_class = np.divide(len(y), present * counts, out=np.zeros(n_classes), where=counts > 0)
    return per_class[y]


def train(config: ClassifierConfig, data: LabeledDataset, jobs: int = 1) -> TrainedModel:
    if len(data) == 0:
        raise EmptyDataset("no training rows")
    X, y = data.matrix(), data.label_indices()
    if X.shape[1] != data.set_id.size:
        raise DimensionMismatch(f"{X.shape[1]} columns for {data.set_id.name}")
    if len(np.unique(y)) < 2:
        raise SingleClassData(f"training labels contain one class ({data.class_names[y[0]]})")

    n_classes = len(data.class_names)
    weight = class_weights(y, n_classes) if config.class_weights else np.ones(len(y))
    scaler = fit_scaler(data) if config.uses_scaling else None
    if scaler is not None:
        X = scaler.transform(X)

    params = config.hyperparameters
    extra: Dict[str, Any] = {}
    if config.family == "rf":
        estimator = train_forest(X, y, n_classes, weight, params, config.seed, jobs)
    elif config.family == "gbt":
        estimator, losses = train_boosting(X, y, n_classes, weight, params, jobs)
        extra["train_loss"] = losses
    elif config.family == "svm":
        estimator = train_svm(X, y, n_classes, weight, params)
    else:
        estimator = train_mlp(X, y, n_classes, weight, params, make_rng(config.seed))

    metadata = {
        "seed": config.seed,
        "n_train": len(data),
        "train_counts": dict(data.class_counts),
        "feature_schema_version": FEATURE_SCHEMA_VERSION,
        **extra,
    }
    logger.info(f"Trained {config.family} on {len(data)} rows of {data.set_id.name}")
    return TrainedModel(
        family=config.family,
        estimator=estimator,
        class_names=tuple(data.class_names),
        set_id=data.set_id,
        scaler=scaler,
        config=config,
        metadata=metadata,
    )


def _check_width(model: TrainedModel, width: int) -> None:
    if width != model.set_id.size:
        raise DimensionMismatch(
            f"model expects {model.set_id.size} features ({model.set_id.name}), got {width}"
        )


def predict_batch(model: TrainedModel, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_width(model, X.shape[1])
    if model.scaler is not None:
        X = model.scaler.transform(X)
    scores = model.estimator.scores(X)
    return np.argmax(scores, axis=1), scores


def predict(model: TrainedModel, x: Union[FeatureVector, np.ndarray]) -> Prediction:
    if isinstance(x, FeatureVector):
        if x.set_id != model.set_id:
            raise DimensionMismatch(f"model is {model.set_id.name}, vector is {x.set_id.name}")
        x = x.as_array()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch(f"expected one feature vector, got shape {x.shape}")
    indices, scores = predict_batch(model, x[None, :])
    index = int(indices[0])
    return Prediction(index, model.class_names[index], tuple(scores[0].tolist()))
