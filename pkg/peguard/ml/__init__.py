"""Classifier families (svm, rf, gbt, mlp) behind one train/predict facade."""

from peguard.ml.config import ClassifierConfig
from peguard.ml.model import Prediction, TrainedModel, predict, predict_batch, train
from peguard.ml.serialization import deserialize_model, load_model, save_model, serialize_model

__all__ = [
    "ClassifierConfig",
    "Prediction",
    "TrainedModel",
    "deserialize_model",
    "load_model",
    "predict",
    "predict_batch",
    "save_model",
    "serialize_model",
    "train",
]
