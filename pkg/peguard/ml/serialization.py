"""
Model files.

A model file is one JSON document. Floats are written with Python's
shortest round-trip repr, so a deserialized model predicts bit-identically
and serializing the same model twice gives identical bytes.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, ValidationError

from peguard.core.errors import SchemaError, UnsupportedSetId, VersionMismatch
from peguard.ml.config import ClassifierConfig
from peguard.ml.model import ESTIMATOR_BY_FAMILY, TrainedModel
from peguard.services.features import FeatureSetId, ScalerParams, feature_names

logger = logging.getLogger(__name__)

MODEL_FORMAT = "peguard-model"
MODEL_FORMAT_VERSION = 1


class ScalerDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mean: List[float]
    std: List[float]


class ModelDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: Literal["peguard-model"]
    format_version: int
    family: Literal["svm", "rf", "gbt", "mlp"]
    set_id: str
    feature_names: List[str]
    class_names: List[str]
    config: ClassifierConfig
    scaler: Optional[ScalerDocument]
    metadata: Dict[str, Any]
    params: Dict[str, Any]


def serialize_model(model: TrainedModel) -> bytes:
    scaler = None
    if model.scaler is not None:
        scaler = {"mean": list(model.scaler.mean), "std": list(model.scaler.std)}
    document = {
        "format": MODEL_FORMAT,
        "format_version": MODEL_FORMAT_VERSION,
        "family": model.family,
        "set_id": model.set_id.value,
        "feature_names": list(feature_names(model.set_id)),
        "class_names": list(model.class_names),
        "config": model.config.model_dump(mode="json"),
        "scaler": scaler,
        "metadata": model.metadata,
        "params": model.estimator.to_dict(),
    }
    return (json.dumps(document, indent=1) + "\n").encode("utf-8")


def deserialize_model(data: bytes) -> TrainedModel:
    try:
        raw = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaError(f"model file is not JSON: {e}")
    if not isinstance(raw, dict) or raw.get("format") != MODEL_FORMAT:
        raise SchemaError("not a model file")
    version = raw.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise VersionMismatch(f"model format version {version!r}, this build reads {MODEL_FORMAT_VERSION}")

    try:
        doc = ModelDocument.model_validate(raw)
        set_id = FeatureSetId.parse(doc.set_id)
    except (ValidationError, UnsupportedSetId) as e:
        raise SchemaError(f"invalid model file: {e}")
    if tuple(doc.feature_names) != feature_names(set_id):
        raise SchemaError(f"feature names do not match {set_id.name}")
    if doc.config.family != doc.family:
        raise SchemaError(f"config family {doc.config.family} != {doc.family}")

    scaler = None
    if doc.scaler is not None:
        if not len(doc.scaler.mean) == len(doc.scaler.std) == set_id.size:
            raise SchemaError("scaler width does not match the feature set")
        scaler = ScalerParams(set_id, tuple(doc.scaler.mean), tuple(doc.scaler.std))

    try:
        estimator = ESTIMATOR_BY_FAMILY[doc.family].from_dict(doc.params)
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"corrupt {doc.family} parameters: {e}")
    if estimator.n_classes != len(doc.class_names):
        raise SchemaError(f"{estimator.n_classes} outputs for {len(doc.class_names)} classes")
    if not estimator.accepts_width(set_id.size):
        raise SchemaError(f"{doc.family} parameters do not fit {set_id.size} input features")

    return TrainedModel(
        family=doc.family,
        estimator=estimator,
        class_names=tuple(doc.class_names),
        set_id=set_id,
        scaler=scaler,
        config=doc.config,
        metadata=doc.metadata,
    )


def save_model(model: TrainedModel, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_model(model))
    logger.info(f"Saved {model.family} model to {path}")
    return path


def load_model(path: Path) -> TrainedModel:
    return deserialize_model(Path(path).read_bytes())
