"""
Classifier configuration.

Defaults: RF 100 trees / depth 16 / gini / ceil(sqrt(d)) features per
split / bootstrap; GBT 100 rounds / depth 3 / learning rate 0.1 /
softmax; SVM one-vs-rest linear hinge + L2 (1e-4), 200 epochs, step 0.01;
MLP [d, 64, 32, K], ReLU, softmax, batch 32, 200 epochs, Adam 1e-3.
"""

from typing import Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from peguard.core.config import DEFAULT_SEED

Family = Literal["svm", "rf", "gbt", "mlp"]
FAMILIES = ("svm", "rf", "gbt", "mlp")


class RandomForestParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_trees: int = Field(default=100, ge=1, le=5000)
    max_depth: int = Field(default=16, ge=1, le=64)
    max_features: Optional[int] = Field(default=None, ge=1)
    min_samples_split: int = Field(default=2, ge=2)
    bootstrap: bool = True
    criterion: Literal["gini"] = "gini"


class BoostingParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_rounds: int = Field(default=100, ge=1, le=5000)
    max_depth: int = Field(default=3, ge=1, le=16)
    learning_rate: float = Field(default=0.1, gt=0.0, le=1.0)
    reg_lambda: float = Field(default=1.0, ge=0.0)
    min_child_weight: float = Field(default=1e-3, ge=0.0)
    objective: Literal["softmax"] = "softmax"


class SvmParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    reg_lambda: float = Field(default=1e-4, ge=0.0)
    epochs: int = Field(default=200, ge=1, le=100000)
    step: float = Field(default=0.01, gt=0.0, le=10.0)


class MlpParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden: Tuple[int, ...] = (64, 32)
    epochs: int = Field(default=200, ge=1, le=100000)
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0, le=1.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(default=1e-8, gt=0.0)


HyperParams = Union[RandomForestParams, BoostingParams, SvmParams, MlpParams]

PARAMS_BY_FAMILY = {
    "rf": RandomForestParams,
    "gbt": BoostingParams,
    "svm": SvmParams,
    "mlp": MlpParams,
}

# SVM and MLP consume standardized features; tree families consume raw ones.
SCALED_FAMILIES = ("svm", "mlp")


class ClassifierConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    family: Family
    hyperparameters: HyperParams
    seed: int = Field(default=DEFAULT_SEED, ge=0, lt=2**64)
    scaling: Optional[bool] = None
    class_weights: bool = False

    @model_validator(mode="before")
    @classmethod
    def _family_params(cls, data):
        if not isinstance(data, dict):
            return data
        family = data.get("family")
        params_cls = PARAMS_BY_FAMILY.get(family)
        if params_cls is None:
            raise ValueError(f"family must be one of {FAMILIES}, got {family!r}")
        params = data.get("hyperparameters")
        if params is None:
            params = params_cls()
        elif isinstance(params, dict):
            params = params_cls(**params)
        elif not isinstance(params, params_cls):
            raise ValueError(f"{family} needs {params_cls.__name__}, got {type(params).__name__}")
        return {**data, "hyperparameters": params}

    @property
    def uses_scaling(self) -> bool:
        if self.scaling is None:
            return self.family in SCALED_FAMILIES
        return self.scaling

    def with_seed(self, seed: int) -> "ClassifierConfig":
        return self.model_copy(update={"seed": seed})

    @classmethod
    def for_family(cls, family: str, seed: int = DEFAULT_SEED, **overrides) -> "ClassifierConfig":
        """Default config for `family`; keyword overrides go to its hyperparameters."""
        options = {k: overrides.pop(k) for k in ("scaling", "class_weights") if k in overrides}
        return cls(family=family, seed=seed, hyperparameters=overrides or None, **options)
