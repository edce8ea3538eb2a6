import json

import numpy as np
import pytest
from pydantic import ValidationError

from conftest import synthetic_dataset
from peguard.core.errors import DimensionMismatch, SchemaError, SingleClassData, VersionMismatch
from peguard.ml import (
    ClassifierConfig,
    deserialize_model,
    predict,
    predict_batch,
    serialize_model,
    train,
)
from peguard.ml.mlp import MlpModel, init_mlp, mlp_gradients, mlp_loss
from peguard.ml.model import class_weights
from peguard.ml.rng import derive_seed, make_rng
from peguard.services.features import FeatureSetId, FeatureVector, LabeledDataset, LabeledRow
from peguard.services.labels import CLASS_NAMES, ClassLabel

FAST = {
    "rf": {"n_trees": 15},
    "gbt": {"n_rounds": 15},
    "svm": {},
    "mlp": {"epochs": 60},
}


def fast_config(family, seed=7, **overrides):
    return ClassifierConfig.for_family(family, seed=seed, **{**FAST[family], **overrides})


@pytest.fixture(scope="module")
def blobs():
    return synthetic_dataset({"Babuk": 40, "Benign": 40}, n_features=5, seed=1, separation=10.0)


def split_halves(dataset):
    return dataset.subset(range(0, len(dataset), 2)), dataset.subset(range(1, len(dataset), 2))


# =========================
# TRAIN / PREDICT
# =========================
@pytest.mark.parametrize("family", ["svm", "rf", "gbt", "mlp"])
def test_separable_clusters_are_learned(blobs, family):
    model = train(ClassifierConfig.for_family(family, seed=3), blobs)
    predicted, scores = predict_batch(model, blobs.matrix())
    assert np.array_equal(predicted, blobs.label_indices())
    assert np.array_equal(predicted, np.argmax(scores, axis=1))


@pytest.mark.parametrize("family", ["rf", "gbt", "mlp"])
def test_probabilistic_scores_sum_to_one(small_dataset, family):
    model = train(fast_config(family), small_dataset)
    _, scores = predict_batch(model, small_dataset.matrix()[:50])
    assert np.allclose(scores.sum(axis=1), 1.0, atol=1e-6)


def test_predict_single_vector_matches_batch(small_dataset):
    model = train(fast_config("gbt"), small_dataset)
    row = small_dataset.rows[5]
    prediction = predict(model, row.vector)
    indices, scores = predict_batch(model, row.vector.as_array()[None, :])
    assert prediction.class_index == indices[0]
    assert prediction.class_name == CLASS_NAMES[prediction.class_index]
    assert prediction.scores == tuple(scores[0].tolist())
    assert prediction.class_index == int(np.argmax(prediction.scores))


def test_single_class_training_fails():
    only_babuk = synthetic_dataset({"Babuk": 10}, n_features=5)
    with pytest.raises(SingleClassData):
        train(fast_config("rf"), only_babuk)


def test_wrong_width_input_fails(blobs):
    model = train(fast_config("svm"), blobs)
    with pytest.raises(DimensionMismatch):
        predict_batch(model, np.zeros((2, 7)))
    vector = FeatureVector(FeatureSetId.FS7, (0.0,) * 7)
    with pytest.raises(DimensionMismatch):
        predict(model, vector)


@pytest.mark.parametrize("family", ["svm", "rf", "gbt", "mlp"])
def test_training_is_deterministic(small_dataset, family):
    first = serialize_model(train(fast_config(family), small_dataset))
    second = serialize_model(train(fast_config(family), small_dataset))
    assert first == second


def test_forest_is_independent_of_worker_count(small_dataset):
    config = fast_config("rf")
    one = serialize_model(train(config, small_dataset, jobs=1))
    four = serialize_model(train(config, small_dataset, jobs=4))
    assert one == four


def test_forest_seed_changes_the_model(small_dataset):
    a = serialize_model(train(fast_config("rf", seed=1), small_dataset))
    b = serialize_model(train(fast_config("rf", seed=2), small_dataset))
    assert a != b


def test_config_validation():
    with pytest.raises(ValidationError):
        ClassifierConfig.for_family("rf", n_trees=0)
    with pytest.raises(ValidationError):
        ClassifierConfig.for_family("knn")
    with pytest.raises(ValidationError):
        ClassifierConfig.for_family("svm", n_trees=10)
    config = ClassifierConfig.for_family("mlp", hidden=(8,))
    assert config.hyperparameters.hidden == (8,)
    assert config.uses_scaling
    assert not ClassifierConfig.for_family("gbt").uses_scaling


def test_balanced_class_weights():
    y = np.array([0, 0, 0, 1, 9, 9])
    weights = class_weights(y, 10)
    assert weights.sum() == pytest.approx(len(y))
    assert weights[0] * 3 == pytest.approx(weights[3])


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(7, 0) == derive_seed(7, 0)
    assert len({derive_seed(7, i) for i in range(100)}) == 100
    assert make_rng(7, 1).integers(1 << 30) == make_rng(7, 1).integers(1 << 30)


# =========================
# TREES
# =========================
def _gap_dataset():
    """Five identical columns; class 0 in [0, 1], class 9 in [5, 6]."""
    rng = np.random.default_rng(0)
    rows = []
    for i, (k, x) in enumerate([(0, v) for v in rng.uniform(0, 1, 20)] + [(9, v) for v in rng.uniform(5, 6, 20)]):
        vector = FeatureVector(FeatureSetId.FS5, (float(x),) * 5, f"{i:064d}")
        rows.append(LabeledRow(vector, ClassLabel.from_index(k)))
    return LabeledDataset(FeatureSetId.FS5, tuple(rows))


def test_stump_threshold_lies_in_the_gap():
    data = _gap_dataset()
    x = data.matrix()[:, 0]
    low, high = x[x < 3].max(), x[x > 3].min()
    config = ClassifierConfig.for_family("rf", n_trees=5, max_depth=1, bootstrap=False)
    model = train(config, data)
    for tree in model.estimator.trees:
        assert tree.n_nodes == 3
        assert low <= tree.threshold[0] < high
    predicted, _ = predict_batch(model, data.matrix())
    assert np.array_equal(predicted, data.label_indices())


def test_forest_prediction_is_the_tree_majority(small_dataset):
    model = train(fast_config("rf", n_trees=9), small_dataset)
    X = small_dataset.matrix()[:60]
    predicted, scores = predict_batch(model, X)
    for row, pred, score in zip(X, predicted, scores):
        votes = np.zeros(len(CLASS_NAMES))
        for tree in model.estimator.trees:
            votes[int(np.argmax(tree.value[tree.leaf_of(row.tolist())]))] += 1
        assert pred == int(np.argmax(votes))
        assert np.allclose(score, votes / len(model.estimator.trees))


def test_boosting_loss_never_increases(small_dataset):
    model = train(fast_config("gbt", n_rounds=30), small_dataset)
    losses = np.array(model.metadata["train_loss"])
    assert len(losses) == 30
    assert np.all(np.diff(losses) <= 1e-9)


@pytest.mark.parametrize("family", ["rf", "gbt"])
@pytest.mark.parametrize("transform", [np.sqrt, lambda x: 3.0 * x + 1.0, np.log1p])
def test_tree_predictions_ignore_monotone_transforms(small_dataset, family, transform):
    train_set, test_set = split_halves(small_dataset)

    def mapped(dataset):
        rows = tuple(
            LabeledRow(FeatureVector(r.vector.set_id, tuple(transform(np.array(r.vector.values)).tolist()), r.vector.source_id), r.label)
            for r in dataset.rows
        )
        return LabeledDataset(dataset.set_id, rows)

    plain = predict_batch(train(fast_config(family), train_set), test_set.matrix())[0]
    moved = predict_batch(train(fast_config(family), mapped(train_set)), mapped(test_set).matrix())[0]
    assert np.array_equal(plain, moved)


def test_svm_absent_class_has_constant_negative_margin(blobs):
    model = train(ClassifierConfig.for_family("svm"), blobs)
    _, margins = predict_batch(model, blobs.matrix())
    absent = [k for k, name in enumerate(CLASS_NAMES) if blobs.class_counts[name] == 0]
    assert np.all(margins[:, absent] < 0)


# =========================
# MLP GRADIENTS
# =========================
def _zero_net(sizes):
    return MlpModel(
        tuple(np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])),
        tuple(np.zeros(b) for b in sizes[1:]),
    )


def test_zero_weight_net_is_uniform():
    net = _zero_net([4, 6, 10])
    assert np.allclose(net.scores(np.random.default_rng(0).normal(size=(3, 4))), 0.1)


def test_zero_weight_output_bias_gradient_closed_form():
    net = _zero_net([3, 4, 3])
    X = np.random.default_rng(1).normal(size=(4, 3))
    y = np.array([0, 0, 1, 2])
    grads = mlp_gradients(net, X, y)
    assert np.allclose(grads.biases[-1], np.full(3, 1 / 3) - np.array([0.5, 0.25, 0.25]))


def _numeric_gradients(net, X, y, eps=1e-6):
    params = [*net.weights, *net.biases]
    numeric = []
    for p in params:
        g = np.zeros_like(p)
        for index in np.ndindex(p.shape):
            original = p[index]
            p[index] = original + eps
            up = mlp_loss(net, X, y)
            p[index] = original - eps
            down = mlp_loss(net, X, y)
            p[index] = original
            g[index] = (up - down) / (2 * eps)
        numeric.append(g)
    return numeric


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = init_mlp([2, 3, 2], rng)
    net = MlpModel(net.weights, tuple(rng.normal(0, 0.1, size=b.shape) for b in net.biases))
    X = rng.normal(size=(6, 2))
    y = rng.integers(0, 2, size=6)

    analytic = mlp_gradients(net, X, y)
    numeric = _numeric_gradients(net, X, y)
    for a, n in zip([*analytic.weights, *analytic.biases], numeric):
        denominator = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-8)
        assert np.linalg.norm(a - n) / denominator < 1e-4


def test_duplicated_batch_keeps_mean_gradient():
    rng = np.random.default_rng(4)
    net = init_mlp([5, 8, 4], rng)
    X = rng.normal(size=(7, 5))
    y = rng.integers(0, 4, size=7)
    once = mlp_gradients(net, X, y)
    twice = mlp_gradients(net, np.vstack([X, X]), np.concatenate([y, y]))
    for a, b in zip([*once.weights, *once.biases], [*twice.weights, *twice.biases]):
        assert np.allclose(a, b)


# =========================
# SERIALIZATION
# =========================
@pytest.mark.parametrize("family", ["svm", "rf", "gbt", "mlp"])
def test_model_file_round_trip(small_dataset, family):
    model = train(fast_config(family), small_dataset)
    text = serialize_model(model)
    restored = deserialize_model(text)
    assert serialize_model(restored) == text
    assert restored.class_names == model.class_names
    assert restored.set_id is model.set_id

    points = np.random.default_rng(0).uniform(0, 2 * small_dataset.matrix().max(axis=0), size=(100, 15))
    a_idx, a_scores = predict_batch(model, points)
    b_idx, b_scores = predict_batch(restored, points)
    assert np.array_equal(a_idx, b_idx)
    assert np.array_equal(a_scores, b_scores)


def test_restored_boosting_reproduces_training_scores(small_dataset):
    model = train(fast_config("gbt"), small_dataset)
    restored = deserialize_model(serialize_model(model))
    X = small_dataset.matrix()
    assert np.allclose(predict_batch(model, X)[1], predict_batch(restored, X)[1], rtol=0, atol=1e-12)


def test_corrupt_model_files(blobs):
    text = serialize_model(train(fast_config("rf"), blobs))
    document = json.loads(text)

    with pytest.raises(SchemaError):
        deserialize_model(text[: len(text) // 2])
    with pytest.raises(SchemaError):
        deserialize_model(b"\xff\xfe")

    bumped = dict(document, format_version=document["format_version"] + 1)
    with pytest.raises(VersionMismatch):
        deserialize_model(json.dumps(bumped).encode())

    broken_params = dict(document, params={"n_classes": 10})
    with pytest.raises(SchemaError):
        deserialize_model(json.dumps(broken_params).encode())

    wrong_names = dict(document, feature_names=document["feature_names"][::-1])
    with pytest.raises(SchemaError):
        deserialize_model(json.dumps(wrong_names).encode())

    outputs = document["params"]["n_classes"]
    leaf_only = {"feature": [-1], "threshold": [0.0], "left": [-1], "right": [-1], "value": [[1.0] * outputs]}
    for tree in document["params"]["trees"]:
        if tree["feature"][0] != -1:
            tree["feature"][0] = 40
            break
    with pytest.raises(SchemaError):
        deserialize_model(json.dumps(document).encode())
    document["params"]["trees"] = [leaf_only]
    deserialize_model(json.dumps(document).encode())


@pytest.mark.parametrize("family", ["svm", "mlp"])
def test_model_files_with_the_wrong_input_width(blobs, family):
    document = json.loads(serialize_model(train(fast_config(family), blobs)))
    document["params"]["weights"] = (
        document["params"]["weights"][:3] if family == "svm"
        else [document["params"]["weights"][0][:3], *document["params"]["weights"][1:]]
    )
    with pytest.raises(SchemaError, match="input features"):
        deserialize_model(json.dumps(document).encode())


def test_single_leaf_forest_predicts_its_leaf_class(blobs):
    document = json.loads(serialize_model(train(fast_config("rf"), blobs)))
    value = [0.0] * document["params"]["n_classes"]
    value[2] = 1.0
    leaf = {"feature": [-1], "threshold": [0.0], "left": [-1], "right": [-1], "value": [value]}
    document["params"]["trees"] = [leaf]
    model = deserialize_model(json.dumps(document).encode())

    X = np.random.default_rng(0).uniform(-1e6, 1e6, size=(50, blobs.set_id.size))
    predicted, scores = predict_batch(model, X)
    assert predicted.tolist() == [2] * 50
    assert np.array_equal(scores, np.tile(value, (50, 1)))
    assert predict(model, X[0]).class_index == 2
