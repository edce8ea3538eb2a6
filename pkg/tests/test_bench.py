import pytest

from conftest import make_spec
from peguard.ml import ClassifierConfig, train
from peguard.services.bench import MIN_SAMPLES, STAGES, bench
from peguard.services.pe_format import write_pe


@pytest.fixture(scope="module")
def files(small_samples):
    return [data for _, data in small_samples[:10]]


def _model(small_dataset, n_trees):
    return train(ClassifierConfig.for_family("rf", n_trees=n_trees), small_dataset)


def test_few_files_are_cycled_up_to_the_floor(files, small_dataset):
    report = bench(files, _model(small_dataset, 5))
    assert list(report.stages) == list(STAGES)
    assert all(t.samples == MIN_SAMPLES for t in report.stages.values())
    assert all(t.mean_ms > 0 and t.median_ms > 0 for t in report.stages.values())


def test_larger_forests_predict_slower(files, small_dataset):
    one = bench(files, _model(small_dataset, 1), min_samples=200)
    many = bench(files, _model(small_dataset, 100), min_samples=200)
    assert many.stages["predict"].median_ms > one.stages["predict"].median_ms


def test_bench_needs_a_file(small_dataset):
    with pytest.raises(ValueError):
        bench([], _model(small_dataset, 1))


def test_report_lines(small_dataset):
    report = bench([write_pe(make_spec())], _model(small_dataset, 3), min_samples=5, warmup=1)
    assert report.lines()[0].startswith("parse mean_ms=")
    assert report.lines()[0].endswith("samples=5")


@pytest.mark.parametrize("family", ["rf", "gbt"])
def test_default_tree_models_meet_the_latency_budget(files, small_dataset, family):
    model = train(ClassifierConfig.for_family(family), small_dataset)
    report = bench(files, model)
    assert report.stages["predict"].mean_ms <= 50
    assert report.stages["parse"].mean_ms + report.stages["extract"].mean_ms <= 200
