from pathlib import Path

import numpy as np
import pytest

from peguard.core.config import DEFAULT_PROFILES
from peguard.services.corpus import load_profiles, synthesize
from peguard.services.features import (
    FeatureSetId,
    FeatureVector,
    LabeledDataset,
    LabeledRow,
    dataset_from_samples,
)
from peguard.services.labels import BENIGN, CLASS_NAMES, ClassLabel
from peguard.services.pe_format import (
    CODE_SECTION_FLAGS,
    ImportEntry,
    PaddingPolicy,
    SectionPlan,
    build_spec,
)

SMALL_COUNTS = {name: (60 if name == BENIGN else 24) for name in CLASS_NAMES}
TABLE_COUNTS = {name: 140 for name in CLASS_NAMES} | {"BlackCat": 120, BENIGN: 2000}


def make_spec(pe32_plus=False, imports=None, by_ordinal=False, overlay=0, **kwargs):
    """A small valid spec: one code and one data section plus imports."""
    if imports is None:
        imports = [ImportEntry("kernel32.dll", 3), ImportEntry("user32.dll", 2)]
    sections = [
        SectionPlan(".text", 0x1800, 0x400, CODE_SECTION_FLAGS),
        SectionPlan(".data", 0x900, 0x200),
    ]
    padding = PaddingPolicy(overlay_size=overlay, imports_by_ordinal=by_ordinal)
    return build_spec(sections, imports, pe32_plus=pe32_plus, padding=padding, **kwargs)


def synthetic_dataset(counts, n_features=15, seed=0, separation=6.0):
    """Gaussian blobs, one per class, without going through PE files."""
    rng = np.random.default_rng(seed)
    set_id = FeatureSetId.from_size(n_features)
    centers = rng.normal(0.0, separation, size=(len(CLASS_NAMES), n_features))
    rows = []
    for k, name in enumerate(CLASS_NAMES):
        for i in range(counts.get(name, 0)):
            values = centers[k] + rng.normal(size=n_features)
            vector = FeatureVector(set_id, tuple(values.tolist()), f"{k:02d}{i:06d}".ljust(64, "0"))
            rows.append(LabeledRow(vector, ClassLabel.from_index(k)))
    return LabeledDataset(set_id, tuple(rows)).sorted_by_hash()


@pytest.fixture(scope="session")
def profiles():
    return load_profiles(Path(DEFAULT_PROFILES))


@pytest.fixture(scope="session")
def small_samples(profiles):
    return synthesize(profiles, SMALL_COUNTS, seed=7)


@pytest.fixture(scope="session")
def small_dataset(small_samples):
    dataset, skipped = dataset_from_samples(small_samples, FeatureSetId.FS15)
    assert not skipped
    return dataset


@pytest.fixture(scope="session")
def distinct_small_dataset(profiles):
    samples = synthesize(profiles.distinct_only(), SMALL_COUNTS, seed=11)
    return dataset_from_samples(samples, FeatureSetId.FS15)[0]


@pytest.fixture(scope="session")
def table_dataset():
    return synthetic_dataset(TABLE_COUNTS, seed=3)


@pytest.fixture(scope="session")
def full_distinct_dataset(profiles):
    samples = synthesize(profiles.distinct_only(), seed=7)
    return dataset_from_samples(samples, FeatureSetId.FS15)[0]


@pytest.fixture(scope="session")
def full_dataset(profiles):
    return dataset_from_samples(synthesize(profiles, seed=7), FeatureSetId.FS15)[0]
