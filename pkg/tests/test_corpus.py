import json

import numpy as np
import pytest

from conftest import SMALL_COUNTS, TABLE_COUNTS, make_spec
from peguard.core.errors import ProfileInvalid, SchemaMismatch
from peguard.ml.rng import make_rng
from peguard.services.corpus import (
    MANIFEST_NAME,
    LabelRule,
    gen_corpus,
    ingest,
    load_profiles,
    sample_spec,
    scaled_counts,
    scan_directory,
    synthesize,
)
from peguard.services.features import FeatureSetId, dataset_from_samples
from peguard.services.labels import BENIGN, CLASS_NAMES, FAMILIES
from peguard.services.manifest import CorpusManifest, content_hash
from peguard.services.pe_format import parse_pe, validate_pe, write_pe


def _centroids(dataset):
    X, y = dataset.matrix(), dataset.label_indices()
    return {name: X[y == k] for k, name in enumerate(CLASS_NAMES)}


# =========================
# PROFILES
# =========================
def test_default_profiles_load(profiles):
    assert profiles.default_counts == TABLE_COUNTS
    assert profiles.profile("WannaCry").tier == "benign-like"
    assert {p.name for p in profiles.profiles if p.tier == "overlapping"} == {"Netwalker", "Sodinokibi"}
    assert all(p.tier == "distinct" for p in profiles.distinct_only().profiles)


def test_resolved_tiers(profiles):
    benign = profiles.profile(BENIGN)
    wannacry = profiles.resolved("WannaCry")
    assert wannacry.linker_major == benign.linker_major
    assert wannacry.dll_characteristics == benign.dll_characteristics

    raw = profiles.profile("Netwalker")
    wide = profiles.resolved("Netwalker")
    assert wide.linker_major[0] <= raw.linker_major[0] - 1
    assert wide.linker_major[1] >= raw.linker_major[1] + 1
    assert wide.virtual_size_log2[1] - wide.virtual_size_log2[0] >= raw.virtual_size_log2[1] - raw.virtual_size_log2[0]


def _profile_json(profiles, **changes):
    raw = json.loads(profiles.model_dump_json())
    for name, update in changes.items():
        for p in raw["profiles"]:
            if p["name"] == name:
                p.update(update)
    return raw


@pytest.mark.parametrize(
    "changes",
    [
        {"Babuk": {"linker_major": [9, 3]}},
        {"Hive": {"sections": [0, 4]}},
        {"Chaos": {"dll_characteristics": [0x10000]}},
        {"DJVu": {"coff_characteristics": []}},
        {"LockBit": {"colour": "red"}},
        {"Benign": {"tier": "overlapping"}},
    ],
)
def test_invalid_profiles_are_rejected(profiles, tmp_path, changes):
    path = tmp_path / "profiles.json"
    path.write_text(json.dumps(_profile_json(profiles, **changes)))
    with pytest.raises(ProfileInvalid):
        load_profiles(path)


def test_missing_class_and_bad_json(profiles, tmp_path):
    raw = _profile_json(profiles)
    raw["profiles"] = raw["profiles"][1:]
    path = tmp_path / "short.json"
    path.write_text(json.dumps(raw))
    with pytest.raises(ProfileInvalid):
        load_profiles(path)
    path.write_text("{not json")
    with pytest.raises(ProfileInvalid):
        load_profiles(path)


def test_counts_must_cover_every_class(profiles):
    with pytest.raises(ProfileInvalid):
        synthesize(profiles, {name: 1 for name in FAMILIES})
    with pytest.raises(ProfileInvalid):
        synthesize(profiles, {**SMALL_COUNTS, "Ryuk": 3})


def test_scaled_counts_keep_every_class():
    scaled = scaled_counts(TABLE_COUNTS, 0.01)
    assert scaled["Babuk"] == 1
    assert scaled[BENIGN] == 20


# =========================
# SYNTHESIS
# =========================
def test_synthesis_is_deterministic(profiles):
    counts = {name: 3 for name in CLASS_NAMES}
    a = synthesize(profiles, counts, seed=5)
    b = synthesize(profiles, counts, seed=5, jobs=4)
    c = synthesize(profiles, counts, seed=6)
    assert a == b
    assert a != c
    assert [label for label, _ in a] == [name for name in CLASS_NAMES for _ in range(3)]


def test_synthesized_files_are_valid_and_unique(small_samples):
    hashes = set()
    for label, data in small_samples:
        pe = parse_pe(data)
        assert validate_pe(pe) == [], label
        hashes.add(content_hash(data))
    assert len(hashes) == len(small_samples) == sum(SMALL_COUNTS.values())


def test_sampled_specs_round_trip(profiles):
    for k, name in enumerate(CLASS_NAMES):
        spec = sample_spec(profiles.resolved(name), make_rng(3, k))
        assert parse_pe(write_pe(spec)).layout() == spec.layout()


def test_distinct_families_are_separated(distinct_small_dataset):
    """Every pair of distinct-tier centroids lies at least 3 pooled stds apart."""
    groups = _centroids(distinct_small_dataset)
    for i, a in enumerate(CLASS_NAMES):
        for b in CLASS_NAMES[i + 1:]:
            gap = np.abs(groups[a].mean(axis=0) - groups[b].mean(axis=0))
            pooled = np.sqrt((groups[a].var(axis=0) + groups[b].var(axis=0)) / 2)
            with np.errstate(divide="ignore", invalid="ignore"):
                separation = np.where(pooled > 0, gap / pooled, np.where(gap > 0, np.inf, 0.0))
            assert np.linalg.norm(separation) >= 3.0, (a, b)


def test_benign_like_family_sits_next_to_benign(small_dataset):
    scaled = small_dataset.matrix()
    scaled = (scaled - scaled.mean(axis=0)) / np.where(scaled.std(axis=0) > 0, scaled.std(axis=0), 1.0)
    y = small_dataset.label_indices()
    centroids = {name: scaled[y == k].mean(axis=0) for k, name in enumerate(CLASS_NAMES)}
    distances = {
        name: np.linalg.norm(centroids["WannaCry"] - c) for name, c in centroids.items() if name != "WannaCry"
    }
    assert min(distances, key=distances.get) == BENIGN


@pytest.mark.slow
def test_default_corpus_size(full_dataset):
    assert len(full_dataset) == 9 * 140 - 20 + 2000
    assert full_dataset.class_counts == TABLE_COUNTS


# =========================
# ON DISK
# =========================
def test_gen_corpus_writes_files_and_manifest(profiles, tmp_path):
    counts = {name: 2 for name in CLASS_NAMES}
    manifest = gen_corpus(profiles, counts, seed=1, out_dir=tmp_path)
    assert len(manifest) == 20
    assert (tmp_path / "Babuk" / "Babuk_0001.exe").is_file()
    assert {r.origin for r in manifest} == {"synthetic"}

    saved = CorpusManifest.load(tmp_path / MANIFEST_NAME)
    assert saved.entries() == manifest.entries()
    for record in saved:
        with open(record.path, "rb") as f:
            assert content_hash(f.read()) == record.hash

    again = gen_corpus(profiles, counts, seed=1, out_dir=tmp_path / "again")
    assert [r.hash for r in again] == [r.hash for r in manifest]


def test_reingest_matches_generated_manifest(profiles, tmp_path):
    manifest = gen_corpus(profiles, {name: 2 for name in CLASS_NAMES}, seed=2, out_dir=tmp_path)
    report = scan_directory(tmp_path)
    assert report.manifest.entries() == manifest.entries()
    # the manifest file itself has no label directory
    assert report.unlabeled == [str(tmp_path / MANIFEST_NAME)]


def test_ingest_drops_duplicates_and_unlabeled(tmp_path):
    pe = write_pe(make_spec())
    (tmp_path / "hive").mkdir()
    (tmp_path / "misc").mkdir()
    (tmp_path / "hive" / "a.bin").write_bytes(pe)
    (tmp_path / "hive" / "copy.bin").write_bytes(pe)
    (tmp_path / "misc" / "b.bin").write_bytes(b"anything at all")

    report = scan_directory(tmp_path)
    assert [r.label for r in report.manifest] == ["Hive"]
    assert report.duplicates == [str(tmp_path / "hive" / "copy.bin")]
    assert report.unlabeled == [str(tmp_path / "misc" / "b.bin")]
    assert report.lines()[0] == "ingested 1"


def test_label_rules_take_precedence(tmp_path):
    (tmp_path / "hive").mkdir()
    (tmp_path / "hive" / "x.exe").write_bytes(b"one")
    (tmp_path / "drop").mkdir()
    (tmp_path / "drop" / "y.dll").write_bytes(b"two")
    rules = [LabelRule.parse("hive/*.exe=LockBit"), LabelRule.parse("*.dll=Benign")]
    manifest = ingest(tmp_path, rules)
    assert sorted(r.label for r in manifest) == ["Benign", "LockBit"]


def test_empty_directory_gives_empty_manifest(tmp_path):
    assert len(ingest(tmp_path)) == 0


@pytest.mark.parametrize("text", ["nolabel", "=Benign", "*.exe=Ryuk"])
def test_bad_label_rules(text):
    with pytest.raises(SchemaMismatch):
        LabelRule.parse(text)


def test_synthesized_dataset_has_no_skips(profiles):
    samples = synthesize(profiles, {name: 2 for name in CLASS_NAMES}, seed=4)
    dataset, skipped = dataset_from_samples(samples, FeatureSetId.FS15)
    assert not skipped
    assert len(dataset) == 20


def test_merged_manifests_stay_hash_unique(profiles, tmp_path):
    counts = {name: 2 for name in CLASS_NAMES}
    first = gen_corpus(profiles, counts, seed=5, out_dir=tmp_path / "a")
    rerun = gen_corpus(profiles, counts, seed=5, out_dir=tmp_path / "b")
    other = gen_corpus(profiles, counts, seed=6, out_dir=tmp_path / "c")

    # same bytes under new paths: the earlier records win
    assert first.merge(rerun).entries() == first.entries()

    merged = first.merge(other)
    hashes = [r.hash for r in merged]
    assert hashes == sorted(set(hashes))
    assert set(hashes) == {r.hash for r in first} | {r.hash for r in other}
    assert merged.merge(merged).entries() == merged.entries()
    assert len(first) == 20
