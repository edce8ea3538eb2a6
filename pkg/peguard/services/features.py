"""
Feature Extraction & Datasets

WHAT: Turns parsed PE headers into the four nested feature vectors
      (5/7/10/15 values) and assembles labeled, hash-keyed datasets
WHY: Classifiers consume fixed-length numeric vectors
HOW: One frozen feature table; each set is a prefix of the next
"""

import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from peguard.core.errors import EmptyDataset, PeFormatError, SchemaMismatch, UnsupportedSetId
from peguard.services.labels import CLASS_NAMES, ClassLabel
from peguard.services.manifest import CorpusManifest, content_hash
from peguard.services.pe_format import (
    PeFile,
    count_dll_calls,
    count_imported_dlls,
    parse_pe,
    validate_pe,
)

logger = logging.getLogger(__name__)

FEATURE_SCHEMA_VERSION = 1

# Changing this table is a versioned schema change (bump FEATURE_SCHEMA_VERSION).
FEATURE_TABLE = (
    # FS5
    "NumberOfSections",
    "SizeOfCode",
    "SizeOfHeaders",
    "SizeOfImage",
    "SizeOfInitializedData",
    # FS7
    "AddressOfEntryPoint",
    "CoffCharacteristics",
    # FS10
    "DllCharacteristics",
    "SizeOfUninitializedData",
    "TotalDLLCalls",
    # FS15
    "BaseOfCode",
    "MajorLinkerVersion",
    "NumberOfImportedDlls",
    "NumberOfExecutableSections",
    "MeanSectionVirtualSize",
)

DLL_CALL_MODES = ("symbols", "dlls")
SCALE_EPSILON = 1e-12


class FeatureSetId(str, Enum):
    FS5 = "fs5"
    FS7 = "fs7"
    FS10 = "fs10"
    FS15 = "fs15"

    @property
    def size(self) -> int:
        return int(self.value[2:])

    @classmethod
    def parse(cls, value: Union["FeatureSetId", str, int]) -> "FeatureSetId":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower()
        if not text.startswith("fs"):
            text = "fs" + text
        try:
            return cls(text)
        except ValueError:
            raise UnsupportedSetId(f"unsupported feature set {value!r}; expected fs5, fs7, fs10 or fs15")

    @classmethod
    def from_size(cls, size: int) -> "FeatureSetId":
        return cls.parse(f"fs{size}")


def feature_names(set_id) -> Tuple[str, ...]:
    return FEATURE_TABLE[:FeatureSetId.parse(set_id).size]


# =========================
# VECTORS
# =========================
@dataclass(frozen=True)
class FeatureVector:
    set_id: FeatureSetId
    values: Tuple[float, ...]
    source_id: str = ""

    def __post_init__(self):
        if len(self.values) != self.set_id.size:
            raise SchemaMismatch(
                f"{self.set_id.name} needs {self.set_id.size} values, got {len(self.values)}"
            )
        if not all(math.isfinite(v) for v in self.values):
            raise SchemaMismatch(f"non-finite feature value in {self.source_id or 'vector'}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def _all_features(pe: PeFile, dll_calls: str) -> Tuple[float, ...]:
    opt, coff, sections = pe.optional, pe.coff, pe.sections
    if dll_calls == "symbols":
        total_calls = count_dll_calls(pe)
    elif dll_calls == "dlls":
        total_calls = count_imported_dlls(pe)
    else:
        raise SchemaMismatch(f"dll_calls must be one of {DLL_CALL_MODES}")

    mean_virtual_size = (
        sum(s.virtual_size for s in sections) / len(sections) if sections else 0.0
    )
    values = (
        coff.number_of_sections,
        opt.size_of_code,
        opt.size_of_headers,
        opt.size_of_image,
        opt.size_of_initialized_data,
        opt.address_of_entry_point,
        coff.characteristics,
        opt.dll_characteristics,
        opt.size_of_uninitialized_data,
        total_calls,
        opt.base_of_code,
        opt.major_linker_version,
        count_imported_dlls(pe),
        sum(1 for s in sections if s.is_code),
        mean_virtual_size,
    )
    return tuple(float(v) for v in values)


def extract_features(pe: PeFile, set_id, source_id: str = "", dll_calls: str = "symbols") -> FeatureVector:
    """
    Ordered header features for one file.

    `dll_calls` picks what fills the TotalDLLCalls slot: imported symbols
    (default) or distinct DLLs.
    """
    set_id = FeatureSetId.parse(set_id)
    values = _all_features(pe, dll_calls)[:set_id.size]
    return FeatureVector(set_id=set_id, values=values, source_id=source_id)


# =========================
# DATASETS
# =========================
@dataclass(frozen=True)
class LabeledRow:
    vector: FeatureVector
    label: ClassLabel


@dataclass(frozen=True)
class SkippedFile:
    hash: str
    path: str
    reason: str


@dataclass(frozen=True)
class LabeledDataset:
    set_id: FeatureSetId
    rows: Tuple[LabeledRow, ...]
    class_names: Tuple[str, ...] = CLASS_NAMES
    class_counts: Dict[str, int] = field(init=False, compare=False)

    def __post_init__(self):
        counts = {name: 0 for name in self.class_names}
        for row in self.rows:
            if row.vector.set_id != self.set_id:
                raise SchemaMismatch(
                    f"row {row.vector.source_id[:12]} is {row.vector.set_id.name}, dataset is {self.set_id.name}"
                )
            label = row.label
            if not 0 <= label.index < len(self.class_names) or self.class_names[label.index] != label.name:
                raise SchemaMismatch(f"label {label} does not match the class table")
            counts[label.name] += 1
        object.__setattr__(self, "rows", tuple(self.rows))
        object.__setattr__(self, "class_counts", counts)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def num_features(self) -> int:
        return self.set_id.size

    def matrix(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, self.num_features))
        return np.array([row.vector.values for row in self.rows], dtype=np.float64)

    def label_indices(self) -> np.ndarray:
        return np.array([row.label.index for row in self.rows], dtype=np.int64)

    def hashes(self) -> List[str]:
        return [row.vector.source_id for row in self.rows]

    def subset(self, indices: Iterable[int]) -> "LabeledDataset":
        return LabeledDataset(self.set_id, tuple(self.rows[i] for i in indices), self.class_names)

    def sorted_by_hash(self) -> "LabeledDataset":
        return LabeledDataset(
            self.set_id, tuple(sorted(self.rows, key=lambda r: r.vector.source_id)), self.class_names
        )

    def project(self, set_id) -> "LabeledDataset":
        """Restrict to a smaller feature set; valid because sets are nested."""
        set_id = FeatureSetId.parse(set_id)
        if set_id.size > self.set_id.size:
            raise UnsupportedSetId(f"cannot widen {self.set_id.name} to {set_id.name}")
        rows = tuple(
            LabeledRow(FeatureVector(set_id, r.vector.values[:set_id.size], r.vector.source_id), r.label)
            for r in self.rows
        )
        return LabeledDataset(set_id, rows, self.class_names)

    def relabel(
        self,
        mapping: Callable[[ClassLabel], Optional[str]],
        class_names: Sequence[str],
    ) -> "LabeledDataset":
        """Map each label to a new class name (None drops the row)."""
        class_names = tuple(class_names)
        rows = []
        for row in self.rows:
            name = mapping(row.label)
            if name is not None:
                rows.append(LabeledRow(row.vector, ClassLabel.from_name(name, class_names)))
        return LabeledDataset(self.set_id, tuple(rows), class_names)


def _featurize(
    digest: str,
    path: str,
    label: str,
    data: bytes,
    set_id: FeatureSetId,
    dll_calls: str,
) -> Union[LabeledRow, SkippedFile]:
    try:
        pe = parse_pe(data)
    except PeFormatError as e:
        return SkippedFile(digest, path, f"{type(e).__name__}: {e}")

    violations = validate_pe(pe)
    if violations:
        return SkippedFile(digest, path, "invalid: " + "; ".join(str(v) for v in violations))

    vector = extract_features(pe, set_id, source_id=digest, dll_calls=dll_calls)
    return LabeledRow(vector, ClassLabel.from_name(label))


def _assemble(
    results: Iterable[Union[LabeledRow, SkippedFile]],
    set_id: FeatureSetId,
) -> Tuple[LabeledDataset, List[SkippedFile]]:
    rows: Dict[str, LabeledRow] = {}
    skipped: List[SkippedFile] = []
    for result in results:
        if isinstance(result, SkippedFile):
            logger.warning(f"Skipping {result.path or result.hash[:12]}: {result.reason}")
            skipped.append(result)
            continue
        digest = result.vector.source_id
        if digest in rows:
            if rows[digest].label != result.label:
                logger.warning(f"Hash {digest[:12]} carries conflicting labels; keeping {rows[digest].label.name}")
            continue
        rows[digest] = result

    dataset = LabeledDataset(set_id, tuple(rows[h] for h in sorted(rows)))
    logger.info(f"Assembled {set_id.name} dataset: {len(dataset)} rows, {len(skipped)} skipped")
    return dataset, skipped


def build_dataset(
    manifest: CorpusManifest,
    set_id,
    jobs: int = 1,
    dll_calls: str = "symbols",
) -> Tuple[LabeledDataset, List[SkippedFile]]:
    """
    One row per unique sample, ordered by hash. Unreadable, corrupt or
    invalid files go to the skip report instead of failing the build.
    """
    set_id = FeatureSetId.parse(set_id)

    def load(record) -> Union[LabeledRow, SkippedFile]:
        try:
            data = Path(record.path).read_bytes()
        except OSError as e:
            return SkippedFile(record.hash, record.path, f"unreadable: {e}")
        digest = content_hash(data)
        if digest != record.hash:
            return SkippedFile(record.hash, record.path, "content hash differs from manifest")
        return _featurize(digest, record.path, record.label, data, set_id, dll_calls)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(load, manifest.records))
    return _assemble(results, set_id)


def dataset_from_samples(
    samples: Iterable[Tuple[str, bytes]],
    set_id,
    dll_calls: str = "symbols",
) -> Tuple[LabeledDataset, List[SkippedFile]]:
    """Same as build_dataset for in-memory (label_name, file bytes) pairs."""
    set_id = FeatureSetId.parse(set_id)
    results = (
        _featurize(content_hash(data), "", label, data, set_id, dll_calls)
        for label, data in samples
    )
    return _assemble(results, set_id)


# =========================
# SCALING
# =========================
@dataclass(frozen=True)
class ScalerParams:
    set_id: FeatureSetId
    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    def transform(self, matrix: np.ndarray) -> np.ndarray:
        return (np.asarray(matrix, dtype=np.float64) - np.asarray(self.mean)) / np.asarray(self.std)


def fit_scaler(train: LabeledDataset) -> ScalerParams:
    """Per-feature mean/std from training rows only; std floored at SCALE_EPSILON."""
    if len(train) == 0:
        raise EmptyDataset("cannot fit a scaler on an empty dataset")
    matrix = train.matrix()
    std = np.maximum(matrix.std(axis=0), SCALE_EPSILON)
    return ScalerParams(train.set_id, tuple(matrix.mean(axis=0).tolist()), tuple(std.tolist()))


def apply_scaler(params: ScalerParams, vector: FeatureVector) -> FeatureVector:
    if vector.set_id != params.set_id:
        raise SchemaMismatch(f"scaler is {params.set_id.name}, vector is {vector.set_id.name}")
    scaled = params.transform(vector.as_array()[None, :])[0]
    return FeatureVector(vector.set_id, tuple(scaled.tolist()), vector.source_id)


# =========================
# CSV
# =========================
def export_csv(dataset: LabeledDataset) -> str:
    """`hash,<feature names>,label_index,label_name`, rows in ascending hash order."""
    columns = ["hash", *feature_names(dataset.set_id), "label_index", "label_name"]
    records = [
        (row.vector.source_id, *row.vector.values, row.label.index, row.label.name)
        for row in sorted(dataset.rows, key=lambda r: r.vector.source_id)
    ]
    frame = pd.DataFrame.from_records(records, columns=columns)
    return frame.to_csv(index=False, lineterminator="\n")


def import_csv(text: str) -> LabeledDataset:
    try:
        frame = pd.read_csv(
            io.StringIO(text),
            dtype={"hash": str, "label_name": str},
            float_precision="round_trip",
            keep_default_na=False,
        )
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise SchemaMismatch(f"unreadable dataset CSV: {e}")

    columns = list(frame.columns)
    if len(columns) < 3 or columns[0] != "hash" or columns[-2:] != ["label_index", "label_name"]:
        raise SchemaMismatch("header must be hash,<features>,label_index,label_name")
    names = tuple(columns[1:-2])
    try:
        set_id = FeatureSetId.from_size(len(names))
    except UnsupportedSetId:
        raise SchemaMismatch(f"{len(names)} feature columns do not match any feature set")
    if names != feature_names(set_id):
        raise SchemaMismatch(f"feature columns differ from the {set_id.name} table")

    rows = []
    for record in frame.itertuples(index=False):
        digest, *values, label_index, label_name = record
        label = ClassLabel.from_name(str(label_name))
        try:
            index = int(label_index)
            numbers = tuple(float(v) for v in values)
        except (TypeError, ValueError) as e:
            raise SchemaMismatch(f"row {digest}: {e}")
        if index != label.index:
            raise SchemaMismatch(f"row {digest}: label_index {label_index} != {label_name}")
        if any(v < 0 for v in numbers):
            raise SchemaMismatch(f"row {digest}: negative feature value")
        vector = FeatureVector(set_id, numbers, str(digest))
        rows.append(LabeledRow(vector, label))
    return LabeledDataset(set_id, tuple(rows))
