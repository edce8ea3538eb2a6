"""
Corpus Generation & Ingestion

WHAT:
    - FamilyProfile / ProfileSet: per-class distributions over PE header
      parameters, loaded from a JSON file
    - synthesize / gen_corpus: seeded synthetic corpora written via write_pe
    - ingest: hash, dedup and label a local directory of samples

Section bodies are filler; only headers carry signal.
"""

import fnmatch
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from peguard.core.errors import ProfileInvalid, SchemaMismatch
from peguard.ml.rng import make_rng
from peguard.services.labels import BENIGN, CLASS_NAMES
from peguard.services.manifest import CorpusManifest, ManifestRecord, content_hash
from peguard.services.pe_format import (
    CODE_SECTION_FLAGS,
    DATA_SECTION_FLAGS,
    ImportEntry,
    PaddingPolicy,
    PeSpec,
    SectionPlan,
    build_spec,
    write_pe,
)

logger = logging.getLogger(__name__)

PROFILE_SCHEMA_VERSION = 1
Tier = Literal["distinct", "overlapping", "benign-like"]

PAGE = 0x200
UNINITIALIZED_PAGE = 0x1000
OVERLAP_WIDENING = 1.5
MAX_RESAMPLES = 16
MANIFEST_NAME = "manifest.tsv"

DLL_POOL = (
    "kernel32.dll", "user32.dll", "advapi32.dll", "shell32.dll", "ole32.dll",
    "oleaut32.dll", "ws2_32.dll", "wininet.dll", "crypt32.dll", "bcrypt.dll",
    "ntdll.dll", "gdi32.dll", "comctl32.dll", "shlwapi.dll", "msvcrt.dll",
    "rpcrt4.dll", "version.dll", "netapi32.dll", "mpr.dll", "iphlpapi.dll",
)
DATA_SECTION_NAMES = (".rdata", ".data", ".rsrc", ".reloc", ".pdata", ".tls", ".didat", ".gfids")

# (lower, upper) bounds for every range parameter of a profile.
RANGE_BOUNDS = {
    "linker_major": (0, 255),
    "linker_minor": (0, 255),
    "sections": (1, 64),
    "exec_sections": (1, 64),
    "virtual_size_log2": (9.0, 24.0),
    "raw_pages": (1, 256),
    "uninitialized_pages": (0, 4096),
    "header_extra_pages": (0, 16),
    "entry_offset": (0, 1 << 24),
    "import_dlls": (0, len(DLL_POOL)),
    "import_functions": (1, 512),
}


# =========================
# PROFILES
# =========================
class FamilyProfile(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    tier: Tier = "distinct"
    pe32_plus: float = Field(default=0.0, ge=0.0, le=1.0)
    coff_characteristics: Tuple[int, ...] = Field(min_length=1)
    dll_characteristics: Tuple[int, ...] = Field(min_length=1)
    linker_major: Tuple[int, int]
    linker_minor: Tuple[int, int] = (0, 0)
    sections: Tuple[int, int]
    exec_sections: Tuple[int, int] = (1, 1)
    virtual_size_log2: Tuple[float, float]
    raw_pages: Tuple[int, int]
    uninitialized_pages: Tuple[int, int] = (0, 0)
    header_extra_pages: Tuple[int, int] = (0, 0)
    entry_offset: Tuple[int, int] = (0, 0)
    import_dlls: Tuple[int, int]
    import_functions: Tuple[int, int]

    @model_validator(mode="after")
    def _check(self) -> "FamilyProfile":
        if self.name not in CLASS_NAMES:
            raise ValueError(f"name must be one of {CLASS_NAMES}")
        for flag in (*self.coff_characteristics, *self.dll_characteristics):
            if not 0 <= flag <= 0xFFFF:
                raise ValueError(f"characteristics value {flag} is not a u16")
        for key, (low, high) in RANGE_BOUNDS.items():
            lo, hi = getattr(self, key)
            if lo > hi:
                raise ValueError(f"{key}: lower bound {lo} exceeds upper bound {hi}")
            if lo < low or hi > high:
                raise ValueError(f"{key}: [{lo}, {hi}] outside [{low}, {high}]")
        if self.exec_sections[0] > self.sections[1]:
            raise ValueError("exec_sections cannot exceed sections")
        return self

    def widened(self, factor: float = OVERLAP_WIDENING) -> "FamilyProfile":
        """Every range stretched about its midpoint; integer ranges grow by at least 1 each way."""
        update = {}
        for key, (low, high) in RANGE_BOUNDS.items():
            lo, hi = getattr(self, key)
            mid, half = (lo + hi) / 2, (hi - lo) / 2 * factor
            if isinstance(low, int):
                half = max(half, 1.0)
                lo, hi = int(np.floor(mid - half)), int(np.ceil(mid + half))
            else:
                lo, hi = mid - half, mid + half
            update[key] = (max(lo, low), min(hi, high))
        return self.model_copy(update=update)


class ProfileSet(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: int = PROFILE_SCHEMA_VERSION
    default_counts: Dict[str, int]
    profiles: Tuple[FamilyProfile, ...]

    @model_validator(mode="after")
    def _check(self) -> "ProfileSet":
        if self.schema_version != PROFILE_SCHEMA_VERSION:
            raise ValueError(f"schema_version {self.schema_version} unsupported")
        names = [p.name for p in self.profiles]
        if sorted(names) != sorted(CLASS_NAMES):
            raise ValueError(f"need exactly one profile per class {CLASS_NAMES}, got {names}")
        if self.profile(BENIGN).tier != "distinct":
            raise ValueError("the Benign profile must be tier 'distinct'")
        return self

    def profile(self, name: str) -> FamilyProfile:
        for p in self.profiles:
            if p.name == name:
                return p
        raise KeyError(name)

    def with_tier(self, name: str, tier: str) -> "ProfileSet":
        profiles = tuple(p.model_copy(update={"tier": tier}) if p.name == name else p for p in self.profiles)
        return ProfileSet(schema_version=self.schema_version, default_counts=self.default_counts, profiles=profiles)

    def distinct_only(self) -> "ProfileSet":
        result = self
        for p in self.profiles:
            result = result.with_tier(p.name, "distinct")
        return result

    def resolved(self, name: str) -> FamilyProfile:
        """The distributions actually sampled for `name` after applying its tier."""
        p = self.profile(name)
        if p.tier == "benign-like":
            return self.profile(BENIGN).model_copy(update={"name": name, "tier": "benign-like"})
        if p.tier == "overlapping":
            return p.widened()
        return p


def load_profiles(path: Path) -> ProfileSet:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return ProfileSet.model_validate(raw)
    except json.JSONDecodeError as e:
        raise ProfileInvalid(f"{path} is not JSON: {e}")
    except ValidationError as e:
        raise ProfileInvalid(f"{path}: {e}")


def scaled_counts(counts: Dict[str, int], scale: float) -> Dict[str, int]:
    return {name: max(1, int(round(c * scale))) for name, c in counts.items()}


# =========================
# SAMPLING
# =========================
def _uniform_int(rng: np.random.Generator, bounds: Tuple[int, int]) -> int:
    return int(rng.integers(bounds[0], bounds[1] + 1))


def sample_spec(profile: FamilyProfile, rng: np.random.Generator) -> PeSpec:
    """Draw one PeSpec from a resolved profile."""
    pe32_plus = bool(rng.random() < profile.pe32_plus)
    n_sections = _uniform_int(rng, profile.sections)
    n_exec = min(_uniform_int(rng, profile.exec_sections), n_sections)

    plans = []
    for i in range(n_sections):
        code = i < n_exec
        if code:
            name = ".text" if i == 0 else f".text{i}"
        else:
            name = DATA_SECTION_NAMES[(i - n_exec) % len(DATA_SECTION_NAMES)]
        raw = _uniform_int(rng, profile.raw_pages) * PAGE
        virtual = int(2 ** rng.uniform(*profile.virtual_size_log2))
        plans.append(SectionPlan(name, virtual, raw, CODE_SECTION_FLAGS if code else DATA_SECTION_FLAGS))

    n_dlls = _uniform_int(rng, profile.import_dlls)
    dlls = rng.choice(len(DLL_POOL), size=n_dlls, replace=False) if n_dlls else []
    imports = [ImportEntry(DLL_POOL[d], _uniform_int(rng, profile.import_functions)) for d in dlls]

    return build_spec(
        plans,
        imports,
        pe32_plus=pe32_plus,
        time_date_stamp=int(rng.integers(0x40000000, 0x66000000)),
        coff_characteristics=int(rng.choice(profile.coff_characteristics)),
        major_linker_version=_uniform_int(rng, profile.linker_major),
        minor_linker_version=_uniform_int(rng, profile.linker_minor),
        size_of_uninitialized_data=_uniform_int(rng, profile.uninitialized_pages) * UNINITIALIZED_PAGE,
        entry_point_offset=_uniform_int(rng, profile.entry_offset),
        dll_characteristics=int(rng.choice(profile.dll_characteristics)),
        extra_header_bytes=_uniform_int(rng, profile.header_extra_pages) * PAGE,
        padding=PaddingPolicy(),
    )


def _check_counts(counts: Dict[str, int]) -> None:
    for name in counts:
        if name not in CLASS_NAMES:
            raise ProfileInvalid(f"unknown class in counts: {name!r}")
    for name in CLASS_NAMES:
        if counts.get(name, 0) < 1:
            raise ProfileInvalid(f"count for {name} must be >= 1, got {counts.get(name, 0)}")


def synthesize(
    profiles: ProfileSet,
    counts: Optional[Dict[str, int]] = None,
    seed: int = 0,
    jobs: int = 1,
) -> List[Tuple[str, bytes]]:
    """
    (label, file bytes) for every requested sample, in class-table order.

    File i of class k is drawn from make_rng(seed, k, i, attempt); attempt
    only advances when the bytes collide with an earlier file's hash.
    """
    counts = dict(profiles.default_counts if counts is None else counts)
    _check_counts(counts)
    resolved = {name: profiles.resolved(name) for name in CLASS_NAMES}
    jobs_list = [(k, name, i) for k, name in enumerate(CLASS_NAMES) for i in range(counts[name])]

    def draw(key: Tuple[int, str, int], attempt: int = 0) -> bytes:
        k, name, i = key
        return write_pe(sample_spec(resolved[name], make_rng(seed, k, i, attempt)))

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        drawn = list(pool.map(draw, jobs_list))

    seen = set()
    samples = []
    for key, data in zip(jobs_list, drawn):
        attempt = 0
        while content_hash(data) in seen:
            attempt += 1
            if attempt > MAX_RESAMPLES:
                raise ProfileInvalid("cannot draw a unique file; distributions are too narrow", key[1])
            data = draw(key, attempt)
        seen.add(content_hash(data))
        samples.append((key[1], data))
    logger.info(f"Synthesized {len(samples)} files across {len(counts)} classes (seed {seed})")
    return samples


def sample_path(out_dir: Path, label: str, index: int) -> Path:
    return Path(out_dir) / label / f"{label}_{index:04d}.exe"


def gen_corpus(
    profiles: ProfileSet,
    counts: Optional[Dict[str, int]],
    seed: int,
    out_dir: Path,
    jobs: int = 1,
) -> CorpusManifest:
    """Write the corpus under out_dir/<Label>/ plus out_dir/manifest.tsv."""
    out_dir = Path(out_dir)
    manifest = CorpusManifest()
    index: Dict[str, int] = {}
    for label, data in synthesize(profiles, counts, seed, jobs):
        i = index.get(label, 0)
        index[label] = i + 1
        path = sample_path(out_dir, label, i)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        manifest.add(ManifestRecord(content_hash(data), str(path), label, "synthetic"))
    manifest.save(out_dir / MANIFEST_NAME)
    logger.info(f"Generated corpus in {out_dir}: {manifest.label_counts()}")
    return manifest


# =========================
# INGESTION
# =========================
@dataclass(frozen=True)
class LabelRule:
    pattern: str
    label: str

    @classmethod
    def parse(cls, text: str) -> "LabelRule":
        pattern, sep, label = text.rpartition("=")
        if not sep or not pattern or label not in CLASS_NAMES:
            raise SchemaMismatch(f"label rule {text!r} must be PATTERN=LABEL with LABEL in {CLASS_NAMES}")
        return cls(pattern, label)

    def matches(self, relative: str) -> bool:
        return fnmatch.fnmatchcase(relative, self.pattern)


def default_label(relative: Path) -> Optional[str]:
    """A directory component equal to a class name, case-insensitive."""
    by_lower = {name.lower(): name for name in CLASS_NAMES}
    for part in relative.parts[:-1]:
        if part.lower() in by_lower:
            return by_lower[part.lower()]
    return None


@dataclass
class IngestReport:
    manifest: CorpusManifest = field(default_factory=CorpusManifest)
    duplicates: List[str] = field(default_factory=list)
    unlabeled: List[str] = field(default_factory=list)
    unreadable: List[Tuple[str, str]] = field(default_factory=list)

    def lines(self) -> List[str]:
        out = [f"ingested {len(self.manifest)}"]
        out += [f"duplicate {p}" for p in self.duplicates]
        out += [f"unlabeled {p}" for p in self.unlabeled]
        out += [f"unreadable {p} {reason}" for p, reason in self.unreadable]
        return out


def scan_directory(root: Path, label_rules: Sequence[LabelRule] = ()) -> IngestReport:
    root = Path(root)
    report = IngestReport()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        relative = path.relative_to(root)
        try:
            data = path.read_bytes()
        except OSError as e:
            report.unreadable.append((str(path), str(e)))
            continue
        label = next((r.label for r in label_rules if r.matches(relative.as_posix())), None)
        label = label or default_label(relative)
        if label is None:
            report.unlabeled.append(str(path))
            continue
        if not report.manifest.add(ManifestRecord(content_hash(data), str(path), label, "ingested")):
            report.duplicates.append(str(path))

    for p in report.unlabeled:
        logger.warning(f"No label rule matched {p}")
    logger.info(
        f"Ingested {len(report.manifest)} files from {root} "
        f"({len(report.duplicates)} duplicates, {len(report.unlabeled)} unlabeled)"
    )
    return report


def ingest(root: Path, label_rules: Sequence[LabelRule] = ()) -> CorpusManifest:
    return scan_directory(root, label_rules).manifest
