"""
Corpus Manifest

Line-oriented records `hash<TAB>path<TAB>label_name`, one per unique
sample, ordered by ascending content hash.
"""

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Tuple

from peguard.core.errors import SchemaMismatch
from peguard.services.labels import CLASS_NAMES

logger = logging.getLogger(__name__)

ORIGINS = ("synthetic", "ingested")


def content_hash(data: bytes) -> str:
    """Dedup key: SHA-256 of the whole file."""
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class ManifestRecord:
    hash: str
    path: str
    label: str
    origin: str = "ingested"


class CorpusManifest:
    """Hash-unique, hash-ordered collection of labeled samples."""

    def __init__(self, records: Iterable[ManifestRecord] = ()):
        self._records: Dict[str, ManifestRecord] = {}
        for record in records:
            self.add(record)

    def add(self, record: ManifestRecord) -> bool:
        """Insert a record; returns False when its hash is already present."""
        if record.label not in CLASS_NAMES:
            raise SchemaMismatch(f"label {record.label!r} is not one of the 10 classes")
        if record.origin not in ORIGINS:
            raise SchemaMismatch(f"origin {record.origin!r} must be one of {ORIGINS}")
        if record.hash in self._records:
            return False
        self._records[record.hash] = record
        return True

    def merge(self, other: "CorpusManifest") -> "CorpusManifest":
        merged = CorpusManifest(self)
        for record in other:
            merged.add(record)
        return merged

    @property
    def records(self) -> List[ManifestRecord]:
        return [self._records[h] for h in sorted(self._records)]

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, digest: str) -> bool:
        return digest in self._records

    def label_counts(self) -> Dict[str, int]:
        counts = {name: 0 for name in CLASS_NAMES}
        for record in self._records.values():
            counts[record.label] += 1
        return counts

    def entries(self) -> List[Tuple[str, str, str]]:
        """(hash, path, label) triples, i.e. the manifest without origin."""
        return [(r.hash, r.path, r.label) for r in self.records]

    # -------------------- TSV --------------------

    def to_text(self) -> str:
        return "".join(f"{r.hash}\t{r.path}\t{r.label}\n" for r in self.records)

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        logger.info(f"Wrote manifest with {len(self)} records to {path}")
        return path

    @classmethod
    def from_text(cls, text: str, origin: str = "ingested") -> "CorpusManifest":
        manifest = cls()
        for number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise SchemaMismatch(f"manifest line {number}: expected 3 TAB-separated fields")
            digest, path, label = parts
            if not manifest.add(ManifestRecord(digest, path, label, origin)):
                logger.warning(f"Duplicate hash {digest[:12]} on manifest line {number}; keeping first")
        return manifest

    @classmethod
    def load(cls, path: Path, origin: str = "ingested") -> "CorpusManifest":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), origin)
