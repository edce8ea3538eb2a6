"""The 10-class label table: nine ransomware families plus Benign (index 9)."""

from dataclasses import dataclass

from peguard.core.errors import SchemaMismatch

CLASS_NAMES = (
    "Babuk",
    "BlackCat",
    "Chaos",
    "DJVu",
    "Hive",
    "LockBit",
    "Netwalker",
    "Sodinokibi",
    "WannaCry",
    "Benign",
)
BENIGN = "Benign"
BENIGN_INDEX = CLASS_NAMES.index(BENIGN)
FAMILIES = CLASS_NAMES[:BENIGN_INDEX]

# Binary problem used by zero-day evaluation; benign stays the last class.
BINARY_CLASS_NAMES = ("Ransomware", BENIGN)


@dataclass(frozen=True)
class ClassLabel:
    index: int
    name: str

    @classmethod
    def from_name(cls, name: str, class_names=CLASS_NAMES) -> "ClassLabel":
        if name not in class_names:
            raise SchemaMismatch(f"unknown class {name!r}")
        return cls(class_names.index(name), name)

    @classmethod
    def from_index(cls, index: int, class_names=CLASS_NAMES) -> "ClassLabel":
        if not 0 <= index < len(class_names):
            raise SchemaMismatch(f"class index {index} outside [0, {len(class_names)})")
        return cls(index, class_names[index])

    @property
    def is_benign(self) -> bool:
        return self.name == BENIGN
