"""
Typed errors for every pipeline stage.

The CLI maps any PeguardError to exit code 2 and prints the class name,
so class names are part of the command-line contract.
"""

from typing import Optional


class PeguardError(Exception):
    """Base class for all domain failures."""


# -------------------- PE FORMAT --------------------

class PeFormatError(PeguardError):
    """A structural violation found while parsing; `offset` is the first bad byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset 0x{offset:x})")
        self.offset = offset


class MalformedDos(PeFormatError):
    pass


class MalformedSignature(PeFormatError):
    pass


class TruncatedHeader(PeFormatError):
    pass


class BadOptionalMagic(PeFormatError):
    pass


class SectionOutOfBounds(PeFormatError):
    pass


class ImportTableUnresolvable(PeFormatError):
    pass


class InvalidSpec(PeguardError):
    def __init__(self, field: str, constraint: str):
        super().__init__(f"{field}: {constraint}")
        self.field = field
        self.constraint = constraint


class InvalidPe(InvalidSpec):
    """A file that parses but breaks a structural invariant."""


# -------------------- FEATURES / DATASETS --------------------

class UnsupportedSetId(PeguardError):
    pass


class EmptyDataset(PeguardError):
    pass


class SchemaMismatch(PeguardError):
    pass


# -------------------- MODELS --------------------

class SingleClassData(PeguardError):
    pass


class DimensionMismatch(PeguardError):
    pass


class VersionMismatch(PeguardError):
    pass


class SchemaError(PeguardError):
    pass


# -------------------- EVALUATION --------------------

class InsufficientSamples(PeguardError):
    def __init__(self, class_name: str, available: int, required: int):
        super().__init__(
            f"class {class_name!r} has {available} samples, plan needs {required}"
        )
        self.class_name = class_name
        self.available = available
        self.required = required


class ZeroDenominator(PeguardError):
    pass


class UnknownFamily(PeguardError):
    pass


class ExclusionViolation(PeguardError):
    pass


class TrialError(PeguardError):
    def __init__(self, trial: int, cause: Exception):
        super().__init__(f"trial {trial}: {type(cause).__name__}: {cause}")
        self.trial = trial
        self.cause = cause


# -------------------- CORPUS --------------------

class ProfileInvalid(PeguardError):
    def __init__(self, message: str, profile: Optional[str] = None):
        prefix = f"profile {profile!r}: " if profile else ""
        super().__init__(prefix + message)
        self.profile = profile
