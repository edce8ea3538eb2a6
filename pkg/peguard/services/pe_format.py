"""
PE/COFF Parsing & Writing

WHAT: Reads the loader headers, section table and import directory of a
      Windows PE image; writes minimal valid images from a PeSpec
WHY: Every feature is header-derived, and the writer is both the synthetic
     corpus substrate and the round-trip oracle for the parser
HOW: Fixed-offset struct reads with explicit bounds checks. Every failure
     is a typed PeFormatError carrying the offset of the first bad byte.

Layout reference: https://learn.microsoft.com/en-us/windows/win32/debug/pe-format
"""

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from peguard.core.errors import (
    BadOptionalMagic,
    ImportTableUnresolvable,
    InvalidSpec,
    MalformedDos,
    MalformedSignature,
    PeFormatError,
    SectionOutOfBounds,
    TruncatedHeader,
)

DOS_MAGIC = 0x5A4D
PE_SIGNATURE = b"PE\0\0"
PE32_MAGIC = 0x10B
PE32_PLUS_MAGIC = 0x20B

DOS_HEADER_SIZE = 0x40
E_LFANEW_OFFSET = 0x3C
COFF_HEADER_SIZE = 20
SECTION_HEADER_SIZE = 40
IMPORT_DESCRIPTOR_SIZE = 20
DATA_DIRECTORY_SIZE = 8

MAX_SECTIONS = 96
MAX_DATA_DIRECTORIES = 16
IMPORT_DIRECTORY = 1
MAX_NAME_LENGTH = 512

IMAGE_FILE_MACHINE_I386 = 0x014C
IMAGE_FILE_MACHINE_AMD64 = 0x8664

IMAGE_SCN_CNT_CODE = 0x00000020
IMAGE_SCN_CNT_INITIALIZED_DATA = 0x00000040
IMAGE_SCN_MEM_EXECUTE = 0x20000000
IMAGE_SCN_MEM_READ = 0x40000000
IMAGE_SCN_MEM_WRITE = 0x80000000

CODE_SECTION_FLAGS = IMAGE_SCN_CNT_CODE | IMAGE_SCN_MEM_EXECUTE | IMAGE_SCN_MEM_READ
DATA_SECTION_FLAGS = IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ
IDATA_SECTION_FLAGS = IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ | IMAGE_SCN_MEM_WRITE

# Classic real-mode stub: prints "This program cannot be run in DOS mode."
DOS_STUB = bytes.fromhex(
    "0e1fba0e00b409cd21b8014ccd21546869732070726f6772616d2063616e6e6f"
    "742062652072756e20696e20444f53206d6f64652e0d0d0a2400000000000000"
)

# (offset, struct code) inside the optional header; shared by both variants
# except where the PE32+ table overrides.
_OPTIONAL_FIELDS_PE32 = {
    "magic": (0, "H"),
    "major_linker_version": (2, "B"),
    "minor_linker_version": (3, "B"),
    "size_of_code": (4, "I"),
    "size_of_initialized_data": (8, "I"),
    "size_of_uninitialized_data": (12, "I"),
    "address_of_entry_point": (16, "I"),
    "base_of_code": (20, "I"),
    "image_base": (28, "I"),
    "section_alignment": (32, "I"),
    "file_alignment": (36, "I"),
    "size_of_image": (56, "I"),
    "size_of_headers": (60, "I"),
    "dll_characteristics": (70, "H"),
    "number_of_rva_and_sizes": (92, "I"),
}
_OPTIONAL_FIELDS_PE32_PLUS = {
    **_OPTIONAL_FIELDS_PE32,
    "image_base": (24, "Q"),
    "number_of_rva_and_sizes": (108, "I"),
}
_OPTIONAL_FIXED_SIZE = {PE32_MAGIC: 96, PE32_PLUS_MAGIC: 112}

_WIDTH_BITS = {"B": 8, "H": 16, "I": 32, "Q": 64}


# =========================
# DOMAIN TYPES
# =========================
@dataclass(frozen=True)
class DosHeader:
    magic: int = DOS_MAGIC
    e_lfanew: int = 0x80


@dataclass(frozen=True)
class CoffFileHeader:
    machine: int
    number_of_sections: int
    time_date_stamp: int
    pointer_to_symbol_table: int
    number_of_symbols: int
    size_of_optional_header: int
    characteristics: int


@dataclass(frozen=True)
class DataDirectory:
    virtual_address: int = 0
    size: int = 0


@dataclass(frozen=True)
class OptionalHeader:
    magic: int
    major_linker_version: int
    minor_linker_version: int
    size_of_code: int
    size_of_initialized_data: int
    size_of_uninitialized_data: int
    address_of_entry_point: int
    base_of_code: int
    image_base: int
    section_alignment: int
    file_alignment: int
    size_of_image: int
    size_of_headers: int
    dll_characteristics: int
    number_of_rva_and_sizes: int
    data_directories: Tuple[DataDirectory, ...]

    @property
    def is_pe32_plus(self) -> bool:
        return self.magic == PE32_PLUS_MAGIC

    @property
    def import_directory(self) -> DataDirectory:
        if len(self.data_directories) > IMPORT_DIRECTORY:
            return self.data_directories[IMPORT_DIRECTORY]
        return DataDirectory()


@dataclass(frozen=True)
class SectionHeader:
    name: bytes
    virtual_size: int
    virtual_address: int
    size_of_raw_data: int
    pointer_to_raw_data: int
    characteristics: int

    @property
    def is_code(self) -> bool:
        return bool(self.characteristics & IMAGE_SCN_CNT_CODE)


@dataclass(frozen=True)
class ImportEntry:
    dll_name: str
    function_count: int


@dataclass(frozen=True)
class PeLayout:
    """The header content shared by parsed files and writer specs."""

    dos: DosHeader
    coff: CoffFileHeader
    optional: OptionalHeader
    sections: Tuple[SectionHeader, ...]
    imports: Tuple[ImportEntry, ...]

    def layout(self) -> "PeLayout":
        return PeLayout(self.dos, self.coff, self.optional, self.sections, self.imports)


@dataclass(frozen=True)
class PeFile(PeLayout):
    file_size: int


@dataclass(frozen=True)
class PaddingPolicy:
    filler: bytes = b"\xcc\x90"
    overlay_size: int = 0
    imports_by_ordinal: bool = False


@dataclass(frozen=True)
class PeSpec(PeLayout):
    padding: PaddingPolicy = field(default_factory=PaddingPolicy)

    @property
    def file_size(self) -> int:
        raw = sum(s.size_of_raw_data for s in self.sections)
        return self.optional.size_of_headers + raw + self.padding.overlay_size


@dataclass(frozen=True)
class Violation:
    field: str
    constraint: str

    def __str__(self) -> str:
        return f"{self.field}: {self.constraint}"


# =========================
# BOUNDED READER
# =========================
class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.size = len(data)

    def unpack(self, fmt: str, offset: int, error=TruncatedHeader, limit: Optional[int] = None):
        end = self.size if limit is None else min(limit, self.size)
        width = struct.calcsize(fmt)
        if offset < 0 or offset + width > end:
            raise error(f"cannot read {width} bytes", offset)
        return struct.unpack_from(fmt, self.data, offset)

    def cstring(self, offset: int, limit: int, error) -> str:
        end = min(limit, self.size, offset + MAX_NAME_LENGTH)
        if offset < 0 or offset >= end:
            raise error("string outside mapped data", offset)
        terminator = self.data.find(b"\0", offset, end)
        if terminator < 0:
            raise error("unterminated string", offset)
        return self.data[offset:terminator].decode("ascii", errors="replace")


# =========================
# PARSER
# =========================
def parse_pe(data: bytes) -> PeFile:
    """
    Parse raw file content into a PeFile.

    Pure function of `data`; never reads outside it. Overlay bytes past
    the last section are ignored.
    """
    data = bytes(data)
    reader = _Reader(data)

    if len(data) < DOS_HEADER_SIZE:
        raise TruncatedHeader(f"file is {len(data)} bytes, DOS header needs 64", len(data))

    (magic,) = reader.unpack("<H", 0)
    if magic != DOS_MAGIC:
        raise MalformedDos(f"bad DOS magic 0x{magic:04x}", 0)
    (e_lfanew,) = reader.unpack("<I", E_LFANEW_OFFSET)
    dos = DosHeader(magic=magic, e_lfanew=e_lfanew)

    if e_lfanew + len(PE_SIGNATURE) > len(data):
        raise TruncatedHeader("PE signature past end of file", E_LFANEW_OFFSET)
    if data[e_lfanew:e_lfanew + len(PE_SIGNATURE)] != PE_SIGNATURE:
        raise MalformedSignature("missing PE\\0\\0 signature", e_lfanew)

    coff_offset = e_lfanew + len(PE_SIGNATURE)
    coff = CoffFileHeader(*reader.unpack("<HHIIIHH", coff_offset))

    optional_offset = coff_offset + COFF_HEADER_SIZE
    optional = _parse_optional_header(reader, optional_offset)

    table_offset = optional_offset + coff.size_of_optional_header
    sections = _parse_section_table(reader, table_offset, coff.number_of_sections)

    directory_entry_offset = (
        optional_offset
        + _OPTIONAL_FIXED_SIZE[optional.magic]
        + IMPORT_DIRECTORY * DATA_DIRECTORY_SIZE
    )
    imports = _parse_imports(reader, optional, sections, directory_entry_offset)

    return PeFile(
        dos=dos,
        coff=coff,
        optional=optional,
        sections=sections,
        imports=imports,
        file_size=len(data),
    )


def _parse_optional_header(reader: _Reader, offset: int) -> OptionalHeader:
    (magic,) = reader.unpack("<H", offset)
    if magic not in _OPTIONAL_FIXED_SIZE:
        raise BadOptionalMagic(f"optional header magic 0x{magic:04x}", offset)

    layout = _OPTIONAL_FIELDS_PE32_PLUS if magic == PE32_PLUS_MAGIC else _OPTIONAL_FIELDS_PE32
    values = {}
    for name, (rel, code) in layout.items():
        (values[name],) = reader.unpack("<" + code, offset + rel)

    directories_offset = offset + _OPTIONAL_FIXED_SIZE[magic]
    count = min(values["number_of_rva_and_sizes"], MAX_DATA_DIRECTORIES)
    directories = tuple(
        DataDirectory(*reader.unpack("<II", directories_offset + i * DATA_DIRECTORY_SIZE))
        for i in range(count)
    )
    return OptionalHeader(data_directories=directories, **values)


def _parse_section_table(reader: _Reader, offset: int, count: int) -> Tuple[SectionHeader, ...]:
    sections = []
    for i in range(count):
        entry = offset + i * SECTION_HEADER_SIZE
        name, vsize, va, raw_size, raw_ptr, _, _, _, _, chars = reader.unpack(
            "<8sIIIIIIHHI", entry
        )
        if raw_size and raw_ptr + raw_size > reader.size:
            raise SectionOutOfBounds(
                f"section {i} raw data [{raw_ptr:#x}, {raw_ptr + raw_size:#x}) past end of file",
                entry,
            )
        sections.append(SectionHeader(name, vsize, va, raw_size, raw_ptr, chars))
    return tuple(sections)


def _resolve_rva(rva: int, sections: Sequence[SectionHeader]) -> Optional[Tuple[int, int]]:
    """Map an RVA to (file offset, end of the backing raw data), or None."""
    for section in sections:
        span = max(section.virtual_size, section.size_of_raw_data)
        if section.virtual_address <= rva < section.virtual_address + span:
            delta = rva - section.virtual_address
            if delta < section.size_of_raw_data:
                start = section.pointer_to_raw_data
                return start + delta, start + section.size_of_raw_data
            return None
    return None


def _parse_imports(
    reader: _Reader,
    optional: OptionalHeader,
    sections: Sequence[SectionHeader],
    directory_entry_offset: int,
) -> Tuple[ImportEntry, ...]:
    directory = optional.import_directory
    if directory.size == 0:
        return ()

    mapped = _resolve_rva(directory.virtual_address, sections)
    if mapped is None:
        raise ImportTableUnresolvable(
            f"import directory RVA {directory.virtual_address:#x} is not backed by a section",
            directory_entry_offset,
        )
    cursor, limit = mapped

    thunk_code, ordinal_flag = ("<Q", 1 << 63) if optional.is_pe32_plus else ("<I", 1 << 31)
    thunk_size = struct.calcsize(thunk_code)

    entries = []
    while True:
        lookup_rva, _, _, name_rva, first_thunk = reader.unpack(
            "<IIIII", cursor, ImportTableUnresolvable, limit
        )
        if lookup_rva == 0 and name_rva == 0 and first_thunk == 0:
            break

        name_at = _resolve_rva(name_rva, sections)
        if name_at is None:
            raise ImportTableUnresolvable(f"DLL name RVA {name_rva:#x} unmapped", cursor + 12)
        dll_name = reader.cstring(name_at[0], name_at[1], ImportTableUnresolvable)

        thunks_rva = lookup_rva or first_thunk
        thunks_at = _resolve_rva(thunks_rva, sections)
        if thunks_at is None:
            raise ImportTableUnresolvable(f"thunk array RVA {thunks_rva:#x} unmapped", cursor)
        thunk_offset, thunk_limit = thunks_at

        # By-name and by-ordinal (ordinal_flag set) thunks both count as one symbol.
        count = 0
        while True:
            (value,) = reader.unpack(thunk_code, thunk_offset, ImportTableUnresolvable, thunk_limit)
            if value == 0:
                break
            count += 1
            thunk_offset += thunk_size

        entries.append(ImportEntry(dll_name=dll_name, function_count=count))
        cursor += IMPORT_DESCRIPTOR_SIZE

    return tuple(entries)


# =========================
# IMPORT COUNTS
# =========================
def count_dll_calls(pe: PeLayout) -> int:
    """TotalDLLCalls: imported symbols summed over every DLL."""
    return sum(entry.function_count for entry in pe.imports)


def count_imported_dlls(pe: PeLayout) -> int:
    return len({entry.dll_name.lower() for entry in pe.imports})


# =========================
# VALIDATION
# =========================
def validate_pe(pe: PeFile) -> List[Violation]:
    """Check every structural invariant; an empty list means the file is valid."""
    violations: List[Violation] = []

    def flag(name: str, constraint: str):
        violations.append(Violation(name, constraint))

    dos, coff, opt = pe.dos, pe.coff, pe.optional

    if dos.magic != DOS_MAGIC:
        flag("dos.magic", "must be 0x5A4D ('MZ')")
    if not (DOS_HEADER_SIZE <= dos.e_lfanew < pe.file_size - 4):
        flag("dos.e_lfanew", "must be >= 0x40 and < file length - 4")

    if not (1 <= coff.number_of_sections <= MAX_SECTIONS):
        flag("coff.number_of_sections", f"must be in [1, {MAX_SECTIONS}]")

    if opt.magic not in _OPTIONAL_FIXED_SIZE:
        flag("optional.magic", "must be 0x10B (PE32) or 0x20B (PE32+)")
    else:
        needed = _OPTIONAL_FIXED_SIZE[opt.magic] + DATA_DIRECTORY_SIZE * len(opt.data_directories)
        if coff.size_of_optional_header < needed:
            flag("coff.size_of_optional_header", f"must be >= {needed} for this magic and directory count")

    fa = opt.file_alignment
    if not (512 <= fa <= 65536 and fa & (fa - 1) == 0):
        flag("optional.file_alignment", "must be a power of two in [512, 65536]")
    if opt.section_alignment < fa:
        flag("optional.section_alignment", "must be >= file_alignment")
    if fa > 0 and opt.size_of_headers % fa:
        flag("optional.size_of_headers", "must be a multiple of file_alignment")
    if opt.number_of_rva_and_sizes > MAX_DATA_DIRECTORIES or len(opt.data_directories) != opt.number_of_rva_and_sizes:
        flag("optional.number_of_rva_and_sizes", "must equal the data directory count and be <= 16")

    if len(pe.sections) != coff.number_of_sections:
        flag("sections", "length must equal coff.number_of_sections")
    for i, section in enumerate(pe.sections):
        if section.size_of_raw_data and fa > 0 and section.size_of_raw_data % fa:
            flag(f"sections[{i}].size_of_raw_data", "must be a multiple of file_alignment")
        if section.pointer_to_raw_data + section.size_of_raw_data > pe.file_size:
            flag(f"sections[{i}].pointer_to_raw_data", "raw data must end within the file")

    for i, entry in enumerate(pe.imports):
        if entry.function_count < 1:
            flag(f"imports[{i}].function_count", "must be >= 1")
        if not entry.dll_name:
            flag(f"imports[{i}].dll_name", "must be non-empty")
    if bool(pe.imports) != (opt.import_directory.size != 0):
        flag("imports", "must be empty iff data directory 1 has size 0")

    return violations


# =========================
# WRITER
# =========================
def _align(value: int, alignment: int) -> int:
    return -(-value // alignment) * alignment


def _import_function_name(index: int) -> bytes:
    return f"Func{index:04d}".encode("ascii")


def encode_import_table(
    imports: Sequence[ImportEntry],
    base_rva: int,
    pe32_plus: bool,
    by_ordinal: bool = False,
) -> bytes:
    """
    Serialize descriptors, lookup tables, hint/name entries and DLL names
    as one contiguous blob starting at `base_rva`. FirstThunk reuses the
    lookup table.
    """
    thunk_code, ordinal_flag = ("<Q", 1 << 63) if pe32_plus else ("<I", 1 << 31)
    thunk_size = struct.calcsize(thunk_code)

    cursor = IMPORT_DESCRIPTOR_SIZE * (len(imports) + 1)
    lookup_offsets = []
    for entry in imports:
        lookup_offsets.append(cursor)
        cursor += thunk_size * (entry.function_count + 1)

    hint_offsets = []
    for entry in imports:
        offsets = []
        if not by_ordinal:
            for j in range(entry.function_count):
                offsets.append(cursor)
                cursor += _align(2 + len(_import_function_name(j)) + 1, 2)
        hint_offsets.append(offsets)

    name_offsets = []
    for entry in imports:
        name_offsets.append(cursor)
        cursor += len(entry.dll_name.encode("ascii")) + 1

    blob = bytearray(cursor)
    for i, entry in enumerate(imports):
        lookup_rva = base_rva + lookup_offsets[i]
        struct.pack_into(
            "<IIIII", blob, i * IMPORT_DESCRIPTOR_SIZE,
            lookup_rva, 0, 0, base_rva + name_offsets[i], lookup_rva,
        )
        for j in range(entry.function_count):
            if by_ordinal:
                thunk = ordinal_flag | (j + 1)
            else:
                thunk = base_rva + hint_offsets[i][j]
                name = _import_function_name(j)
                struct.pack_into(f"<H{len(name)}s", blob, hint_offsets[i][j], j, name)
            struct.pack_into(thunk_code, blob, lookup_offsets[i] + j * thunk_size, thunk)
        encoded = entry.dll_name.encode("ascii")
        blob[name_offsets[i]:name_offsets[i] + len(encoded)] = encoded

    return bytes(blob)


def import_table_size(imports: Sequence[ImportEntry], pe32_plus: bool, by_ordinal: bool = False) -> int:
    return len(encode_import_table(imports, 0, pe32_plus, by_ordinal))


def _width_violations(spec: PeSpec) -> List[Violation]:
    checks = [("dos.magic", spec.dos.magic, 16), ("dos.e_lfanew", spec.dos.e_lfanew, 32)]
    coff_codes = zip(
        ("machine", "number_of_sections", "time_date_stamp", "pointer_to_symbol_table",
         "number_of_symbols", "size_of_optional_header", "characteristics"),
        "HHIIIHH",
    )
    checks += [(f"coff.{name}", getattr(spec.coff, name), _WIDTH_BITS[code]) for name, code in coff_codes]

    layout = _OPTIONAL_FIELDS_PE32_PLUS if spec.optional.is_pe32_plus else _OPTIONAL_FIELDS_PE32
    checks += [
        (f"optional.{name}", getattr(spec.optional, name), _WIDTH_BITS[code])
        for name, (_, code) in layout.items()
    ]
    for i, d in enumerate(spec.optional.data_directories):
        checks += [(f"optional.data_directories[{i}]", d.virtual_address, 32),
                   (f"optional.data_directories[{i}]", d.size, 32)]
    for i, s in enumerate(spec.sections):
        for name in ("virtual_size", "virtual_address", "size_of_raw_data",
                     "pointer_to_raw_data", "characteristics"):
            checks.append((f"sections[{i}].{name}", getattr(s, name), 32))

    return [
        Violation(name, f"must fit in {bits} unsigned bits")
        for name, value, bits in checks
        if not 0 <= value < (1 << bits)
    ]


def _writer_violations(spec: PeSpec) -> List[Violation]:
    """Layout rules the writer needs on top of the structural invariants."""
    found = _width_violations(spec)
    if found:
        return found

    opt, coff = spec.optional, spec.coff
    headers_end = (
        spec.dos.e_lfanew + len(PE_SIGNATURE) + COFF_HEADER_SIZE
        + coff.size_of_optional_header + SECTION_HEADER_SIZE * len(spec.sections)
    )
    if headers_end > opt.size_of_headers:
        found.append(Violation("optional.size_of_headers", f"must cover the section table (>= {headers_end})"))

    if not spec.padding.filler:
        found.append(Violation("padding.filler", "must be non-empty"))
    if spec.padding.overlay_size < 0:
        found.append(Violation("padding.overlay_size", "must be >= 0"))

    cursor = opt.size_of_headers
    for i, section in enumerate(spec.sections):
        if len(section.name) != 8:
            found.append(Violation(f"sections[{i}].name", "must be exactly 8 bytes"))
        expected = cursor if section.size_of_raw_data else 0
        if section.pointer_to_raw_data != expected:
            found.append(Violation(f"sections[{i}].pointer_to_raw_data", f"must be {expected:#x} (sequential layout)"))
        cursor += section.size_of_raw_data

    for i, entry in enumerate(spec.imports):
        try:
            encoded = entry.dll_name.encode("ascii")
        except UnicodeEncodeError:
            encoded = b"\0"
        if b"\0" in encoded:
            found.append(Violation(f"imports[{i}].dll_name", "must be ASCII without NUL"))

    if spec.imports and not any(v.field.startswith("imports[") for v in found):
        directory = opt.import_directory
        expected_size = IMPORT_DESCRIPTOR_SIZE * (len(spec.imports) + 1)
        blob = import_table_size(spec.imports, opt.is_pe32_plus, spec.padding.imports_by_ordinal)
        host = _host_section(spec.sections, directory.virtual_address, blob)
        if directory.size != expected_size:
            found.append(Violation("optional.data_directories[1]", f"size must be {expected_size}"))
        elif host is None:
            found.append(Violation("optional.data_directories[1]", f"no section holds the {blob}-byte import table"))

    return found


def _host_section(sections: Sequence[SectionHeader], rva: int, length: int) -> Optional[SectionHeader]:
    for section in sections:
        delta = rva - section.virtual_address
        if 0 <= delta and delta + length <= section.size_of_raw_data:
            return section
    return None


def write_pe(spec: PeSpec) -> bytes:
    """
    Emit a PE image for `spec`. parse_pe(write_pe(spec)).layout() == spec.layout().

    Raises InvalidSpec naming the first violated invariant.
    """
    violations = _writer_violations(spec)
    if not violations:
        candidate = PeFile(spec.dos, spec.coff, spec.optional, spec.sections, spec.imports, spec.file_size)
        violations = validate_pe(candidate)
    if violations:
        raise InvalidSpec(violations[0].field, violations[0].constraint)

    dos, coff, opt = spec.dos, spec.coff, spec.optional
    image = bytearray(opt.size_of_headers)

    # DOS header (fields past e_magic follow the linker defaults) + stub
    struct.pack_into("<HHHHHHHHH", image, 0, dos.magic, 0x90, 3, 0, 4, 0, 0xFFFF, 0, 0xB8)
    struct.pack_into("<H", image, 0x18, 0x40)
    struct.pack_into("<I", image, E_LFANEW_OFFSET, dos.e_lfanew)
    stub = DOS_STUB[:max(0, dos.e_lfanew - DOS_HEADER_SIZE)]
    image[DOS_HEADER_SIZE:DOS_HEADER_SIZE + len(stub)] = stub

    offset = dos.e_lfanew
    image[offset:offset + 4] = PE_SIGNATURE
    offset += 4
    struct.pack_into(
        "<HHIIIHH", image, offset,
        coff.machine, coff.number_of_sections, coff.time_date_stamp,
        coff.pointer_to_symbol_table, coff.number_of_symbols,
        coff.size_of_optional_header, coff.characteristics,
    )
    offset += COFF_HEADER_SIZE

    _write_optional_header(image, offset, opt)
    offset += coff.size_of_optional_header

    for section in spec.sections:
        struct.pack_into(
            "<8sIIIIIIHHI", image, offset,
            section.name, section.virtual_size, section.virtual_address,
            section.size_of_raw_data, section.pointer_to_raw_data,
            0, 0, 0, 0, section.characteristics,
        )
        offset += SECTION_HEADER_SIZE

    blob, host = b"", None
    if spec.imports:
        directory = opt.import_directory
        blob = encode_import_table(
            spec.imports, directory.virtual_address,
            opt.is_pe32_plus, spec.padding.imports_by_ordinal,
        )
        host = _host_section(spec.sections, directory.virtual_address, len(blob))

    filler = spec.padding.filler
    bodies = []
    for section in spec.sections:
        size = section.size_of_raw_data
        body = bytearray((filler * (size // len(filler) + 1))[:size])
        if host is not None and section is host:
            at = opt.import_directory.virtual_address - section.virtual_address
            body[at:at + len(blob)] = blob
        bodies.append(bytes(body))

    overlay = (filler * (spec.padding.overlay_size // len(filler) + 1))[:spec.padding.overlay_size]
    return bytes(image) + b"".join(bodies) + overlay


def _write_optional_header(image: bytearray, offset: int, opt: OptionalHeader) -> None:
    pe32_plus = opt.is_pe32_plus
    layout = _OPTIONAL_FIELDS_PE32_PLUS if pe32_plus else _OPTIONAL_FIELDS_PE32
    for name, (rel, code) in layout.items():
        struct.pack_into("<" + code, image, offset + rel, getattr(opt, name))

    # OS/subsystem versions, subsystem and stack/heap sizes
    struct.pack_into("<HHHHHH", image, offset + 40, 6, 0, 0, 0, 6, 0)
    struct.pack_into("<H", image, offset + 68, 2)
    if pe32_plus:
        struct.pack_into("<QQQQ", image, offset + 72, 0x100000, 0x1000, 0x100000, 0x1000)
    else:
        struct.pack_into("<IIII", image, offset + 72, 0x100000, 0x1000, 0x100000, 0x1000)

    directories_offset = offset + _OPTIONAL_FIXED_SIZE[opt.magic]
    for i, directory in enumerate(opt.data_directories):
        struct.pack_into(
            "<II", image, directories_offset + i * DATA_DIRECTORY_SIZE,
            directory.virtual_address, directory.size,
        )


# =========================
# SPEC LAYOUT HELPER
# =========================
@dataclass(frozen=True)
class SectionPlan:
    name: str
    virtual_size: int
    raw_size: int
    characteristics: int = DATA_SECTION_FLAGS


def _section_name(name: str) -> bytes:
    encoded = name.encode("ascii")[:8]
    return encoded + b"\0" * (8 - len(encoded))


def build_spec(
    sections: Sequence[SectionPlan],
    imports: Sequence[ImportEntry] = (),
    *,
    pe32_plus: bool = False,
    machine: Optional[int] = None,
    time_date_stamp: int = 0,
    coff_characteristics: int = 0x0102,
    major_linker_version: int = 14,
    minor_linker_version: int = 0,
    size_of_code: Optional[int] = None,
    size_of_initialized_data: Optional[int] = None,
    size_of_uninitialized_data: int = 0,
    entry_point_offset: int = 0,
    dll_characteristics: int = 0x8160,
    image_base: Optional[int] = None,
    file_alignment: int = 0x200,
    section_alignment: int = 0x1000,
    e_lfanew: int = 0x80,
    extra_header_bytes: int = 0,
    number_of_rva_and_sizes: int = MAX_DATA_DIRECTORIES,
    padding: PaddingPolicy = PaddingPolicy(),
) -> PeSpec:
    """
    Lay out a valid PeSpec: section RVAs and raw pointers assigned
    sequentially, an `.idata` section appended when imports are given,
    SizeOfHeaders/SizeOfImage derived from the layout.

    SizeOfCode and SizeOfInitializedData default to the summed raw sizes
    of code / initialized-data sections.
    """
    plans = list(sections)
    if imports:
        if number_of_rva_and_sizes <= IMPORT_DIRECTORY:
            raise InvalidSpec("optional.number_of_rva_and_sizes", "imports need at least 2 data directories")
        blob = import_table_size(imports, pe32_plus, padding.imports_by_ordinal)
        plans.append(SectionPlan(".idata", blob, blob, IDATA_SECTION_FLAGS))
    if not plans:
        raise InvalidSpec("sections", "at least one section is required")

    magic = PE32_PLUS_MAGIC if pe32_plus else PE32_MAGIC
    optional_size = _OPTIONAL_FIXED_SIZE[magic] + DATA_DIRECTORY_SIZE * number_of_rva_and_sizes
    headers_end = e_lfanew + len(PE_SIGNATURE) + COFF_HEADER_SIZE + optional_size + SECTION_HEADER_SIZE * len(plans)
    size_of_headers = _align(headers_end + extra_header_bytes, file_alignment)

    headers = []
    rva = _align(size_of_headers, section_alignment)
    pointer = size_of_headers
    for plan in plans:
        raw = _align(plan.raw_size, file_alignment)
        headers.append(SectionHeader(
            name=_section_name(plan.name),
            virtual_size=plan.virtual_size,
            virtual_address=rva,
            size_of_raw_data=raw,
            pointer_to_raw_data=pointer if raw else 0,
            characteristics=plan.characteristics,
        ))
        pointer += raw
        rva += _align(max(plan.virtual_size, raw, 1), section_alignment)

    code_sections = [s for s in headers if s.is_code]
    base_of_code = code_sections[0].virtual_address if code_sections else 0
    if size_of_code is None:
        size_of_code = sum(s.size_of_raw_data for s in code_sections)
    if size_of_initialized_data is None:
        size_of_initialized_data = sum(
            s.size_of_raw_data for s in headers if s.characteristics & IMAGE_SCN_CNT_INITIALIZED_DATA
        )

    directories = [DataDirectory() for _ in range(number_of_rva_and_sizes)]
    if imports:
        directories[IMPORT_DIRECTORY] = DataDirectory(
            headers[-1].virtual_address, IMPORT_DESCRIPTOR_SIZE * (len(imports) + 1)
        )

    optional = OptionalHeader(
        magic=magic,
        major_linker_version=major_linker_version,
        minor_linker_version=minor_linker_version,
        size_of_code=size_of_code,
        size_of_initialized_data=size_of_initialized_data,
        size_of_uninitialized_data=size_of_uninitialized_data,
        address_of_entry_point=base_of_code + entry_point_offset,
        base_of_code=base_of_code,
        image_base=image_base if image_base is not None else (0x140000000 if pe32_plus else 0x400000),
        section_alignment=section_alignment,
        file_alignment=file_alignment,
        size_of_image=rva,
        size_of_headers=size_of_headers,
        dll_characteristics=dll_characteristics,
        number_of_rva_and_sizes=number_of_rva_and_sizes,
        data_directories=tuple(directories),
    )
    coff = CoffFileHeader(
        machine=machine if machine is not None else (IMAGE_FILE_MACHINE_AMD64 if pe32_plus else IMAGE_FILE_MACHINE_I386),
        number_of_sections=len(headers),
        time_date_stamp=time_date_stamp,
        pointer_to_symbol_table=0,
        number_of_symbols=0,
        size_of_optional_header=optional_size,
        characteristics=coff_characteristics,
    )
    return PeSpec(
        dos=DosHeader(DOS_MAGIC, e_lfanew),
        coff=coff,
        optional=optional,
        sections=tuple(headers),
        imports=tuple(imports),
        padding=padding,
    )


__all__ = [
    "CoffFileHeader", "DataDirectory", "DosHeader", "ImportEntry", "OptionalHeader",
    "PaddingPolicy", "PeFile", "PeFormatError", "PeLayout", "PeSpec", "SectionHeader",
    "SectionPlan", "Violation", "build_spec", "count_dll_calls", "count_imported_dlls",
    "encode_import_table", "import_table_size", "parse_pe", "validate_pe", "write_pe",
]
