"""Coral-condition taxonomy, patch records, and the manifest file format.

This module is the single source of truth for the eight-class label
vocabulary, its fixed ordering, and the on-disk manifest format shared by
tiling, training, ensembling, and evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ManifestFormatError, SchemaError
from .fsutil import atomic_write_text

# Condition classes (HLC..RBL) followed by stressor classes (CPT..PHY).
# This ordering is fixed: every label vector, file column, and report column
# follows it, so artifacts stay positionally comparable across runs.
CLASS_TABLE: tuple[tuple[str, str], ...] = (
    ("HLC", "healthy coral"),
    ("CPC", "compromised coral"),
    ("DDC", "dead coral"),
    ("RBL", "rubble"),
    ("CPT", "competition"),
    ("DSE", "disease"),
    ("PRD", "predation"),
    ("PHY", "physical issues"),
)

CLASS_CODES: tuple[str, ...] = tuple(code for code, _ in CLASS_TABLE)

# Survey site codes from the field campaign, plus "UNK" for images whose
# provenance is unknown. Other strings are accepted but flagged by
# validate_manifest as warnings.
SITE_CODES: frozenset[str] = frozenset(
    {"HWB", "AOM", "TTB", "ALK", "HNM", "SKI", "TCB", "CBK", "SWP"}
)
UNKNOWN_SITE = "UNK"

SPLIT_TRAIN = "train"
SPLIT_TEST = "test"
SPLIT_UNASSIGNED = "unassigned"
SPLIT_VALUES: tuple[str, ...] = (SPLIT_TRAIN, SPLIT_TEST, SPLIT_UNASSIGNED)

# A multi-hot label vector aligned to LabelSchema order. Plain tuples keep
# records hashable and trivially serializable.
LabelVector = tuple[int, ...]

_MANIFEST_FIELDS = (
    "patch_id",
    "source_image",
    "site_code",
    "grid_row",
    "grid_col",
    "labels",
    "split",
)


@dataclass(frozen=True)
class LabelSchema:
    """The fixed eight-class taxonomy in canonical order."""

    classes: tuple[tuple[str, str], ...] = CLASS_TABLE

    def __post_init__(self) -> None:
        codes = tuple(code for code, _ in self.classes)
        if codes != CLASS_CODES:
            raise SchemaError(
                f"class order must be exactly {list(CLASS_CODES)}, got {list(codes)}"
            )

    @property
    def size(self) -> int:
        return len(self.classes)

    @property
    def codes(self) -> tuple[str, ...]:
        return tuple(code for code, _ in self.classes)

    def index(self, code: str) -> int:
        try:
            return self.codes.index(code)
        except ValueError:
            raise SchemaError(f"unknown class code: {code!r}") from None

    def full_name(self, code: str) -> str:
        return self.classes[self.index(code)][1]


def default_schema() -> LabelSchema:
    """Return the canonical eight-class schema."""
    return LabelSchema()


@dataclass(frozen=True)
class PatchRecord:
    """One tiled patch: provenance, grid position, labels, and split."""

    patch_id: str
    source_image: str
    site_code: str
    grid_row: int
    grid_col: int
    labels: LabelVector
    split: str = SPLIT_UNASSIGNED

    def __post_init__(self) -> None:
        if not self.patch_id:
            raise SchemaError("patch_id must be a nonempty string")
        if self.grid_row < 0 or self.grid_col < 0:
            raise SchemaError(
                f"{self.patch_id}: grid position must be nonnegative, "
                f"got ({self.grid_row}, {self.grid_col})"
            )
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))


@dataclass(frozen=True)
class Manifest:
    """A labeled patch inventory tied to one label schema."""

    schema: LabelSchema
    records: tuple[PatchRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def split_records(self, split: str) -> tuple[PatchRecord, ...]:
        return tuple(r for r in self.records if r.split == split)

    def by_id(self) -> dict[str, PatchRecord]:
        return {r.patch_id: r for r in self.records}


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of validate_manifest: hard errors and advisory warnings."""

    errors: tuple[str, ...]
    warnings: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.errors


def encode_labels(codes: Iterable[str], schema: LabelSchema) -> LabelVector:
    """Encode a set of class codes as a multi-hot vector in canonical order.

    Unknown codes are rejected by name; an empty set yields the all-zero
    vector.
    """
    wanted = set(codes)
    for code in sorted(wanted):
        if code not in schema.codes:
            raise SchemaError(f"unknown class code: {code!r}")
    return tuple(1 if code in wanted else 0 for code in schema.codes)


def decode_labels(vector: Sequence[int], schema: LabelSchema) -> set[str]:
    """Invert encode_labels: recover the set of active class codes."""
    if len(vector) != schema.size:
        raise SchemaError(
            f"label vector length {len(vector)} does not match schema size {schema.size}"
        )
    for v in vector:
        if v not in (0, 1):
            raise SchemaError(f"label flags must be 0 or 1, got {v!r}")
    return {code for code, flag in zip(schema.codes, vector) if flag}


def validate_manifest(manifest: Manifest) -> ValidationReport:
    """Check manifest invariants and return a report; never raises.

    Errors: duplicate patch_id, duplicate (source_image, grid_row, grid_col),
    label vectors of the wrong length or with non-binary flags, unknown split
    values. Warnings: all-zero label vectors and unrecognized site codes.
    """
    errors: list[str] = []
    warnings: list[str] = []
    seen_ids: set[str] = set()
    seen_cells: set[tuple[str, int, int]] = set()
    n = manifest.schema.size

    for rec in manifest.records:
        if rec.patch_id in seen_ids:
            errors.append(f"duplicate patch_id: {rec.patch_id!r}")
        seen_ids.add(rec.patch_id)

        cell = (rec.source_image, rec.grid_row, rec.grid_col)
        if cell in seen_cells:
            errors.append(
                f"{rec.patch_id}: duplicate grid cell {cell!r} for source image"
            )
        seen_cells.add(cell)

        if len(rec.labels) != n:
            errors.append(
                f"{rec.patch_id}: label vector length {len(rec.labels)} != {n}"
            )
        elif any(v not in (0, 1) for v in rec.labels):
            errors.append(f"{rec.patch_id}: label flags must be 0 or 1")
        elif not any(rec.labels):
            warnings.append(f"{rec.patch_id}: all-zero label vector")

        if rec.split not in SPLIT_VALUES:
            errors.append(f"{rec.patch_id}: unknown split value {rec.split!r}")

        if rec.site_code not in SITE_CODES and rec.site_code != UNKNOWN_SITE:
            warnings.append(f"{rec.patch_id}: unrecognized site code {rec.site_code!r}")

    return ValidationReport(errors=tuple(errors), warnings=tuple(warnings))


def _record_line(rec: PatchRecord) -> str:
    payload = {
        "patch_id": rec.patch_id,
        "source_image": rec.source_image,
        "site_code": rec.site_code,
        "grid_row": rec.grid_row,
        "grid_col": rec.grid_col,
        "labels": list(rec.labels),
        "split": rec.split,
    }
    return json.dumps(payload, separators=(",", ":"))


def manifest_to_text(manifest: Manifest) -> str:
    """Serialize a manifest to its line-delimited text form.

    The first line is a header object carrying the class-code order; each
    following line is one record. Output is a pure function of the manifest,
    so identical manifests serialize byte-identically.
    """
    header = json.dumps({"classes": list(manifest.schema.codes)}, separators=(",", ":"))
    lines = [header]
    lines.extend(_record_line(rec) for rec in manifest.records)
    return "\n".join(lines) + "\n"


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write a manifest atomically (temp file + rename)."""
    atomic_write_text(Path(path), manifest_to_text(manifest))


def _parse_record(obj: object, where: str) -> PatchRecord:
    if not isinstance(obj, dict):
        raise ManifestFormatError(f"{where}: record line must be an object")
    keys = tuple(obj.keys())
    if set(keys) != set(_MANIFEST_FIELDS):
        raise ManifestFormatError(
            f"{where}: record fields must be exactly {list(_MANIFEST_FIELDS)}, got {list(keys)}"
        )
    labels = obj["labels"]
    if not isinstance(labels, list) or not all(isinstance(v, int) for v in labels):
        raise ManifestFormatError(f"{where}: labels must be an array of integers")
    for name in ("patch_id", "source_image", "site_code", "split"):
        if not isinstance(obj[name], str):
            raise ManifestFormatError(f"{where}: field {name!r} must be a string")
    for name in ("grid_row", "grid_col"):
        if not isinstance(obj[name], int):
            raise ManifestFormatError(f"{where}: field {name!r} must be an integer")
    try:
        return PatchRecord(
            patch_id=obj["patch_id"],
            source_image=obj["source_image"],
            site_code=obj["site_code"],
            grid_row=obj["grid_row"],
            grid_col=obj["grid_col"],
            labels=tuple(labels),
            split=obj["split"],
        )
    except SchemaError as exc:
        raise ManifestFormatError(f"{where}: {exc}") from exc


def read_manifest(path: str | Path) -> Manifest:
    """Parse a manifest file, rejecting structural problems with line numbers.

    The header's class order must match the canonical schema exactly; files
    written under a different ordering are rejected rather than reordered.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ManifestFormatError(f"{path}: empty file, expected a header line")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestFormatError(f"{path}:1: invalid header: {exc}") from exc
    if not isinstance(header, dict) or "classes" not in header:
        raise ManifestFormatError(f"{path}:1: header must carry a 'classes' array")
    if tuple(header["classes"]) != CLASS_CODES:
        raise ManifestFormatError(
            f"{path}:1: class order {header['classes']} does not match "
            f"the canonical order {list(CLASS_CODES)}"
        )

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise ManifestFormatError(f"{path}:{lineno}: blank line in record body")
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestFormatError(f"{path}:{lineno}: invalid record: {exc}") from exc
        records.append(_parse_record(obj, f"{path}:{lineno}"))

    return Manifest(schema=default_schema(), records=tuple(records))


def with_split(manifest: Manifest, assignment: Mapping[str, str]) -> Manifest:
    """Return a copy of the manifest with splits replaced per patch_id."""
    records = tuple(
        replace(rec, split=assignment.get(rec.patch_id, rec.split))
        for rec in manifest.records
    )
    return Manifest(schema=manifest.schema, records=records)
