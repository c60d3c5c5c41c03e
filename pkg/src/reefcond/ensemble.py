"""Probability fusion by uniform averaging, thresholding, and the
prediction file format.

Member models are trained independently; at inference their per-patch class
probabilities are averaged cell-wise with uniform weights to form the
ensemble output. Averaging uses exactly-rounded summation so the result is
bit-identical under any reordering of the members.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EnsembleError, PredictionFormatError
from .fsutil import atomic_write_text
from .schema import CLASS_CODES, LabelSchema, LabelVector, default_schema

FUSION_UNIFORM_MEAN = "uniform-mean"


@dataclass(frozen=True)
class ProbabilityMatrix:
    """Per-patch, per-class probabilities with unique row ids."""

    ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise EnsembleError(f"values must be 2-D, got shape {values.shape}")
        if len(self.ids) != values.shape[0]:
            raise EnsembleError(
                f"{len(self.ids)} row ids do not match {values.shape[0]} value rows"
            )
        if len(set(self.ids)) != len(self.ids):
            raise EnsembleError("row ids must be unique")
        if not np.isfinite(values).all():
            raise EnsembleError("probabilities must be finite")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise EnsembleError("probabilities must lie in [0, 1]")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "values", values)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def row(self, patch_id: str) -> np.ndarray:
        return self.values[self.ids.index(patch_id)]


@dataclass(frozen=True)
class EnsembleSpec:
    """Membership of one fused model: checkpoint references plus the fusion rule."""

    members: tuple[str, ...]
    fusion: str = FUSION_UNIFORM_MEAN

    def __post_init__(self) -> None:
        if len(self.members) < 1:
            raise EnsembleError("an ensemble needs at least one member")
        if self.fusion != FUSION_UNIFORM_MEAN:
            raise EnsembleError(f"unsupported fusion rule: {self.fusion!r}")


@dataclass(frozen=True)
class DecisionConfig:
    """Probability-to-label rule: predict positive when p >= threshold."""

    threshold: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise EnsembleError(f"threshold must be in (0, 1), got {self.threshold}")


@dataclass(frozen=True)
class PredictionRecord:
    """One patch's probabilities and the thresholded label vector."""

    patch_id: str
    probs: tuple[float, ...]
    labels: LabelVector


def ensemble_average(matrices: Sequence[ProbabilityMatrix]) -> ProbabilityMatrix:
    """Cell-wise uniform mean of member matrices, aligned by row id.

    Row-id sets and widths must match exactly; offending ids are listed on
    mismatch. Each cell is summed with math.fsum (exactly rounded), so member
    order cannot change the result.
    """
    if not matrices:
        raise EnsembleError("ensemble_average needs at least one member matrix")
    first = matrices[0]
    for matrix in matrices[1:]:
        if matrix.width != first.width:
            raise EnsembleError(
                f"member width {matrix.width} does not match {first.width}"
            )
        if set(matrix.ids) != set(first.ids):
            missing = sorted(set(first.ids) - set(matrix.ids))[:10]
            extra = sorted(set(matrix.ids) - set(first.ids))[:10]
            raise EnsembleError(
                f"member row ids differ: missing {missing}, unexpected {extra}"
            )
    if len(matrices) == 1:
        return first

    aligned = [first.values]
    for matrix in matrices[1:]:
        index = {pid: i for i, pid in enumerate(matrix.ids)}
        aligned.append(matrix.values[[index[pid] for pid in first.ids]])

    k = len(aligned)
    out = np.empty_like(first.values)
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = math.fsum(member[i, j] for member in aligned) / k
    return ProbabilityMatrix(ids=first.ids, values=out)


def threshold_decide(
    probs: ProbabilityMatrix, cfg: DecisionConfig
) -> tuple[PredictionRecord, ...]:
    """Convert probabilities to labels: labels[i] = 1 iff probs[i] >= threshold."""
    records = []
    for pid, row in zip(probs.ids, probs.values):
        records.append(
            PredictionRecord(
                patch_id=pid,
                probs=tuple(float(v) for v in row),
                labels=tuple(1 if v >= cfg.threshold else 0 for v in row),
            )
        )
    return tuple(records)


def records_to_matrix(records: Sequence[PredictionRecord]) -> ProbabilityMatrix:
    """Rebuild a ProbabilityMatrix from prediction records."""
    ids = tuple(r.patch_id for r in records)
    if not records:
        return ProbabilityMatrix(ids=(), values=np.empty((0, len(CLASS_CODES))))
    return ProbabilityMatrix(
        ids=ids, values=np.asarray([r.probs for r in records], dtype=np.float64)
    )


def _format_record(rec: PredictionRecord) -> str:
    probs = ",".join(format(p, ".6f") for p in rec.probs)
    labels = ",".join(str(int(v)) for v in rec.labels)
    pid = json.dumps(rec.patch_id)
    return f'{{"patch_id":{pid},"probs":[{probs}],"labels":[{labels}]}}'


def predictions_to_text(
    records: Sequence[PredictionRecord],
    schema: LabelSchema,
    threshold: float,
) -> str:
    """Serialize prediction records; probabilities carry six decimal digits."""
    header = (
        '{"classes":' + json.dumps(list(schema.codes), separators=(",", ":"))
        + ',"threshold":' + repr(float(threshold)) + "}"
    )
    lines = [header]
    for rec in records:
        if len(rec.probs) != schema.size or len(rec.labels) != schema.size:
            raise EnsembleError(
                f"{rec.patch_id}: record width does not match schema size {schema.size}"
            )
        lines.append(_format_record(rec))
    return "\n".join(lines) + "\n"


def write_predictions(
    records: Sequence[PredictionRecord],
    path: str | Path,
    schema: LabelSchema,
    threshold: float,
) -> None:
    """Write a prediction file atomically."""
    atomic_write_text(Path(path), predictions_to_text(records, schema, threshold))


def read_predictions(
    path: str | Path,
) -> tuple[tuple[PredictionRecord, ...], LabelSchema, float]:
    """Parse a prediction file; malformed lines are rejected with line numbers.

    Returns the records (probabilities as written, i.e. quantized to six
    decimals), the schema, and the decision threshold from the header.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise PredictionFormatError(f"{path}: empty file, expected a header line")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise PredictionFormatError(f"{path}:1: invalid header: {exc}") from exc
    if (
        not isinstance(header, dict)
        or "classes" not in header
        or "threshold" not in header
    ):
        raise PredictionFormatError(
            f"{path}:1: header must carry 'classes' and 'threshold'"
        )
    if tuple(header["classes"]) != CLASS_CODES:
        raise PredictionFormatError(
            f"{path}:1: class order {header['classes']} does not match "
            f"the canonical order {list(CLASS_CODES)}"
        )
    threshold = header["threshold"]
    if not isinstance(threshold, (int, float)) or not 0.0 < float(threshold) < 1.0:
        raise PredictionFormatError(f"{path}:1: threshold must lie in (0, 1)")

    schema = default_schema()
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise PredictionFormatError(f"{path}:{lineno}: invalid record: {exc}") from exc
        if not isinstance(obj, dict) or set(obj) != {"patch_id", "probs", "labels"}:
            raise PredictionFormatError(
                f"{path}:{lineno}: record fields must be patch_id, probs, labels"
            )
        probs, labels = obj["probs"], obj["labels"]
        if (
            not isinstance(probs, list)
            or len(probs) != schema.size
            or not all(isinstance(p, (int, float)) for p in probs)
        ):
            raise PredictionFormatError(
                f"{path}:{lineno}: probs must be an array of {schema.size} numbers"
            )
        if (
            not isinstance(labels, list)
            or len(labels) != schema.size
            or not all(v in (0, 1) for v in labels)
        ):
            raise PredictionFormatError(
                f"{path}:{lineno}: labels must be an array of {schema.size} 0/1 flags"
            )
        if any(not 0.0 <= float(p) <= 1.0 for p in probs):
            raise PredictionFormatError(
                f"{path}:{lineno}: probabilities must lie in [0, 1]"
            )
        records.append(
            PredictionRecord(
                patch_id=str(obj["patch_id"]),
                probs=tuple(float(p) for p in probs),
                labels=tuple(int(v) for v in labels),
            )
        )
    return tuple(records), schema, float(threshold)
