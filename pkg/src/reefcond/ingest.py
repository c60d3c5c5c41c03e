"""Tiling, patch extraction, and deterministic train/test splitting.

Survey images are cut into fixed-size tiles on a row-major grid, labels are
attached per image (broadcast to every tile) or per tile, and the resulting
manifest is partitioned into train/test with a seeded, platform-independent
assignment.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import IngestError
from .schema import (
    LabelSchema,
    Manifest,
    PatchRecord,
    SPLIT_TEST,
    SPLIT_TRAIN,
    encode_labels,
)

GRANULARITY_IMAGE = "source_image"
GRANULARITY_PATCH = "patch"


@dataclass(frozen=True)
class TilingConfig:
    """Grid geometry for cutting survey images into square tiles."""

    tile_size: int = 512
    stride: int = 512
    drop_partial: bool = True

    def __post_init__(self) -> None:
        if self.tile_size <= 0:
            raise IngestError(f"tile_size must be positive, got {self.tile_size}")
        if self.stride <= 0:
            raise IngestError(f"stride must be positive, got {self.stride}")
        if self.stride > self.tile_size:
            raise IngestError(
                f"stride {self.stride} larger than tile_size {self.tile_size} "
                "would leave uncovered gaps"
            )


@dataclass(frozen=True)
class SplitConfig:
    """Seeded train/test partition settings."""

    train_fraction: float = 0.7
    seed: int = 0
    granularity: str = GRANULARITY_IMAGE

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise IngestError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}"
            )
        if self.granularity not in (GRANULARITY_IMAGE, GRANULARITY_PATCH):
            raise IngestError(f"unknown split granularity: {self.granularity!r}")


class TilePlacement(NamedTuple):
    row: int
    col: int
    x: int
    y: int


@dataclass(frozen=True)
class LabeledSource:
    """One survey image plus its label assignment.

    `labels` applies to every tile of the image unless `patch_labels`
    supplies an override for a specific (row, col) grid cell.
    """

    path: Path
    site_code: str
    labels: frozenset[str]
    patch_labels: Mapping[tuple[int, int], frozenset[str]] | None = None


def tile_grid(width: int, height: int, cfg: TilingConfig) -> list[TilePlacement]:
    """Enumerate tile placements row-major over a width x height image.

    Offsets are x = col * stride, y = row * stride. With drop_partial every
    tile lies fully inside the image; an image smaller than one tile yields
    an empty list. Without drop_partial, placements cover every stride
    offset inside the image and edge tiles may be cropped short.
    """
    if width <= 0 or height <= 0:
        raise IngestError(f"image dimensions must be positive, got {width}x{height}")
    if cfg.drop_partial:
        cols = (width - cfg.tile_size) // cfg.stride + 1 if width >= cfg.tile_size else 0
        rows = (height - cfg.tile_size) // cfg.stride + 1 if height >= cfg.tile_size else 0
    else:
        cols = -(-width // cfg.stride)
        rows = -(-height // cfg.stride)
    return [
        TilePlacement(row=r, col=c, x=c * cfg.stride, y=r * cfg.stride)
        for r in range(rows)
        for c in range(cols)
    ]


def load_rgb(path: str | Path) -> np.ndarray:
    """Decode an image file to an 8-bit RGB array, rejecting bad files by name."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise IngestError(f"cannot decode image {path}: {exc}") from exc


def image_size(path: str | Path) -> tuple[int, int]:
    """Read (width, height) from an image header without full decoding."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            return img.size
    except (UnidentifiedImageError, OSError) as exc:
        raise IngestError(f"cannot decode image {path}: {exc}") from exc


def crop_patches(
    image: np.ndarray, cfg: TilingConfig
) -> list[tuple[TilePlacement, np.ndarray]]:
    """Cut an RGB array into tiles in tile_grid order.

    Pixels are copied verbatim, never resampled. With drop_partial each tile
    is exactly tile_size x tile_size x 3.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise IngestError(f"expected an RGB array (H, W, 3), got shape {image.shape}")
    height, width = image.shape[:2]
    out = []
    for place in tile_grid(width, height, cfg):
        tile = image[
            place.y : place.y + cfg.tile_size, place.x : place.x + cfg.tile_size
        ].copy()
        out.append((place, tile))
    return out


def _unit_rank(seed: int, unit_id: str) -> str:
    return hashlib.sha256(f"{seed}:{unit_id}".encode("utf-8")).hexdigest()


def assign_split(manifest: Manifest, cfg: SplitConfig) -> Manifest:
    """Partition the manifest into train/test deterministically.

    Units (source images by default, individual patches otherwise) are ranked
    by hashing their sorted identifiers with the seed; the first
    round(train_fraction * unit_count) units become the train split. The
    assignment depends only on (seed, unit identifiers), so reruns and other
    platforms agree, and any prior assignment is overwritten.
    """
    if cfg.granularity == GRANULARITY_IMAGE:
        unit_of = lambda rec: rec.source_image
    else:
        unit_of = lambda rec: rec.patch_id
    units = sorted({unit_of(rec) for rec in manifest.records})
    if len(units) < 2:
        raise IngestError(
            f"need at least 2 {cfg.granularity} units to form both splits, got {len(units)}"
        )
    # floor(x + 0.5): half-up rounding, stable across platforms.
    train_count = int(math.floor(cfg.train_fraction * len(units) + 0.5))
    ranked = sorted(units, key=lambda uid: (_unit_rank(cfg.seed, uid), uid))
    train_units = set(ranked[:train_count])

    records = tuple(
        replace(rec, split=SPLIT_TRAIN if unit_of(rec) in train_units else SPLIT_TEST)
        for rec in manifest.records
    )
    return Manifest(schema=manifest.schema, records=records)


def _tile_label_vector(
    source: LabeledSource,
    place: TilePlacement,
    schema: LabelSchema,
) -> tuple[int, ...]:
    if source.patch_labels and (place.row, place.col) in source.patch_labels:
        return encode_labels(source.patch_labels[(place.row, place.col)], schema)
    return encode_labels(source.labels, schema)


def _check_sources(sources: Sequence[LabeledSource], schema: LabelSchema) -> None:
    stems_seen: dict[str, Path] = {}
    for source in sources:
        stem = Path(source.path).stem
        if stem in stems_seen:
            raise IngestError(
                f"duplicate source stem {stem!r}: {stems_seen[stem]} and {source.path}"
            )
        stems_seen[stem] = Path(source.path)
        encode_labels(source.labels, schema)
        for cell_labels in (source.patch_labels or {}).values():
            encode_labels(cell_labels, schema)


def build_manifest(
    sources: Sequence[LabeledSource],
    tiling: TilingConfig,
    schema: LabelSchema,
) -> Manifest:
    """Build patch records for every tile of every source image.

    Reads only image headers (no pixel decoding); use extract_patches to also
    write the tile rasters. patch_id is "<stem>_r<row>_c<col>".
    """
    _check_sources(sources, schema)
    records = []
    for source in sources:
        stem = Path(source.path).stem
        width, height = image_size(source.path)
        grid = tile_grid(width, height, tiling)
        valid = {(p.row, p.col) for p in grid}
        for row, col in source.patch_labels or {}:
            if (row, col) not in valid:
                raise IngestError(
                    f"{source.path}: patch label at ({row}, {col}) is outside the tile grid"
                )
        for place in grid:
            records.append(
                PatchRecord(
                    patch_id=f"{stem}_r{place.row}_c{place.col}",
                    source_image=Path(source.path).name,
                    site_code=source.site_code,
                    grid_row=place.row,
                    grid_col=place.col,
                    labels=_tile_label_vector(source, place, schema),
                )
            )
    return Manifest(schema=schema, records=tuple(records))


def extract_patches(
    sources: Sequence[LabeledSource],
    tiling: TilingConfig,
    schema: LabelSchema,
    patch_dir: str | Path,
) -> Manifest:
    """Crop every source image and write "<patch_id>.png" files losslessly.

    Decodes each image once, emits tiles in deterministic (source, row, col)
    order, and returns the matching manifest. The caller is responsible for
    making the destination directory appear atomically (see cli.cmd_ingest).
    """
    _check_sources(sources, schema)
    patch_dir = Path(patch_dir)
    patch_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for source in sources:
        stem = Path(source.path).stem
        image = load_rgb(source.path)
        tiles = crop_patches(image, tiling)
        valid = {(p.row, p.col) for p, _ in tiles}
        for row, col in source.patch_labels or {}:
            if (row, col) not in valid:
                raise IngestError(
                    f"{source.path}: patch label at ({row}, {col}) is outside the tile grid"
                )
        for place, tile in tiles:
            patch_id = f"{stem}_r{place.row}_c{place.col}"
            Image.fromarray(tile).save(patch_dir / f"{patch_id}.png", format="PNG")
            records.append(
                PatchRecord(
                    patch_id=patch_id,
                    source_image=Path(source.path).name,
                    site_code=source.site_code,
                    grid_row=place.row,
                    grid_col=place.col,
                    labels=_tile_label_vector(source, place, schema),
                )
            )
    return Manifest(schema=schema, records=tuple(records))
