"""Synthetic color-coded imagery for desk-scale runs.

Each class gets a distinct anchor color; a patch's dominant color encodes its
label set. The signal is linearly separable by design, so a small network
must be able to fit it essentially perfectly, which makes these patches a
useful end-to-end sanity check for the whole train/predict path.
"""

from __future__ import annotations

import numpy as np

from .schema import LabelSchema, Manifest, PatchRecord, SPLIT_TRAIN, UNKNOWN_SITE

# One well-separated RGB anchor per class, in canonical class order.
CLASS_COLORS: tuple[tuple[int, int, int], ...] = (
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
)

_BACKGROUND = (128, 128, 128)


def make_patch(
    labels: tuple[int, ...],
    size: int,
    rng: np.random.Generator,
    noise: int = 8,
) -> np.ndarray:
    """Render one tile: the mean color of its active classes plus pixel noise.

    An all-zero label vector renders as noisy neutral gray.
    """
    active = [CLASS_COLORS[i] for i, flag in enumerate(labels) if flag]
    base = np.mean(active, axis=0) if active else np.array(_BACKGROUND, dtype=float)
    tile = np.tile(base.reshape(1, 1, 3), (size, size, 1))
    tile = tile + rng.integers(-noise, noise + 1, size=tile.shape)
    return np.clip(tile, 0, 255).astype(np.uint8)


def make_color_coded_dataset(
    schema: LabelSchema,
    per_class: int = 4,
    size: int = 64,
    seed: int = 0,
    split: str = SPLIT_TRAIN,
) -> tuple[dict[str, np.ndarray], Manifest]:
    """Build per_class single-label patches for every class.

    Returns the tile mapping and a manifest whose records all carry the given
    split, ready to feed straight into the training engine.
    """
    rng = np.random.default_rng(seed)
    patches: dict[str, np.ndarray] = {}
    records = []
    for class_index, code in enumerate(schema.codes):
        labels = tuple(1 if i == class_index else 0 for i in range(schema.size))
        for copy in range(per_class):
            patch_id = f"synth_{code.lower()}_{copy}"
            patches[patch_id] = make_patch(labels, size, rng)
            records.append(
                PatchRecord(
                    patch_id=patch_id,
                    source_image=f"synth_{code.lower()}.png",
                    site_code=UNKNOWN_SITE,
                    grid_row=0,
                    grid_col=copy,
                    labels=labels,
                    split=split,
                )
            )
    return patches, Manifest(schema=schema, records=tuple(records))
