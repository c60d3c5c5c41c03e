"""Multi-label training engine: per-channel binary cross-entropy over a
pluggable backbone, decoupled weight decay, and a fixed iteration budget.

The optimization recipe defaults to AdamW with learning rate 1e-4, weight
decay 5e-4, batch size 8, and 25000 iterations, where one iteration is one
batch step. Input tiles are resized to the backbone's native resolution at
the engine boundary; pixel data is never resampled before that.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .backbones import (
    BackboneSpec,
    build_classifier,
    get_backbone_spec,
    normalization_for,
    trainable_parameter_count,
)
from .ensemble import ProbabilityMatrix
from .errors import TrainError
from .fsutil import atomic_write_bytes, atomic_write_text
from .schema import LabelSchema, Manifest, SPLIT_TRAIN, default_schema

# Above this many training patches, preprocessed tensors are decoded per
# batch instead of held in memory.
_CACHE_LIMIT = 8192

# Hook signature for the (disabled by default) augmentation point: receives
# the batch RNG and one uint8 RGB tile, returns a uint8 RGB tile.
AugmentFn = Callable[[np.random.Generator, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe: constant learning rate, no schedule."""

    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 8
    iterations: int = 25000
    seed: int = 0
    input_resolution: int | None = None
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise TrainError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise TrainError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.iterations < 1:
            raise TrainError(f"iterations must be at least 1, got {self.iterations}")
        if self.input_resolution is not None and self.input_resolution <= 0:
            raise TrainError("input_resolution must be positive when set")


@dataclass
class ModelArtifact:
    """A trained classifier: network, provenance, and its training log."""

    model: nn.Module
    head: nn.Linear
    backbone: BackboneSpec
    config: TrainConfig
    schema: LabelSchema
    training_log: tuple[tuple[int, float], ...]
    metadata: dict


def sigmoid(z: np.ndarray | float) -> np.ndarray:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _checked_loss_inputs(
    logits: Sequence, targets: Sequence
) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise TrainError(f"logit shape {z.shape} does not match target shape {y.shape}")
    if z.size == 0:
        raise TrainError("loss is undefined for empty input")
    if not np.isfinite(z).all():
        raise TrainError("logits must be finite")
    if not np.isin(y, (0.0, 1.0)).all():
        raise TrainError("targets must contain only 0/1 flags")
    return z, y


def bce_multilabel_loss(logits: Sequence, targets: Sequence) -> float:
    """Mean per-channel binary cross-entropy, computed stably from logits.

    Each (sample, class) cell contributes
    -[y*log(sigmoid(z)) + (1-y)*log(1-sigmoid(z))], evaluated in the
    composite form max(z,0) - z*y + log1p(exp(-|z|)) so saturation never
    produces log(0).
    """
    z, y = _checked_loss_inputs(logits, targets)
    cell = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(cell.mean())


def bce_logit_gradient(logits: Sequence, targets: Sequence) -> np.ndarray:
    """Per-cell derivative of the cross-entropy term: sigmoid(z) - y.

    This is the gradient of each cell's loss with respect to its own logit;
    for the mean-reduced bce_multilabel_loss, divide by the cell count.
    """
    z, y = _checked_loss_inputs(logits, targets)
    return sigmoid(z) - y


def patch_loader(patches: Mapping[str, np.ndarray] | str | Path) -> Callable[[str], np.ndarray]:
    """Turn a patch source (directory of <id>.png files, or an id-keyed
    mapping of RGB arrays) into an id -> tile lookup."""
    if isinstance(patches, (str, Path)):
        root = Path(patches)

        def from_dir(patch_id: str) -> np.ndarray:
            path = root / f"{patch_id}.png"
            if not path.is_file():
                raise TrainError(f"patch file missing: {path}")
            with Image.open(path) as img:
                return np.asarray(img.convert("RGB"), dtype=np.uint8)

        return from_dir

    def from_mapping(patch_id: str) -> np.ndarray:
        try:
            return patches[patch_id]
        except KeyError:
            raise TrainError(f"patch missing from mapping: {patch_id!r}") from None

    return from_mapping


def _check_tile(tile: np.ndarray, what: str) -> np.ndarray:
    tile = np.asarray(tile)
    if tile.ndim != 3 or tile.shape[2] != 3:
        raise TrainError(f"{what}: expected an RGB tile (H, W, 3), got {tile.shape}")
    if tile.shape[0] != tile.shape[1]:
        raise TrainError(
            f"{what}: tile is {tile.shape[1]}x{tile.shape[0]}, but only square "
            "tiles can be resized to the backbone resolution"
        )
    return tile.astype(np.uint8, copy=False)


def _preprocess(
    tile: np.ndarray,
    resolution: int,
    mean: tuple[float, ...],
    std: tuple[float, ...],
) -> torch.Tensor:
    if tile.shape[0] != resolution:
        resized = Image.fromarray(tile).resize((resolution, resolution), Image.BILINEAR)
        tile = np.asarray(resized, dtype=np.uint8)
    x = torch.from_numpy(tile.astype(np.float32) / 255.0).permute(2, 0, 1)
    return (x - torch.tensor(mean).view(3, 1, 1)) / torch.tensor(std).view(3, 1, 1)


def _batch_ids(
    ids: Sequence[str], batch_size: int, rng: np.random.Generator
) -> Iterator[list[str]]:
    buffer: list[int] = []
    while True:
        buffer.extend(rng.permutation(len(ids)).tolist())
        while len(buffer) >= batch_size:
            chunk, buffer = buffer[:batch_size], buffer[batch_size:]
            yield [ids[i] for i in chunk]


def _as_logits(out) -> torch.Tensor:
    # Inception-style networks return (main, aux) during training.
    if torch.is_tensor(out):
        return out
    if hasattr(out, "logits"):
        return out.logits
    return out[0]


def train(
    manifest: Manifest,
    backbone: BackboneSpec,
    cfg: TrainConfig,
    patches: Mapping[str, np.ndarray] | str | Path,
    augment: AugmentFn | None = None,
) -> ModelArtifact:
    """Run exactly cfg.iterations batch steps over the manifest's train split.

    Batches are drawn from a seeded epoch-reshuffled stream; weight decay is
    decoupled (AdamW); the returned artifact carries the full (iteration,
    loss) log. With cfg.deterministic, repeated runs with one seed produce
    bit-identical loss sequences on the same platform.
    """
    train_records = manifest.split_records(SPLIT_TRAIN)
    if not train_records:
        raise TrainError("manifest has no train-split records")

    loader = patch_loader(patches)
    mean, std = normalization_for(backbone.name)
    resolution = cfg.input_resolution or backbone.native_resolution
    num_classes = manifest.schema.size

    torch.manual_seed(cfg.seed)
    prev_deterministic = torch.are_deterministic_algorithms_enabled()
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    try:
        built = build_classifier(backbone, num_classes)
        model = built.module
        model.train()

        ids = [rec.patch_id for rec in train_records]
        targets = {
            rec.patch_id: torch.tensor(rec.labels, dtype=torch.float32)
            for rec in train_records
        }
        cache: dict[str, torch.Tensor] = {}
        use_cache = augment is None and len(ids) <= _CACHE_LIMIT
        rng = np.random.default_rng(cfg.seed)

        def tensor_for(patch_id: str) -> torch.Tensor:
            if use_cache and patch_id in cache:
                return cache[patch_id]
            tile = _check_tile(loader(patch_id), patch_id)
            if augment is not None:
                tile = _check_tile(augment(rng, tile), f"{patch_id} (augmented)")
            tensor = _preprocess(tile, resolution, mean, std)
            if use_cache:
                cache[patch_id] = tensor
            return tensor

        optimizer = torch.optim.AdamW(
            model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
        )
        batches = _batch_ids(ids, cfg.batch_size, rng)
        log: list[tuple[int, float]] = []
        for iteration in range(1, cfg.iterations + 1):
            batch = next(batches)
            x = torch.stack([tensor_for(pid) for pid in batch])
            y = torch.stack([targets[pid] for pid in batch])
            logits = _as_logits(model(x))
            loss = F.binary_cross_entropy_with_logits(logits, y)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            log.append((iteration, float(loss.item())))
    finally:
        torch.use_deterministic_algorithms(prev_deterministic)

    model.eval()
    log_tuple = tuple(log)
    metadata = {
        "trainable_parameters": trainable_parameter_count(model),
        "reference_parameters": backbone.parameter_count,
        "feature_dim": built.feature_dim,
        "training_log_digest": training_log_digest(log_tuple),
    }
    return ModelArtifact(
        model=model,
        head=built.head,
        backbone=backbone,
        config=cfg,
        schema=manifest.schema,
        training_log=log_tuple,
        metadata=metadata,
    )


def predict_probabilities(
    artifact: ModelArtifact,
    tiles: Sequence[np.ndarray],
    ids: Sequence[str] | None = None,
    batch_size: int = 32,
) -> ProbabilityMatrix:
    """Per-tile class probabilities sigmoid(logits), in input order.

    Inference mutates no model state; identical inputs give identical rows.
    Row ids default to the positional index as a string.
    """
    if ids is None:
        ids = tuple(str(i) for i in range(len(tiles)))
    if len(ids) != len(tiles):
        raise TrainError(f"{len(ids)} ids do not match {len(tiles)} tiles")
    mean, std = normalization_for(artifact.backbone.name)
    resolution = artifact.config.input_resolution or artifact.backbone.native_resolution

    model = artifact.model
    was_training = model.training
    model.eval()
    rows: list[np.ndarray] = []
    try:
        with torch.no_grad():
            for start in range(0, len(tiles), batch_size):
                chunk = tiles[start : start + batch_size]
                x = torch.stack(
                    [
                        _preprocess(_check_tile(t, f"tile {start + k}"), resolution, mean, std)
                        for k, t in enumerate(chunk)
                    ]
                )
                probs = torch.sigmoid(_as_logits(model(x)))
                rows.extend(probs.double().numpy())
    finally:
        if was_training:
            model.train()
    values = (
        np.asarray(rows, dtype=np.float64)
        if rows
        else np.empty((0, artifact.schema.size))
    )
    return ProbabilityMatrix(ids=tuple(ids), values=values)


def parameter_count(obj: ModelArtifact | nn.Module) -> int:
    """Trainable scalar parameters of a model or artifact (trunk plus head)."""
    module = obj.model if isinstance(obj, ModelArtifact) else obj
    return trainable_parameter_count(module)


def training_log_text(log: Sequence[tuple[int, float]]) -> str:
    """Line-delimited (iteration, loss) records; loss keeps full precision."""
    return "".join(f"{iteration}\t{loss!r}\n" for iteration, loss in log)


def training_log_digest(log: Sequence[tuple[int, float]]) -> str:
    return hashlib.sha256(training_log_text(log).encode("utf-8")).hexdigest()


def write_training_log(log: Sequence[tuple[int, float]], path: str | Path) -> None:
    atomic_write_text(Path(path), training_log_text(log))


def read_training_log(path: str | Path) -> tuple[tuple[int, float], ...]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        try:
            iteration, loss = line.split("\t")
            out.append((int(iteration), float(loss)))
        except ValueError as exc:
            raise TrainError(f"{path}:{lineno}: malformed training-log line") from exc
    return tuple(out)


def save_artifact(artifact: ModelArtifact, checkpoint_dir: str | Path) -> None:
    """Write a checkpoint directory: metadata.json, weights.pt, training_log.tsv."""
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    cfg = artifact.config
    metadata = {
        "backbone": artifact.backbone.name,
        "pretrained": artifact.backbone.pretrained,
        "native_resolution": artifact.backbone.native_resolution,
        "reference_parameters": artifact.backbone.parameter_count,
        "num_classes": artifact.schema.size,
        "classes": list(artifact.schema.codes),
        "config": {
            "learning_rate": cfg.learning_rate,
            "weight_decay": cfg.weight_decay,
            "batch_size": cfg.batch_size,
            "iterations": cfg.iterations,
            "seed": cfg.seed,
            "input_resolution": cfg.input_resolution,
            "deterministic": cfg.deterministic,
        },
        **artifact.metadata,
    }
    atomic_write_text(
        checkpoint_dir / "metadata.json", json.dumps(metadata, indent=2) + "\n"
    )
    buffer = io.BytesIO()
    torch.save(artifact.model.state_dict(), buffer)
    atomic_write_bytes(checkpoint_dir / "weights.pt", buffer.getvalue())
    write_training_log(artifact.training_log, checkpoint_dir / "training_log.tsv")


def load_artifact(checkpoint_dir: str | Path) -> ModelArtifact:
    """Rebuild a trained artifact from a checkpoint directory.

    The architecture is reconstructed from the registry and the checkpoint's
    own weights are loaded, so no pretrained bundle is needed.
    """
    checkpoint_dir = Path(checkpoint_dir)
    meta_path = checkpoint_dir / "metadata.json"
    if not meta_path.is_file():
        raise TrainError(f"not a checkpoint directory: {checkpoint_dir}")
    metadata = json.loads(meta_path.read_text(encoding="utf-8"))

    schema = default_schema()
    if metadata["classes"] != list(schema.codes):
        raise TrainError(
            f"{meta_path}: checkpoint class order {metadata['classes']} does not "
            f"match the canonical order {list(schema.codes)}"
        )
    spec = get_backbone_spec(metadata["backbone"], pretrained=metadata["pretrained"])
    built = build_classifier(replace(spec, pretrained=False), metadata["num_classes"])
    state = torch.load(checkpoint_dir / "weights.pt", map_location="cpu")
    built.module.load_state_dict(state)
    built.module.eval()

    cfg_raw = metadata["config"]
    cfg = TrainConfig(
        learning_rate=cfg_raw["learning_rate"],
        weight_decay=cfg_raw["weight_decay"],
        batch_size=cfg_raw["batch_size"],
        iterations=cfg_raw["iterations"],
        seed=cfg_raw["seed"],
        input_resolution=cfg_raw["input_resolution"],
        deterministic=cfg_raw["deterministic"],
    )
    log_path = checkpoint_dir / "training_log.tsv"
    log = read_training_log(log_path) if log_path.is_file() else ()
    extra = {
        key: metadata[key]
        for key in ("trainable_parameters", "reference_parameters", "feature_dim", "training_log_digest")
        if key in metadata
    }
    return ModelArtifact(
        model=built.module,
        head=built.head,
        backbone=spec,
        config=cfg,
        schema=schema,
        training_log=log,
        metadata=extra,
    )
