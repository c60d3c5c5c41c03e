"""Command-line workflow: ingest -> split -> train -> predict -> ensemble ->
evaluate -> analyze -> query.

Every command validates its inputs before writing anything, writes outputs
atomically (temp file + rename), and exits nonzero on any failure. Tables go
to stdout; machine-readable files go to explicit paths. All randomness
enters through --seed flags.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

from . import ingest as ingest_mod
from .ensemble import (
    DecisionConfig,
    PredictionRecord,
    ensemble_average,
    read_predictions,
    records_to_matrix,
    threshold_decide,
    write_predictions,
)
from .errors import IngestError, MetricsError, QueryError, ReefcondError
from .fsutil import atomic_write_text
from .ingest import LabeledSource, SplitConfig, TilingConfig
from .metrics import (
    ConfusionCounts,
    compute_report,
    fn_fp_table,
    misclassification_report,
    render_error_analysis,
    render_report,
    report_to_dict,
)
from .schema import (
    CLASS_CODES,
    Manifest,
    PatchRecord,
    SPLIT_VALUES,
    UNKNOWN_SITE,
    default_schema,
    read_manifest,
    validate_manifest,
    write_manifest,
)


@dataclass(frozen=True)
class QueryExpression:
    """Label filter: every required code present, no forbidden code present."""

    required: frozenset[str]
    forbidden: frozenset[str]
    site: str | None = None
    split: str | None = None

    def __post_init__(self) -> None:
        overlap = self.required & self.forbidden
        if overlap:
            raise QueryError(
                f"codes cannot be both required and forbidden: {sorted(overlap)}"
            )


def evaluate_query(
    manifest: Manifest,
    expr: QueryExpression,
    predicted_labels: dict[str, tuple[int, ...]] | None = None,
) -> list[str]:
    """Return sorted patch ids matching the expression.

    Labels come from the manifest unless predicted_labels (patch_id keyed)
    is given; site and split filters always come from the manifest.
    """
    schema = manifest.schema
    required = {schema.index(code) for code in expr.required}
    forbidden = {schema.index(code) for code in expr.forbidden}
    hits = []
    for rec in manifest.records:
        if expr.site is not None and rec.site_code != expr.site:
            continue
        if expr.split is not None and rec.split != expr.split:
            continue
        if predicted_labels is None:
            labels = rec.labels
        else:
            if rec.patch_id not in predicted_labels:
                continue
            labels = predicted_labels[rec.patch_id]
        if any(not labels[i] for i in required):
            continue
        if any(labels[i] for i in forbidden):
            continue
        hits.append(rec.patch_id)
    return sorted(hits)


def _parse_codes(raw: str | None) -> frozenset[str]:
    if not raw:
        return frozenset()
    codes = frozenset(part.strip() for part in raw.split(",") if part.strip())
    schema = default_schema()
    for code in sorted(codes):
        if code not in schema.codes:
            raise QueryError(f"unknown class code: {code!r}")
    return codes


def _load_manifest(path: str, schema_check: bool) -> Manifest:
    manifest = read_manifest(path)
    report = validate_manifest(manifest)
    if schema_check:
        for warning in report.warnings:
            print(f"warning: {warning}", file=sys.stderr)
    if not report.ok:
        raise ReefcondError(
            f"{path}: manifest validation failed:\n  " + "\n  ".join(report.errors)
        )
    return manifest


def _parse_labels_file(path: Path, images_dir: Path) -> list[LabeledSource]:
    if not path.is_file():
        raise IngestError(f"labels file not found: {path}")
    sources = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict) or "image" not in obj or "labels" not in obj:
            raise IngestError(f"{path}:{lineno}: entry needs 'image' and 'labels'")
        name = obj["image"]
        if name in seen:
            raise IngestError(f"{path}:{lineno}: duplicate image entry {name!r}")
        seen.add(name)
        image_path = Path(name)
        if not image_path.is_absolute():
            image_path = images_dir / image_path
        if not image_path.is_file():
            raise IngestError(f"{path}:{lineno}: image not found: {image_path}")
        patch_labels = None
        if "patch_labels" in obj:
            patch_labels = {}
            for cell in obj["patch_labels"]:
                patch_labels[(int(cell["row"]), int(cell["col"]))] = frozenset(
                    cell["labels"]
                )
        sources.append(
            LabeledSource(
                path=image_path,
                site_code=obj.get("site_code", UNKNOWN_SITE),
                labels=frozenset(obj["labels"]),
                patch_labels=patch_labels,
            )
        )
    return sources


def cmd_ingest(args: argparse.Namespace) -> int:
    schema = default_schema()
    tiling = TilingConfig(
        tile_size=args.tile_size,
        stride=args.stride or args.tile_size,
        drop_partial=not args.keep_partial,
    )
    sources = _parse_labels_file(Path(args.labels), Path(args.images))
    # Dry-run the record construction first: label codes, duplicate stems,
    # and grid bounds all fail here before any output exists.
    ingest_mod.build_manifest(sources, tiling, schema)

    patch_dir = Path(args.patch_dir)
    if patch_dir.exists() and any(patch_dir.iterdir()):
        raise IngestError(f"patch directory already exists and is not empty: {patch_dir}")
    patch_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(
        tempfile.mkdtemp(prefix=f".{patch_dir.name}.", dir=patch_dir.parent)
    )
    try:
        manifest = ingest_mod.extract_patches(sources, tiling, schema, staging)
        report = validate_manifest(manifest)
        if not report.ok:
            raise IngestError(
                "ingest produced an invalid manifest:\n  " + "\n  ".join(report.errors)
            )
        if args.schema_check:
            for warning in report.warnings:
                print(f"warning: {warning}", file=sys.stderr)
        if patch_dir.exists():
            patch_dir.rmdir()
        os.rename(staging, patch_dir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    write_manifest(manifest, args.out)
    print(
        f"ingested {len(sources)} images into {len(manifest)} patches -> {args.out}",
        file=sys.stderr,
    )
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    manifest = _load_manifest(args.manifest, args.schema_check)
    cfg = SplitConfig(
        train_fraction=args.train_fraction,
        seed=args.seed,
        granularity=args.granularity,
    )
    assigned = ingest_mod.assign_split(manifest, cfg)
    write_manifest(assigned, args.out)
    train_n = len(assigned.split_records("train"))
    test_n = len(assigned.split_records("test"))
    print(f"split {len(assigned)} patches: {train_n} train, {test_n} test", file=sys.stderr)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from . import train as train_mod
    from .backbones import get_backbone_spec

    manifest = _load_manifest(args.manifest, args.schema_check)
    spec = get_backbone_spec(args.backbone, pretrained=args.pretrained)
    cfg = train_mod.TrainConfig(
        learning_rate=args.learning_rate,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        iterations=args.iterations,
        seed=args.seed,
        input_resolution=args.input_resolution,
        deterministic=not args.nondeterministic,
    )
    artifact = train_mod.train(manifest, spec, cfg, args.patch_dir)
    train_mod.save_artifact(artifact, args.out)
    if args.log:
        train_mod.write_training_log(artifact.training_log, args.log)
    final_loss = artifact.training_log[-1][1]
    print(
        f"trained {spec.name} for {cfg.iterations} iterations "
        f"(final loss {final_loss:.6f}) -> {args.out}",
        file=sys.stderr,
    )
    return 0


def _records_for_split(manifest: Manifest, split: str) -> tuple[PatchRecord, ...]:
    if split == "all":
        return manifest.records
    return manifest.split_records(split)


def cmd_predict(args: argparse.Namespace) -> int:
    from . import train as train_mod

    manifest = _load_manifest(args.manifest, args.schema_check)
    records = _records_for_split(manifest, args.split)
    if not records:
        raise ReefcondError(f"no records in split {args.split!r}")
    artifact = train_mod.load_artifact(args.checkpoint)
    loader = train_mod.patch_loader(args.patch_dir)
    cfg = DecisionConfig(threshold=args.threshold)

    ordered = sorted(records, key=lambda rec: rec.patch_id)
    out_records: list[PredictionRecord] = []
    for start in range(0, len(ordered), args.batch_size):
        chunk = ordered[start : start + args.batch_size]
        matrix = train_mod.predict_probabilities(
            artifact,
            [loader(rec.patch_id) for rec in chunk],
            ids=[rec.patch_id for rec in chunk],
            batch_size=args.batch_size,
        )
        out_records.extend(threshold_decide(matrix, cfg))
    write_predictions(out_records, args.out, manifest.schema, cfg.threshold)
    print(f"predicted {len(out_records)} patches -> {args.out}", file=sys.stderr)
    return 0


def cmd_ensemble(args: argparse.Namespace) -> int:
    matrices = []
    for member in args.inputs:
        records, _, _ = read_predictions(member)
        matrices.append(records_to_matrix(records))
    averaged = ensemble_average(matrices)
    cfg = DecisionConfig(threshold=args.threshold)
    fused = threshold_decide(averaged, cfg)
    write_predictions(fused, args.out, default_schema(), cfg.threshold)
    print(
        f"averaged {len(matrices)} prediction files over {len(fused)} patches -> {args.out}",
        file=sys.stderr,
    )
    return 0


def _paired_label_matrices(
    manifest: Manifest, predictions_path: str, split: str
) -> tuple[list[tuple[int, ...]], list[tuple[int, ...]], list[str]]:
    records = _records_for_split(manifest, split)
    truth_by_id = {rec.patch_id: rec.labels for rec in records}
    predictions, _, _ = read_predictions(predictions_path)
    pred_by_id = {rec.patch_id: rec.labels for rec in predictions}
    missing = sorted(set(truth_by_id) - set(pred_by_id))
    extra = sorted(set(pred_by_id) - set(truth_by_id))
    if missing or extra:
        raise MetricsError(
            f"prediction ids do not match the {split!r} split: "
            f"missing {missing[:10]}, unexpected {extra[:10]}"
        )
    ids = sorted(truth_by_id)
    predicted = [pred_by_id[pid] for pid in ids]
    truth = [truth_by_id[pid] for pid in ids]
    return predicted, truth, ids


def cmd_evaluate(args: argparse.Namespace) -> int:
    manifest = _load_manifest(args.manifest, args.schema_check)
    predicted, truth, _ = _paired_label_matrices(manifest, args.predictions, args.split)
    report = compute_report(predicted, truth, parameter_count=args.parameter_count)
    sys.stdout.write(render_report(report, manifest.schema))
    if args.out:
        payload = report_to_dict(report, manifest.schema)
        atomic_write_text(Path(args.out), json.dumps(payload, indent=2) + "\n")
    return 0


def _counts_from_fixture(path: str) -> ConfusionCounts:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if tuple(obj.get("classes", ())) != CLASS_CODES:
        raise MetricsError(
            f"{path}: counts file must carry the canonical class order {list(CLASS_CODES)}"
        )
    n = len(CLASS_CODES)
    def field(name: str) -> tuple[int, ...]:
        values = obj.get(name, [0] * n)
        if len(values) != n:
            raise MetricsError(f"{path}: field {name!r} must have {n} entries")
        return tuple(int(v) for v in values)
    return ConfusionCounts(tp=field("tp"), fp=field("fp"), fn=field("fn"), tn=field("tn"))


def cmd_analyze(args: argparse.Namespace) -> int:
    schema = default_schema()
    if args.counts:
        analysis = fn_fp_table(_counts_from_fixture(args.counts), schema)
    else:
        if not (args.manifest and args.predictions):
            raise ReefcondError("analyze needs either --counts or --manifest with --predictions")
        manifest = _load_manifest(args.manifest, args.schema_check)
        predicted, truth, _ = _paired_label_matrices(
            manifest, args.predictions, args.split
        )
        analysis = misclassification_report(predicted, truth, schema)
    text = render_error_analysis(analysis)
    sys.stdout.write(text)
    if args.out:
        atomic_write_text(Path(args.out), text)
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    manifest = _load_manifest(args.manifest, args.schema_check)
    expr = QueryExpression(
        required=_parse_codes(args.require),
        forbidden=_parse_codes(args.forbid),
        site=args.site,
        split=args.split,
    )
    predicted_labels = None
    if args.predictions:
        records, _, _ = read_predictions(args.predictions)
        predicted_labels = {rec.patch_id: rec.labels for rec in records}
    hits = evaluate_query(manifest, expr, predicted_labels)

    by_site: dict[str, int] = {}
    site_of = {rec.patch_id: rec.site_code for rec in manifest.records}
    for pid in hits:
        by_site[site_of[pid]] = by_site.get(site_of[pid], 0) + 1

    for pid in hits:
        print(pid)
    print(f"# matched {len(hits)} patches")
    for site in sorted(by_site):
        print(f"# {site}: {by_site[site]}")
    if args.out:
        atomic_write_text(Path(args.out), "".join(f"{pid}\n" for pid in hits))
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--schema-check",
        action="store_true",
        help="print manifest validation warnings (errors always fail)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reefcond",
        description="Multi-label coral condition classification workflow",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="tile labeled survey images into a patch manifest")
    p.add_argument("--images", required=True, help="directory of source images")
    p.add_argument("--labels", required=True, help="JSONL labels file")
    p.add_argument("--out", required=True, help="output manifest path")
    p.add_argument("--patch-dir", required=True, help="output directory for patch PNGs")
    p.add_argument("--tile-size", type=int, default=512)
    p.add_argument("--stride", type=int, default=None, help="default: tile size")
    p.add_argument(
        "--keep-partial",
        action="store_true",
        help="keep cropped edge tiles instead of dropping partial ones",
    )
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="assign train/test splits deterministically")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument(
        "--granularity",
        choices=[ingest_mod.GRANULARITY_IMAGE, ingest_mod.GRANULARITY_PATCH],
        default=ingest_mod.GRANULARITY_IMAGE,
    )
    _add_common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a multi-label classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--patch-dir", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--iterations", type=int, default=25000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input-resolution", type=int, default=None)
    pretrained = p.add_mutually_exclusive_group()
    pretrained.add_argument(
        "--pretrained", dest="pretrained", action="store_true", default=None
    )
    pretrained.add_argument("--no-pretrained", dest="pretrained", action="store_false")
    p.add_argument(
        "--nondeterministic",
        action="store_true",
        help="allow nondeterministic kernels (faster on some platforms)",
    )
    p.add_argument("--log", default=None, help="also write the training log here")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write per-patch class probabilities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--patch-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=32)
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ensemble", help="average prediction files cell-wise")
    p.add_argument("inputs", nargs="+", help="member prediction files")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", help="score predictions against manifest truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--out", default=None, help="write the structured JSON report here")
    p.add_argument(
        "--parameter-count",
        type=int,
        default=None,
        help="trainable-parameter count to include in the rendering",
    )
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="FN/FP balance and misclassification patterns")
    p.add_argument("--manifest", default=None)
    p.add_argument("--predictions", default=None)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument(
        "--counts",
        default=None,
        help="JSON counts fixture (classes plus fn/fp and optional tp/tn arrays)",
    )
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("query", help="retrieve patch ids by label expression")
    p.add_argument("--manifest", required=True)
    p.add_argument(
        "--predictions",
        default=None,
        help="query predicted labels from this file instead of ground truth",
    )
    p.add_argument("--require", default=None, help="comma-separated codes, all required")
    p.add_argument("--forbid", default=None, help="comma-separated codes, none allowed")
    p.add_argument("--site", default=None)
    p.add_argument("--split", choices=list(SPLIT_VALUES), default=None)
    p.add_argument("--out", default=None, help="write matching ids to this file")
    _add_common(p)
    p.set_defaults(func=cmd_query)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ReefcondError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
