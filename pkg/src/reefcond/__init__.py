"""reefcond: multi-label coral condition classification toolkit.

Tiles survey images into labeled patches, trains backbone-pluggable
multi-label classifiers with per-channel binary cross-entropy, fuses model
probabilities by uniform averaging, and evaluates with exact-match ratio and
micro/macro F1.
"""

from .schema import (
    CLASS_CODES,
    CLASS_TABLE,
    LabelSchema,
    LabelVector,
    Manifest,
    PatchRecord,
    ValidationReport,
    decode_labels,
    default_schema,
    encode_labels,
    read_manifest,
    validate_manifest,
    write_manifest,
)
from .ingest import (
    LabeledSource,
    SplitConfig,
    TilingConfig,
    assign_split,
    build_manifest,
    crop_patches,
    extract_patches,
    tile_grid,
)
from .ensemble import (
    DecisionConfig,
    EnsembleSpec,
    PredictionRecord,
    ProbabilityMatrix,
    ensemble_average,
    read_predictions,
    threshold_decide,
    write_predictions,
)
from .metrics import (
    ClassMetrics,
    ConfusionCounts,
    ErrorAnalysis,
    MetricsReport,
    class_f1,
    compute_report,
    confusion_counts,
    fn_fp_table,
    macro_f1,
    match_ratio,
    micro_f1,
    misclassification_report,
    render_report,
)
from .errors import ReefcondError

__version__ = "0.1.0"

__all__ = [
    "CLASS_CODES",
    "CLASS_TABLE",
    "ClassMetrics",
    "ConfusionCounts",
    "DecisionConfig",
    "EnsembleSpec",
    "ErrorAnalysis",
    "LabelSchema",
    "LabelVector",
    "LabeledSource",
    "Manifest",
    "MetricsReport",
    "PatchRecord",
    "PredictionRecord",
    "ProbabilityMatrix",
    "ReefcondError",
    "SplitConfig",
    "TilingConfig",
    "ValidationReport",
    "assign_split",
    "build_manifest",
    "class_f1",
    "compute_report",
    "confusion_counts",
    "crop_patches",
    "decode_labels",
    "default_schema",
    "encode_labels",
    "ensemble_average",
    "extract_patches",
    "fn_fp_table",
    "macro_f1",
    "match_ratio",
    "micro_f1",
    "misclassification_report",
    "read_manifest",
    "read_predictions",
    "render_report",
    "threshold_decide",
    "tile_grid",
    "validate_manifest",
    "write_manifest",
    "write_predictions",
]
