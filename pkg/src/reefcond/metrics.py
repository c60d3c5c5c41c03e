"""Multi-label evaluation: per-class F1, macro/micro F1, match ratio, and
false-negative/false-positive error accounting.

All operations consume binary label matrices; probability thresholding
happens upstream so these stay pure and easy to check against brute force.
Display rounding is half-up at two decimals and never feeds back into the
computed values.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

import numpy as np

from .errors import MetricsError
from .schema import LabelSchema

# Keyed by the predicted label-code tuple; counts how often a false negative
# of some class co-occurred with exactly that predicted set.
CoPredictionTally = tuple[tuple[tuple[str, ...], int], ...]


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class TP/FP/FN/TN tallies over a fixed class ordering."""

    tp: tuple[int, ...]
    fp: tuple[int, ...]
    fn: tuple[int, ...]
    tn: tuple[int, ...]

    def __post_init__(self) -> None:
        lengths = {len(self.tp), len(self.fp), len(self.fn), len(self.tn)}
        if len(lengths) != 1:
            raise MetricsError(f"count arrays must share one length, got {lengths}")
        for arr in (self.tp, self.fp, self.fn, self.tn):
            if any(v < 0 for v in arr):
                raise MetricsError("confusion counts must be nonnegative")

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    def totals(self) -> tuple[int, int, int, int]:
        return (sum(self.tp), sum(self.fp), sum(self.fn), sum(self.tn))


@dataclass(frozen=True)
class ClassMetrics:
    """Per-class precision/recall/F1 plus degenerate-denominator flags."""

    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    degenerate: tuple[bool, ...]


@dataclass(frozen=True)
class MetricsReport:
    """All scalar metrics for one evaluation run."""

    sample_count: int
    match_ratio: float
    micro_f1: float
    macro_f1: float
    micro_degenerate: bool
    class_metrics: ClassMetrics
    counts: ConfusionCounts
    parameter_count: int | None = None


@dataclass(frozen=True)
class FnFpRow:
    """One error-balance row: FN and FP counts plus their ratio.

    ratio is None when FP = 0 (undefined, not infinity); ratio_display is the
    half-up two-decimal rendering used in reports.
    """

    code: str
    fn: int
    fp: int
    ratio: float | None
    ratio_display: str


@dataclass(frozen=True)
class ErrorAnalysis:
    """FN/FP balance rows and, when computed, co-prediction tallies."""

    rows: tuple[FnFpRow, ...]
    co_predictions: Mapping[str, CoPredictionTally] | None = None


def _as_label_matrix(vectors: Sequence[Sequence[int]], name: str) -> np.ndarray:
    matrix = np.asarray(vectors, dtype=np.int64)
    if matrix.ndim != 2:
        raise MetricsError(f"{name} must be a sequence of equal-width label vectors")
    if not np.isin(matrix, (0, 1)).all():
        raise MetricsError(f"{name} must contain only 0/1 flags")
    return matrix


def _paired_matrices(
    predicted: Sequence[Sequence[int]], truth: Sequence[Sequence[int]]
) -> tuple[np.ndarray, np.ndarray]:
    pred = _as_label_matrix(predicted, "predicted")
    true = _as_label_matrix(truth, "truth")
    if pred.shape != true.shape:
        raise MetricsError(
            f"predicted shape {pred.shape} does not match truth shape {true.shape}"
        )
    return pred, true


def confusion_counts(
    predicted: Sequence[Sequence[int]], truth: Sequence[Sequence[int]]
) -> ConfusionCounts:
    """Count per-class TP/FP/FN/TN over aligned prediction/truth matrices."""
    pred, true = _paired_matrices(predicted, truth)
    tp = ((pred == 1) & (true == 1)).sum(axis=0)
    fp = ((pred == 1) & (true == 0)).sum(axis=0)
    fn = ((pred == 0) & (true == 1)).sum(axis=0)
    tn = ((pred == 0) & (true == 0)).sum(axis=0)
    return ConfusionCounts(
        tp=tuple(int(v) for v in tp),
        fp=tuple(int(v) for v in fp),
        fn=tuple(int(v) for v in fn),
        tn=tuple(int(v) for v in tn),
    )


def class_f1(counts: ConfusionCounts) -> ClassMetrics:
    """Per-class precision, recall, and F1.

    Zero-denominator convention: the affected value is 0 and the class is
    flagged degenerate instead of raising.
    """
    precision, recall, f1, degenerate = [], [], [], []
    for tp, fp, fn in zip(counts.tp, counts.fp, counts.fn):
        flagged = False
        if tp + fp > 0:
            p = tp / (tp + fp)
        else:
            p, flagged = 0.0, True
        if tp + fn > 0:
            r = tp / (tp + fn)
        else:
            r, flagged = 0.0, True
        if p + r > 0:
            f = 2.0 * p * r / (p + r)
        else:
            f, flagged = 0.0, True
        precision.append(p)
        recall.append(r)
        f1.append(f)
        degenerate.append(flagged)
    return ClassMetrics(
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
        degenerate=tuple(degenerate),
    )


def macro_f1(metrics: ClassMetrics) -> float:
    """Unweighted arithmetic mean of the per-class F1 scores."""
    if not metrics.f1:
        raise MetricsError("macro F1 requires at least one class")
    return sum(metrics.f1) / len(metrics.f1)


def micro_f1(counts: ConfusionCounts) -> float:
    """F1 of globally pooled TP/FP/FN: 2*STP / (2*STP + SFP + SFN).

    Returns 0 when every pooled count is zero (degenerate; see
    micro_is_degenerate).
    """
    tp, fp, fn, _ = counts.totals()
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0
    return 2.0 * tp / denom


def micro_is_degenerate(counts: ConfusionCounts) -> bool:
    tp, fp, fn, _ = counts.totals()
    return (2 * tp + fp + fn) == 0


def match_ratio(
    predicted: Sequence[Sequence[int]], truth: Sequence[Sequence[int]]
) -> float:
    """Fraction of samples whose whole predicted vector equals the truth."""
    pred, true = _paired_matrices(predicted, truth)
    if pred.shape[0] == 0:
        raise MetricsError("match ratio is undefined for empty input")
    exact = (pred == true).all(axis=1).sum()
    return float(exact) / pred.shape[0]


def compute_report(
    predicted: Sequence[Sequence[int]],
    truth: Sequence[Sequence[int]],
    parameter_count: int | None = None,
) -> MetricsReport:
    """Evaluate predictions against truth and bundle every metric."""
    pred, true = _paired_matrices(predicted, truth)
    counts = confusion_counts(pred, true)
    per_class = class_f1(counts)
    return MetricsReport(
        sample_count=pred.shape[0],
        match_ratio=match_ratio(pred, true),
        micro_f1=micro_f1(counts),
        macro_f1=macro_f1(per_class),
        micro_degenerate=micro_is_degenerate(counts),
        class_metrics=per_class,
        counts=counts,
        parameter_count=parameter_count,
    )


def round_half_up(value: Decimal, places: int = 2) -> Decimal:
    return value.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


def fn_fp_table(counts: ConfusionCounts, schema: LabelSchema) -> ErrorAnalysis:
    """Per-class FN/FP balance rows with exact half-up two-decimal ratios.

    The ratio is computed in decimal arithmetic from the integer counts so
    the displayed value is the true rounding, not a float artifact. FP = 0
    marks the ratio undefined.
    """
    if counts.num_classes != schema.size:
        raise MetricsError(
            f"counts cover {counts.num_classes} classes, schema has {schema.size}"
        )
    rows = []
    for code, fn, fp in zip(schema.codes, counts.fn, counts.fp):
        if fp > 0:
            exact = Decimal(fn) / Decimal(fp)
            rows.append(
                FnFpRow(
                    code=code,
                    fn=fn,
                    fp=fp,
                    ratio=fn / fp,
                    ratio_display=str(round_half_up(exact)),
                )
            )
        else:
            rows.append(FnFpRow(code=code, fn=fn, fp=fp, ratio=None, ratio_display="-"))
    return ErrorAnalysis(rows=tuple(rows))


def misclassification_report(
    predicted: Sequence[Sequence[int]],
    truth: Sequence[Sequence[int]],
    schema: LabelSchema,
) -> ErrorAnalysis:
    """For each class, tally what WAS predicted on its false negatives.

    Each tally maps a predicted label set (as a code tuple in canonical
    order) to its frequency, sorted by frequency descending with ties broken
    by canonical class order. Also fills the FN/FP rows for convenience.
    """
    pred, true = _paired_matrices(predicted, truth)
    if pred.shape[1] != schema.size:
        raise MetricsError(
            f"label width {pred.shape[1]} does not match schema size {schema.size}"
        )
    counts = confusion_counts(pred, true)

    tallies: dict[str, CoPredictionTally] = {}
    for idx, code in enumerate(schema.codes):
        counter: Counter[tuple[str, ...]] = Counter()
        fn_rows = np.where((true[:, idx] == 1) & (pred[:, idx] == 0))[0]
        for row in fn_rows:
            predicted_set = tuple(
                schema.codes[j] for j in range(schema.size) if pred[row, j] == 1
            )
            counter[predicted_set] += 1
        order = sorted(
            counter.items(),
            key=lambda item: (-item[1], tuple(schema.index(c) for c in item[0])),
        )
        tallies[code] = tuple(order)

    return replace(fn_fp_table(counts, schema), co_predictions=tallies)


def _pct(value: float) -> str:
    return str(round_half_up(Decimal(value) * 100))


def _format_parameter_count(n: int) -> str:
    if n >= 10**6:
        return f"{n / 10**6:.1f}M"
    return str(n)


def render_report(report: MetricsReport, schema: LabelSchema) -> str:
    """Render the report as one aligned text table.

    Columns: Match Ratio, Micro F1, Macro F1, one per-class F1 column per
    code in canonical order, then Parameters when available. Values are
    percentages rounded half-up to two decimals.
    """
    if report.counts.num_classes != schema.size:
        raise MetricsError("report class count does not match schema")
    headers = ["Match Ratio", "Micro F1", "Macro F1", *schema.codes]
    values = [
        _pct(report.match_ratio),
        _pct(report.micro_f1),
        _pct(report.macro_f1),
        *(_pct(f) for f in report.class_metrics.f1),
    ]
    if report.parameter_count is not None:
        headers.append("Parameters")
        values.append(_format_parameter_count(report.parameter_count))
    widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
    header_line = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
    value_line = "  ".join(v.rjust(w) for v, w in zip(values, widths))
    return header_line + "\n" + value_line + "\n"


def render_error_analysis(analysis: ErrorAnalysis) -> str:
    """Render FN/FP rows and any co-prediction tallies as text."""
    lines = [f"{'Class':<6} {'FNs':>6} {'FPs':>6} {'FNs/FPs':>8}"]
    for row in analysis.rows:
        lines.append(
            f"{row.code:<6} {row.fn:>6} {row.fp:>6} {row.ratio_display:>8}"
        )
    if analysis.co_predictions is not None:
        lines.append("")
        lines.append("False negatives by predicted label set:")
        for code, tally in analysis.co_predictions.items():
            if not tally:
                continue
            lines.append(f"  {code}:")
            for predicted_set, count in tally:
                shown = "{" + ",".join(predicted_set) + "}"
                lines.append(f"    predicted as {shown}: {count}")
    return "\n".join(lines) + "\n"


def report_to_dict(report: MetricsReport, schema: LabelSchema) -> dict:
    """Flatten a MetricsReport into the documented JSON structure.

    Carries every scalar metric, the per-class blocks with counts and
    degenerate flags, and the rendered table.
    """
    per_class = []
    for idx, code in enumerate(schema.codes):
        per_class.append(
            {
                "code": code,
                "precision": report.class_metrics.precision[idx],
                "recall": report.class_metrics.recall[idx],
                "f1": report.class_metrics.f1[idx],
                "degenerate": report.class_metrics.degenerate[idx],
                "tp": report.counts.tp[idx],
                "fp": report.counts.fp[idx],
                "fn": report.counts.fn[idx],
                "tn": report.counts.tn[idx],
            }
        )
    payload = {
        "sample_count": report.sample_count,
        "match_ratio": report.match_ratio,
        "micro_f1": report.micro_f1,
        "macro_f1": report.macro_f1,
        "micro_degenerate": report.micro_degenerate,
        "classes": per_class,
    }
    if report.parameter_count is not None:
        payload["parameter_count"] = report.parameter_count
    return payload
