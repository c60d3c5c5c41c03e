"""Evaluation metrics against independent brute-force and exact-rational
oracles, plus the published error-balance table."""

from decimal import Decimal
from fractions import Fraction

import numpy as np
import pytest

from reefcond.errors import MetricsError
from reefcond.metrics import (
    ClassMetrics,
    ConfusionCounts,
    MetricsReport,
    class_f1,
    compute_report,
    confusion_counts,
    fn_fp_table,
    macro_f1,
    match_ratio,
    micro_f1,
    misclassification_report,
    render_error_analysis,
    render_report,
    report_to_dict,
)
from reefcond.schema import default_schema

SCHEMA = default_schema()


# ---------------------------------------------------------------------------
# Independent oracle: exact-rational evaluation straight from the formulas,
# sharing no code with the implementation under test.
# ---------------------------------------------------------------------------

def oracle_counts(predicted, truth):
    n_classes = len(predicted[0])
    tp = [0] * n_classes
    fp = [0] * n_classes
    fn = [0] * n_classes
    tn = [0] * n_classes
    for p_row, t_row in zip(predicted, truth):
        for i in range(n_classes):
            if p_row[i] == 1 and t_row[i] == 1:
                tp[i] += 1
            elif p_row[i] == 1 and t_row[i] == 0:
                fp[i] += 1
            elif p_row[i] == 0 and t_row[i] == 1:
                fn[i] += 1
            else:
                tn[i] += 1
    return tp, fp, fn, tn


def oracle_f1_per_class(tp, fp, fn):
    out = []
    for t, f_pos, f_neg in zip(tp, fp, fn):
        p = Fraction(t, t + f_pos) if t + f_pos else Fraction(0)
        r = Fraction(t, t + f_neg) if t + f_neg else Fraction(0)
        out.append(2 * p * r / (p + r) if p + r else Fraction(0))
    return out


def oracle_macro(predicted, truth):
    tp, fp, fn, _ = oracle_counts(predicted, truth)
    scores = oracle_f1_per_class(tp, fp, fn)
    return float(sum(scores) / len(scores))


def oracle_micro(predicted, truth):
    tp, fp, fn, _ = oracle_counts(predicted, truth)
    stp, sfp, sfn = sum(tp), sum(fp), sum(fn)
    p = Fraction(stp, stp + sfp) if stp + sfp else Fraction(0)
    r = Fraction(stp, stp + sfn) if stp + sfn else Fraction(0)
    return float(2 * p * r / (p + r)) if p + r else 0.0


def oracle_match(predicted, truth):
    hits = sum(1 for p_row, t_row in zip(predicted, truth) if tuple(p_row) == tuple(t_row))
    return float(Fraction(hits, len(predicted)))


def random_instance(rng, max_samples=16, n_classes=8):
    n = int(rng.integers(1, max_samples + 1))
    predicted = rng.integers(0, 2, size=(n, n_classes)).tolist()
    truth = rng.integers(0, 2, size=(n, n_classes)).tolist()
    return predicted, truth


class TestConfusionCounts:
    def test_perfect_agreement(self):
        rng = np.random.default_rng(0)
        truth = rng.integers(0, 2, size=(9, 8)).tolist()
        counts = confusion_counts(truth, truth)
        assert counts.fp == (0,) * 8
        assert counts.fn == (0,) * 8

    def test_total_disagreement(self):
        predicted = [[1] * 8] * 5
        truth = [[0] * 8] * 5
        counts = confusion_counts(predicted, truth)
        assert counts.fp == (5,) * 8
        assert counts.tp == (0,) * 8
        assert counts.fn == (0,) * 8

    def test_hand_trace(self):
        predicted = [[1, 0], [1, 1], [0, 0]]
        truth = [[1, 1], [0, 1], [0, 0]]
        counts = confusion_counts(predicted, truth)
        assert (counts.tp[0], counts.fp[0], counts.fn[0]) == (1, 1, 0)
        assert (counts.tp[1], counts.fp[1], counts.fn[1]) == (1, 0, 1)

    def test_cells_sum_to_sample_count(self):
        rng = np.random.default_rng(5)
        predicted, truth = random_instance(rng)
        counts = confusion_counts(predicted, truth)
        for i in range(8):
            total = counts.tp[i] + counts.fp[i] + counts.fn[i] + counts.tn[i]
            assert total == len(predicted)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(MetricsError):
            confusion_counts([[1, 0]], [[1, 0], [0, 1]])

    def test_non_binary_rejected(self):
        with pytest.raises(MetricsError):
            confusion_counts([[2, 0]], [[1, 0]])


class TestClassF1:
    def test_perfect_class(self):
        counts = ConfusionCounts(tp=(1,), fp=(0,), fn=(0,), tn=(0,))
        metrics = class_f1(counts)
        assert metrics.precision == (1.0,)
        assert metrics.recall == (1.0,)
        assert metrics.f1 == (1.0,)
        assert metrics.degenerate == (False,)

    def test_all_zero_class_degenerate(self):
        counts = ConfusionCounts(tp=(0,), fp=(0,), fn=(0,), tn=(4,))
        metrics = class_f1(counts)
        assert metrics.f1 == (0.0,)
        assert metrics.degenerate == (True,)

    def test_exact_rational_case(self):
        # TP=2, FP=1, FN=1: precision = recall = f1 = 2/3.
        counts = ConfusionCounts(tp=(2,), fp=(1,), fn=(1,), tn=(0,))
        metrics = class_f1(counts)
        expected = float(Fraction(2, 3))
        assert abs(metrics.precision[0] - expected) < 1e-15
        assert abs(metrics.recall[0] - expected) < 1e-15
        assert abs(metrics.f1[0] - expected) < 1e-15


class TestAggregates:
    def test_macro_all_ones(self):
        metrics = ClassMetrics(
            precision=(1.0,) * 4, recall=(1.0,) * 4, f1=(1.0,) * 4, degenerate=(False,) * 4
        )
        assert macro_f1(metrics) == 1.0

    def test_macro_exact_rational(self):
        # mean(2/3, 1/2) = 7/12.
        metrics = ClassMetrics(
            precision=(0.0, 0.0),
            recall=(0.0, 0.0),
            f1=(float(Fraction(2, 3)), 0.5),
            degenerate=(False, False),
        )
        assert abs(macro_f1(metrics) - float(Fraction(7, 12))) < 1e-15

    def test_macro_constant(self):
        for x in (0.0, 0.25, 0.731, 1.0):
            metrics = ClassMetrics(
                precision=(x,) * 8, recall=(x,) * 8, f1=(x,) * 8, degenerate=(False,) * 8
            )
            assert abs(macro_f1(metrics) - x) < 1e-15

    def test_micro_exact_rational(self):
        # Classes (TP=2,FP=1,FN=1) and (TP=1,FP=0,FN=2): P=3/4, R=1/2, F1=3/5.
        counts = ConfusionCounts(tp=(2, 1), fp=(1, 0), fn=(1, 2), tn=(0, 0))
        assert abs(micro_f1(counts) - 0.6) < 1e-15

    def test_micro_perfect(self):
        counts = ConfusionCounts(tp=(3, 4), fp=(0, 0), fn=(0, 0), tn=(1, 0))
        assert micro_f1(counts) == 1.0

    def test_micro_single_class_equals_class_f1(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            tp, fp, fn = (int(v) for v in rng.integers(0, 6, size=3))
            counts = ConfusionCounts(tp=(tp,), fp=(fp,), fn=(fn,), tn=(0,))
            assert abs(micro_f1(counts) - class_f1(counts).f1[0]) < 1e-12

    def test_micro_all_zero_degenerate(self):
        counts = ConfusionCounts(tp=(0,) * 8, fp=(0,) * 8, fn=(0,) * 8, tn=(3,) * 8)
        assert micro_f1(counts) == 0.0

    def test_balanced_classes_make_macro_equal_micro(self):
        counts = ConfusionCounts(tp=(3,) * 8, fp=(1,) * 8, fn=(2,) * 8, tn=(0,) * 8)
        assert abs(macro_f1(class_f1(counts)) - micro_f1(counts)) < 1e-12


class TestMatchRatio:
    def test_identity(self):
        rng = np.random.default_rng(2)
        truth = rng.integers(0, 2, size=(7, 8)).tolist()
        assert match_ratio(truth, truth) == 1.0

    def test_quarter(self):
        truth = [[1, 0], [1, 0], [1, 0], [1, 0]]
        predicted = [[1, 0], [0, 0], [0, 1], [1, 1]]
        assert match_ratio(predicted, truth) == 0.25

    def test_random_against_row_equality_oracle(self):
        rng = np.random.default_rng(21)
        predicted = rng.integers(0, 2, size=(12, 8)).tolist()
        truth = rng.integers(0, 2, size=(12, 8)).tolist()
        assert match_ratio(predicted, truth) == oracle_match(predicted, truth)

    def test_empty_rejected(self):
        with pytest.raises(MetricsError):
            match_ratio([], [])


class TestOracleEquivalence:
    def test_random_instances_match_brute_force(self):
        rng = np.random.default_rng(1234)
        for _ in range(300):
            predicted, truth = random_instance(rng)
            counts = confusion_counts(predicted, truth)
            assert abs(macro_f1(class_f1(counts)) - oracle_macro(predicted, truth)) < 1e-12
            assert abs(micro_f1(counts) - oracle_micro(predicted, truth)) < 1e-12
            assert abs(match_ratio(predicted, truth) - oracle_match(predicted, truth)) < 1e-12

    def test_counts_match_oracle(self):
        rng = np.random.default_rng(77)
        predicted, truth = random_instance(rng)
        counts = confusion_counts(predicted, truth)
        tp, fp, fn, tn = oracle_counts(predicted, truth)
        assert counts.tp == tuple(tp)
        assert counts.fp == tuple(fp)
        assert counts.fn == tuple(fn)
        assert counts.tn == tuple(tn)

    def test_metrics_in_range(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            predicted, truth = random_instance(rng)
            report = compute_report(predicted, truth)
            for value in (report.match_ratio, report.micro_f1, report.macro_f1):
                assert 0.0 <= value <= 1.0
            for f in report.class_metrics.f1:
                assert 0.0 <= f <= 1.0

    def test_match_ratio_bounded_by_labelwise_accuracy(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            predicted, truth = random_instance(rng)
            report = compute_report(predicted, truth)
            tp, _, _, tn = report.counts.totals()
            labelwise = (tp + tn) / (report.sample_count * 8)
            assert report.match_ratio <= labelwise + 1e-12

    def test_column_permutation_symmetry(self):
        rng = np.random.default_rng(31)
        predicted, truth = random_instance(rng, max_samples=12)
        perm = rng.permutation(8)
        permute = lambda rows: [[row[j] for j in perm] for row in rows]
        base = compute_report(predicted, truth)
        shuffled = compute_report(permute(predicted), permute(truth))
        assert abs(base.micro_f1 - shuffled.micro_f1) < 1e-12
        assert abs(base.macro_f1 - shuffled.macro_f1) < 1e-12


# Published FN/FP counts and their two-decimal ratios for all eight classes.
PUBLISHED_FN_FP = (
    ("HLC", 185, 242, "0.76"),
    ("CPC", 374, 250, "1.50"),
    ("DDC", 388, 363, "1.07"),
    ("RBL", 230, 121, "1.90"),
    ("CPT", 266, 73, "3.64"),
    ("DSE", 146, 105, "1.39"),
    ("PRD", 40, 19, "2.11"),
    ("PHY", 208, 130, "1.60"),
)


class TestFnFpTable:
    def counts(self):
        return ConfusionCounts(
            tp=(0,) * 8,
            fp=tuple(row[2] for row in PUBLISHED_FN_FP),
            fn=tuple(row[1] for row in PUBLISHED_FN_FP),
            tn=(0,) * 8,
        )

    def test_published_ratio_column(self):
        analysis = fn_fp_table(self.counts(), SCHEMA)
        for row, (code, fn, fp, display) in zip(analysis.rows, PUBLISHED_FN_FP):
            assert row.code == code
            assert row.fn == fn and row.fp == fp
            assert row.ratio_display == display
            assert abs(row.ratio - fn / fp) < 1e-12

    def test_zero_fp_marked_undefined(self):
        counts = ConfusionCounts(
            tp=(0,) * 8, fp=(0,) + (1,) * 7, fn=(5,) * 8, tn=(0,) * 8
        )
        analysis = fn_fp_table(counts, SCHEMA)
        assert analysis.rows[0].ratio is None
        assert analysis.rows[0].ratio_display == "-"

    def test_half_up_rounding_at_exact_midpoint(self):
        # 227/200 = 1.135 exactly; half-up gives 1.14 where bankers would
        # give 1.14 too but float quantization would land on 1.13.
        counts = ConfusionCounts(
            tp=(0,) * 8, fp=(200,) * 8, fn=(227,) * 8, tn=(0,) * 8
        )
        analysis = fn_fp_table(counts, SCHEMA)
        assert analysis.rows[0].ratio_display == "1.14"


class TestMisclassification:
    def brute_scan(self, predicted, truth):
        codes = SCHEMA.codes
        tallies = {code: {} for code in codes}
        for p_row, t_row in zip(predicted, truth):
            predicted_set = tuple(codes[j] for j in range(8) if p_row[j] == 1)
            for i, code in enumerate(codes):
                if t_row[i] == 1 and p_row[i] == 0:
                    tallies[code][predicted_set] = tallies[code].get(predicted_set, 0) + 1
        return tallies

    def test_no_errors_no_tallies(self):
        truth = [[1, 0, 0, 0, 0, 0, 0, 0]] * 3
        analysis = misclassification_report(truth, truth, SCHEMA)
        assert all(not tally for tally in analysis.co_predictions.values())

    def test_single_cell_trace(self):
        truth = [[0, 0, 0, 0, 1, 0, 0, 0]]      # CPT
        predicted = [[1, 0, 0, 0, 0, 0, 0, 0]]  # HLC
        analysis = misclassification_report(predicted, truth, SCHEMA)
        assert analysis.co_predictions["CPT"] == ((("HLC",), 1),)

    def test_random_matches_brute_scan(self):
        rng = np.random.default_rng(55)
        predicted = rng.integers(0, 2, size=(20, 8)).tolist()
        truth = rng.integers(0, 2, size=(20, 8)).tolist()
        analysis = misclassification_report(predicted, truth, SCHEMA)
        expected = self.brute_scan(predicted, truth)
        for code in SCHEMA.codes:
            assert dict(analysis.co_predictions[code]) == expected[code]
            counts = [count for _, count in analysis.co_predictions[code]]
            assert counts == sorted(counts, reverse=True)

    def test_tie_break_by_canonical_order(self):
        truth = [[0, 1, 0, 0, 0, 0, 0, 0]] * 2   # CPC false negatives
        predicted = [
            [0, 0, 0, 1, 0, 0, 0, 0],            # RBL
            [0, 0, 1, 0, 0, 0, 0, 0],            # DDC
        ]
        analysis = misclassification_report(predicted, truth, SCHEMA)
        assert analysis.co_predictions["CPC"] == ((("DDC",), 1), (("RBL",), 1))


class TestRendering:
    def test_all_perfect_renders_100(self):
        truth = [[1, 0, 1, 0, 1, 0, 1, 0], [0, 1, 0, 1, 0, 1, 0, 1]]
        report = compute_report(truth, truth)
        text = render_report(report, SCHEMA)
        assert text.count("100.00") == 11  # 3 aggregates + 8 class columns

    def test_percent_formatting(self):
        # Pooled counts TP=3, FP=1, FN=3 give micro F1 = 6/10 = 0.6 exactly.
        counts = ConfusionCounts(tp=(3,) + (0,) * 7, fp=(1,) + (0,) * 7, fn=(3,) + (0,) * 7, tn=(0,) * 8)
        assert micro_f1(counts) == pytest.approx(0.6)
        report = MetricsReport(
            sample_count=4,
            match_ratio=0.25,
            micro_f1=micro_f1(counts),
            macro_f1=macro_f1(class_f1(counts)),
            micro_degenerate=False,
            class_metrics=class_f1(counts),
            counts=counts,
        )
        assert "60.00" in render_report(report, SCHEMA)

    def test_header_column_order(self):
        truth = [[1, 0, 0, 0, 0, 0, 0, 0]]
        report = compute_report(truth, truth, parameter_count=203_700_000)
        header = render_report(report, SCHEMA).splitlines()[0]
        expected = [
            "Match Ratio", "Micro F1", "Macro F1",
            "HLC", "CPC", "DDC", "RBL", "CPT", "DSE", "PRD", "PHY", "Parameters",
        ]
        position = -1
        for column in expected:
            found = header.find(column)
            assert found > position
            position = found
        assert "203.7M" in render_report(report, SCHEMA)

    def test_error_analysis_rendering(self):
        counts = ConfusionCounts(
            tp=(0,) * 8,
            fp=tuple(row[2] for row in PUBLISHED_FN_FP),
            fn=tuple(row[1] for row in PUBLISHED_FN_FP),
            tn=(0,) * 8,
        )
        text = render_error_analysis(fn_fp_table(counts, SCHEMA))
        assert "3.64" in text and "0.76" in text

    def test_report_dict_fields(self):
        truth = [[1, 0, 0, 0, 0, 0, 0, 0]]
        payload = report_to_dict(compute_report(truth, truth), SCHEMA)
        assert payload["sample_count"] == 1
        assert payload["match_ratio"] == 1.0
        assert len(payload["classes"]) == 8
        assert payload["classes"][0]["code"] == "HLC"
        assert {"precision", "recall", "f1", "tp", "fp", "fn", "tn", "degenerate"} <= set(
            payload["classes"][0]
        )
