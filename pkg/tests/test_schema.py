"""Label encoding, manifest validation, and manifest file round-trips."""

import numpy as np
import pytest

from reefcond.errors import ManifestFormatError, SchemaError
from reefcond.schema import (
    CLASS_CODES,
    LabelSchema,
    Manifest,
    PatchRecord,
    decode_labels,
    default_schema,
    encode_labels,
    manifest_to_text,
    read_manifest,
    validate_manifest,
    write_manifest,
)

SCHEMA = default_schema()


def record(pid="p1", source="img.jpg", site="TTB", row=0, col=0, labels=None, split="train"):
    return PatchRecord(
        patch_id=pid,
        source_image=source,
        site_code=site,
        grid_row=row,
        grid_col=col,
        labels=labels if labels is not None else (1, 0, 0, 0, 0, 0, 0, 0),
        split=split,
    )


class TestSchema:
    def test_canonical_order(self):
        assert SCHEMA.codes == ("HLC", "CPC", "DDC", "RBL", "CPT", "DSE", "PRD", "PHY")
        assert SCHEMA.size == 8

    def test_non_canonical_order_rejected(self):
        shuffled = tuple(reversed(SCHEMA.classes))
        with pytest.raises(SchemaError):
            LabelSchema(classes=shuffled)

    def test_full_names(self):
        assert SCHEMA.full_name("HLC") == "healthy coral"
        assert SCHEMA.full_name("PHY") == "physical issues"


class TestEncodeDecode:
    def test_empty_set(self):
        assert encode_labels(set(), SCHEMA) == (0,) * 8

    def test_single_first_class(self):
        assert encode_labels({"HLC"}, SCHEMA) == (1, 0, 0, 0, 0, 0, 0, 0)

    def test_positional_lookup(self):
        # DDC is index 2, PHY index 7 in the canonical order.
        assert encode_labels({"DDC", "PHY"}, SCHEMA) == (0, 0, 1, 0, 0, 0, 0, 1)

    def test_unknown_code_named_in_error(self):
        with pytest.raises(SchemaError, match="XXX"):
            encode_labels({"HLC", "XXX"}, SCHEMA)

    def test_decode_empty(self):
        assert decode_labels((0,) * 8, SCHEMA) == set()

    def test_decode_single(self):
        assert decode_labels((1, 0, 0, 0, 0, 0, 0, 0), SCHEMA) == {"HLC"}

    def test_decode_positional(self):
        assert decode_labels((0, 1, 0, 0, 1, 0, 0, 0), SCHEMA) == {"CPC", "CPT"}

    def test_decode_length_mismatch(self):
        with pytest.raises(SchemaError):
            decode_labels((0, 1), SCHEMA)

    def test_round_trip_all_subsets(self):
        # 2^8 subsets is small enough to enumerate outright.
        for mask in range(256):
            codes = {CLASS_CODES[i] for i in range(8) if mask >> i & 1}
            assert decode_labels(encode_labels(codes, SCHEMA), SCHEMA) == codes

    def test_encode_deterministic(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            picks = {CLASS_CODES[i] for i in rng.choice(8, size=3)}
            assert encode_labels(picks, SCHEMA) == encode_labels(picks, SCHEMA)


class TestValidateManifest:
    def test_duplicate_patch_id_is_one_error(self):
        manifest = Manifest(
            schema=SCHEMA,
            records=(record(pid="p1"), record(pid="p1", source="other.jpg")),
        )
        report = validate_manifest(manifest)
        assert len(report.errors) == 1
        assert "p1" in report.errors[0]

    def test_empty_manifest_clean(self):
        report = validate_manifest(Manifest(schema=SCHEMA, records=()))
        assert report.errors == () and report.warnings == ()

    def test_all_zero_labels_warn_only(self):
        manifest = Manifest(schema=SCHEMA, records=(record(labels=(0,) * 8),))
        report = validate_manifest(manifest)
        assert report.errors == ()
        assert len(report.warnings) == 1

    def test_unknown_split_is_error(self):
        manifest = Manifest(schema=SCHEMA, records=(record(split="validation"),))
        report = validate_manifest(manifest)
        assert any("split" in e for e in report.errors)

    def test_unknown_site_warns(self):
        manifest = Manifest(schema=SCHEMA, records=(record(site="ZZZ"),))
        report = validate_manifest(manifest)
        assert report.errors == ()
        assert any("ZZZ" in w for w in report.warnings)

    def test_unk_site_accepted(self):
        manifest = Manifest(schema=SCHEMA, records=(record(site="UNK"),))
        assert validate_manifest(manifest).warnings == ()

    def test_length_mismatch_is_error(self):
        manifest = Manifest(schema=SCHEMA, records=(record(labels=(1, 0)),))
        report = validate_manifest(manifest)
        assert any("length" in e for e in report.errors)

    def test_duplicate_grid_cell_is_error(self):
        manifest = Manifest(
            schema=SCHEMA,
            records=(record(pid="a", row=1, col=2), record(pid="b", row=1, col=2)),
        )
        report = validate_manifest(manifest)
        assert any("grid cell" in e for e in report.errors)

    def test_pure(self):
        manifest = Manifest(
            schema=SCHEMA, records=(record(labels=(0,) * 8), record(pid="p2", site="ZZ"))
        )
        assert validate_manifest(manifest) == validate_manifest(manifest)


class TestManifestFile:
    def build(self, n=5):
        records = tuple(
            record(
                pid=f"img_r0_c{i}",
                source="img.jpg",
                row=0,
                col=i,
                labels=tuple(1 if j == i % 8 else 0 for j in range(8)),
                split="train" if i % 2 == 0 else "test",
            )
            for i in range(n)
        )
        return Manifest(schema=SCHEMA, records=records)

    def test_round_trip_identity(self, tmp_path):
        manifest = self.build()
        path = tmp_path / "manifest.jsonl"
        write_manifest(manifest, path)
        assert read_manifest(path) == manifest

    def test_second_write_byte_identical(self, tmp_path):
        manifest = self.build()
        first = tmp_path / "a.jsonl"
        second = tmp_path / "b.jsonl"
        write_manifest(manifest, first)
        write_manifest(read_manifest(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_header_carries_class_order(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_manifest(self.build(1), path)
        header = path.read_text().splitlines()[0]
        assert '"classes"' in header and '"HLC"' in header

    def test_wrong_class_order_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        text = manifest_to_text(self.build(1))
        lines = text.splitlines()
        lines[0] = lines[0].replace('"HLC","CPC"', '"CPC","HLC"')
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestFormatError, match="order"):
            read_manifest(path)

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "m.jsonl"
        text = manifest_to_text(self.build(2))
        path.write_text(text + "{not json}\n")
        with pytest.raises(ManifestFormatError, match=":4:"):
            read_manifest(path)

    def test_unexpected_field_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        lines = manifest_to_text(self.build(1)).splitlines()
        lines[1] = lines[1][:-1] + ',"extra":1}'
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestFormatError, match="fields"):
            read_manifest(path)

    def test_empty_manifest_round_trips(self, tmp_path):
        manifest = Manifest(schema=SCHEMA, records=())
        path = tmp_path / "m.jsonl"
        write_manifest(manifest, path)
        assert read_manifest(path) == manifest
