from __future__ import annotations

import json
import random

import pytest

from crosspair.core import (
    BoundingBox,
    ClipRecord,
    RecheckVerdict,
    SamplingPolicy,
    SubjectInstance,
    clip_from_row,
    clip_to_row,
    pair_digest,
    subject_digest,
    validate_manifest,
)


def make_clip(clip_id="c1", **over) -> ClipRecord:
    base = dict(
        clip_id=clip_id, video_id="v1", start_s=0.0, end_s=5.0,
        frame_count=120, width=1280, height=720, caption="a woman in a park",
        quality=frozenset({"motion_checked"}),
    )
    base.update(over)
    return ClipRecord(**base)


class TestBoundingBox:
    def test_area_is_halfopen_product(self):
        assert BoundingBox(0, 0, 10, 20).area == 200

    @pytest.mark.parametrize("coords", [(5, 0, 5, 10), (0, 5, 10, 5), (8, 0, 2, 10)])
    def test_degenerate_rejected(self, coords):
        with pytest.raises(ValueError):
            BoundingBox(*coords)

    def test_negative_origin_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox(-1, 0, 10, 10)

    def test_validate_within(self):
        BoundingBox(0, 0, 10, 10).validate_within(10, 10)
        with pytest.raises(ValueError):
            BoundingBox(0, 0, 11, 10).validate_within(10, 10)


class TestValidateManifest:
    def test_duplicate_clip_id_reported(self):
        report = validate_manifest([make_clip("c1"), make_clip("c1")])
        assert "duplicate clip_id" in report.errors["c1"]

    def test_empty_time_span_reported(self):
        report = validate_manifest([make_clip(start_s=3.0, end_s=3.0)])
        assert any("start_s" in msg for msg in report.errors["c1"])

    def test_valid_manifest_empty_report(self):
        records = [make_clip(f"c{i}") for i in range(3)]
        report = validate_manifest(records)
        assert report.ok
        assert report.as_dict() == {}

    def test_idempotent_on_valid_manifest(self):
        records = [make_clip(f"c{i}") for i in range(3)]
        first = validate_manifest(records).as_dict()
        second = validate_manifest(records).as_dict()
        assert first == second == {}

    def test_all_errors_reported_not_fail_fast(self):
        bad = make_clip("c2", width=0, start_s=9.0, end_s=1.0)
        report = validate_manifest([make_clip("c1"), bad])
        assert "c1" not in report.errors
        assert len(report.errors["c2"]) == 2


class TestSubjectDigest:
    BOX = BoundingBox(10, 10, 170, 170)

    def test_deterministic(self):
        a = subject_digest("c1", 5, self.BOX, "dog")
        b = subject_digest("c1", 5, self.BOX, "dog")
        assert a == b

    def test_byte_exact_phrase_sensitivity(self):
        assert subject_digest("c1", 5, self.BOX, "dog") != subject_digest(
            "c1", 5, self.BOX, "Dog"
        )

    def test_frame_index_changes_id(self):
        assert subject_digest("c1", 5, self.BOX, "dog") != subject_digest(
            "c1", 6, self.BOX, "dog"
        )

    def test_no_collisions_over_1e5_random_tuples(self):
        rng = random.Random(20240809)
        seen = set()
        tuples = set()
        while len(tuples) < 100_000:
            x0 = rng.randrange(0, 500)
            y0 = rng.randrange(0, 500)
            box = BoundingBox(x0, y0, x0 + rng.randrange(1, 500), y0 + rng.randrange(1, 500))
            key = (f"c{rng.randrange(1000)}", rng.randrange(1000), box.as_tuple(),
                   f"p{rng.randrange(10000)}")
            if key in tuples:
                continue
            tuples.add(key)
            seen.add(subject_digest(key[0], key[1], box, key[3]))
        assert len(seen) == len(tuples)


class TestPairDigest:
    def test_order_normalized(self):
        assert pair_digest("a", "b") == pair_digest("b", "a")

    def test_distinct_pairs_distinct_ids(self):
        assert pair_digest("a", "b") != pair_digest("a", "c")


class TestSubjectInstance:
    def test_build_sets_digest_and_living(self):
        inst = SubjectInstance.build("c1", 5, BoundingBox(0, 0, 10, 10), "dog", "animal")
        assert inst.subject_id == subject_digest("c1", 5, inst.bbox, "dog")
        assert inst.living is True

    def test_living_must_match_category(self):
        with pytest.raises(ValueError):
            SubjectInstance(
                subject_id=subject_digest("c1", 5, BoundingBox(0, 0, 10, 10), "dog"),
                clip_id="c1", frame_index=5, bbox=BoundingBox(0, 0, 10, 10),
                phrase="dog", category="animal", living=False,
            )

    def test_forged_subject_id_rejected(self):
        with pytest.raises(ValueError):
            SubjectInstance(
                subject_id="0" * 32, clip_id="c1", frame_index=5,
                bbox=BoundingBox(0, 0, 10, 10), phrase="dog",
                category="animal", living=True,
            )

    def test_unknown_category_rejected(self):
        with pytest.raises(ValueError):
            SubjectInstance.build("c1", 5, BoundingBox(0, 0, 10, 10), "dog", "plant")


class TestRecheckVerdict:
    def test_passes_only_when_all_pass(self):
        assert RecheckVerdict(True, True, True).passed
        assert not RecheckVerdict(False, True, True).passed
        assert not RecheckVerdict(True, False, True).passed
        assert not RecheckVerdict(True, True, False).passed


class TestSamplingPolicy:
    def test_default_fractions(self):
        assert SamplingPolicy().fractions == (0.05, 0.5, 0.95)

    def test_not_increasing_rejected(self):
        with pytest.raises(ValueError):
            SamplingPolicy(fractions=(0.5, 0.5))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            SamplingPolicy(fractions=(0.1, 1.5))


class TestManifestRows:
    def test_round_trip_preserves_unknown_fields(self):
        row = {
            "clip_id": "c1", "video_id": "v1", "start_s": 0.0, "end_s": 5.0,
            "frame_count": 120, "width": 1280, "height": 720,
            "caption": "x", "quality": ["motion_checked"],
            "motion": "high", "source_url": "https://example.test/v1",
        }
        rec = clip_from_row(json.loads(json.dumps(row)))
        assert rec.extras == {"motion": "high", "source_url": "https://example.test/v1"}
        out = clip_to_row(rec)
        assert out["motion"] == "high"
        assert out["source_url"] == "https://example.test/v1"

    def test_quality_serialized_sorted(self):
        rec = make_clip(quality=frozenset({"motion_checked", "black_border_checked"}))
        assert clip_to_row(rec)["quality"] == ["black_border_checked", "motion_checked"]
