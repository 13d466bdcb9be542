from __future__ import annotations

import random

import pytest

from crosspair.core import BoundingBox, FilterPolicy, SamplingPolicy, SubjectInstance
from crosspair.detect import (
    Detection,
    detect_clip,
    extract_keywords,
    filter_bboxes,
    ground_phrases,
    iou,
    sample_frames,
    select_representative,
    suppress_overlaps,
)
from crosspair.infer import InferenceClient, InProcessTransport
from crosspair.mockserve import MockBackend, MockFacts
from oracles import box_admissible_oracle, suppress_oracle
from test_core import make_clip


def make_client(facts: dict, **backend_kw) -> tuple[InferenceClient, MockBackend]:
    backend = MockBackend(MockFacts(facts), **backend_kw)
    client = InferenceClient(
        InProcessTransport(backend), retry_attempts=3, retry_backoff_s=0.001
    )
    client.handshake()
    return client, backend


BASE_FACTS = {
    "dims": {"face": 16, "general": 16},
    "vocabulary": {"woman": "human", "smartphone": "product", "dog": "animal",
                   "tree": "other"},
    "clips": {"c1": {"context": "park"}},
    "subjects": {},
    "boxes": {},
}


class TestSampleFrames:
    def test_paper_fractions_at_100(self):
        assert sample_frames(100) == [5, 50, 94]

    def test_single_frame_collapses(self):
        assert sample_frames(1) == [0]

    def test_two_frames_dedup(self):
        assert sample_frames(2) == [0, 1]

    @pytest.mark.parametrize("count", [1, 2, 3, 7, 10, 100, 1000])
    def test_indices_sorted_unique_in_range(self, count):
        indices = sample_frames(count)
        assert indices == sorted(set(indices))
        assert all(0 <= i < count for i in indices)

    def test_custom_policy(self):
        assert sample_frames(11, SamplingPolicy(fractions=(0.0, 1.0))) == [0, 10]

    def test_zero_frames_rejected(self):
        with pytest.raises(ValueError):
            sample_frames(0)


class TestExtractKeywords:
    def test_empty_caption(self):
        client, _ = make_client(BASE_FACTS)
        assert extract_keywords("", client) == []

    def test_vocabulary_intersection(self):
        client, _ = make_client(BASE_FACTS)
        phrases = extract_keywords("a woman holding a smartphone in a park", client)
        assert phrases == [("woman", "human"), ("smartphone", "product")]

    def test_dedup_preserves_first_occurrence(self):
        client, _ = make_client(BASE_FACTS)
        assert extract_keywords("a dog chasing a dog", client) == [("dog", "animal")]


class TestGroundPhrases:
    def _clip(self):
        return make_clip(width=1000, height=1000, frame_count=100)

    def test_ambiguous_phrase_dropped_per_frame(self):
        facts = dict(BASE_FACTS)
        facts["boxes"] = {
            "c1::5::woman": [[0, 0, 200, 200], [300, 300, 500, 500]],
            "c1::50::woman": [[0, 0, 200, 200]],
        }
        client, _ = make_client(facts)
        dets, dropped = ground_phrases(
            self._clip(), [5, 50, 94], [("woman", "human")], client
        )
        assert [(d.frame_index, d.bbox.as_tuple()) for d in dets] == [
            (50, (0, 0, 200, 200))
        ]
        assert dropped == 0

    def test_empty_phrase_list(self):
        client, _ = make_client(BASE_FACTS)
        assert ground_phrases(self._clip(), [5], [], client) == ([], 0)

    def test_planted_box_replayed_exactly(self):
        facts = dict(BASE_FACTS)
        facts["boxes"] = {"c1::5::dog": [[10, 20, 210, 220]]}
        client, _ = make_client(facts)
        dets, _ = ground_phrases(self._clip(), [5], [("dog", "animal")], client)
        assert dets == [Detection("dog", "animal", 5, BoundingBox(10, 20, 210, 220))]

    def test_malformed_box_dropped_and_counted(self):
        facts = dict(BASE_FACTS)
        facts["boxes"] = {"c1::5::dog": [[300, 20, 100, 220]]}
        client, _ = make_client(facts)
        dets, dropped = ground_phrases(self._clip(), [5], [("dog", "animal")], client)
        assert dets == []
        assert dropped == 1

    def test_boxes_clipped_to_frame(self):
        facts = dict(BASE_FACTS)
        facts["boxes"] = {"c1::5::dog": [[-50, -50, 400, 1200]]}
        client, _ = make_client(facts)
        dets, _ = ground_phrases(self._clip(), [5], [("dog", "animal")], client)
        assert dets[0].bbox == BoundingBox(0, 0, 400, 1000)


def det(x0, y0, x1, y1, frame=0, phrase="p") -> Detection:
    return Detection(phrase, "other", frame, BoundingBox(x0, y0, x1, y1))


class TestFilterBboxes:
    POLICY = FilterPolicy()

    def test_lower_area_bound_inclusive(self):
        kept = filter_bboxes([det(0, 0, 200, 200)], 1000, 1000, self.POLICY)
        assert len(kept) == 1  # exactly 4% and 200px sides

    def test_min_side_dropped(self):
        kept = filter_bboxes([det(0, 0, 100, 300)], 1280, 720, self.POLICY)
        assert kept == []

    def test_upper_area_bound(self):
        kept = filter_bboxes([det(0, 0, 960, 960)], 1000, 1000, self.POLICY)
        assert kept == []  # 0.9216 > 0.90

    def test_matches_bruteforce_predicate(self):
        rng = random.Random(42)
        dets = []
        for _ in range(10_000):
            x0 = rng.randrange(0, 900)
            y0 = rng.randrange(0, 900)
            dets.append(det(x0, y0, x0 + rng.randrange(1, 1000 - x0 + 1),
                            y0 + rng.randrange(1, 1000 - y0 + 1)))
        kept = filter_bboxes(dets, 1000, 1000, self.POLICY)
        expected = [
            d for d in dets
            if box_admissible_oracle(d.bbox.as_tuple(), 1000, 1000, 0.04, 0.90, 128)
        ]
        assert kept == expected


class TestSuppressOverlaps:
    def test_identical_boxes_keep_one(self):
        kept = suppress_overlaps([det(0, 0, 10, 10), det(0, 0, 10, 10)], 0.8)
        assert len(kept) == 1

    def test_disjoint_boxes_keep_both(self):
        kept = suppress_overlaps([det(0, 0, 10, 10), det(20, 20, 30, 30)], 0.8)
        assert len(kept) == 2

    def test_hand_computed_iou_below_threshold(self):
        a, b = det(0, 0, 10, 10), det(5, 0, 15, 10)
        assert iou(a.bbox, b.bbox) == pytest.approx(1 / 3)
        assert len(suppress_overlaps([a, b], 0.8)) == 2

    def test_strictly_greater_comparison(self):
        # IoU exactly at the threshold is not suppressed
        a, b = det(0, 0, 10, 10), det(0, 0, 10, 10)
        assert len(suppress_overlaps([a, b], 1.0)) == 2

    def test_larger_box_wins(self):
        small = det(0, 0, 100, 100)
        large = det(0, 0, 105, 105)
        kept = suppress_overlaps([small, large], 0.8)
        assert kept == [large]

    def test_matches_oracle_on_random_boxes(self):
        rng = random.Random(99)
        boxes = []
        for _ in range(300):
            x0 = rng.randrange(0, 50)
            y0 = rng.randrange(0, 50)
            boxes.append((x0, y0, x0 + rng.randrange(1, 60), y0 + rng.randrange(1, 60)))
        dets = [det(*b) for b in boxes]
        kept = suppress_overlaps(dets, 0.5)
        assert [d.bbox.as_tuple() for d in kept] == suppress_oracle(boxes, 0.5)

    def test_antichain_property(self):
        rng = random.Random(1234)
        for _ in range(50):
            dets = []
            for _ in range(40):
                x0 = rng.randrange(0, 40)
                y0 = rng.randrange(0, 40)
                dets.append(det(x0, y0, x0 + rng.randrange(1, 40), y0 + rng.randrange(1, 40)))
            kept = suppress_overlaps(dets, 0.8)
            for i, a in enumerate(kept):
                for b in kept[i + 1 :]:
                    assert iou(a.bbox, b.bbox) <= 0.8


class TestSelectRepresentative:
    def _inst(self, frame, size, clip="c1", phrase="woman"):
        return SubjectInstance.build(
            clip, frame, BoundingBox(0, 0, size, size), phrase, "human"
        )

    def test_single_instance_is_itself(self):
        inst = self._inst(5, 200)
        assert select_representative([inst]) is inst

    def test_largest_area_wins(self):
        losing = self._inst(5, 200)
        winning = self._inst(50, 300)
        assert select_representative([losing, winning]) is winning

    def test_area_tie_earliest_frame(self):
        early = self._inst(5, 200)
        late = self._inst(50, 200)
        assert select_representative([late, early]) is early

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            select_representative([])

    def test_mixed_subjects_rejected(self):
        with pytest.raises(ValueError):
            select_representative([self._inst(5, 200), self._inst(5, 200, phrase="man")])


class TestDetectClip:
    def _facts(self, recheck_overrides=None):
        facts = {
            "dims": {"face": 16, "general": 16},
            "vocabulary": {"woman": "human", "tree": "other", "smartphone": "product"},
            "clips": {"c1": {"context": "park"}},
            "subjects": {
                "c1::woman": {"identity": "alice"},
                "c1::smartphone": {"identity": "ph1", "logo_visible": True},
                "c1::tree": {"identity": "t1"},
            },
            "boxes": {},
        }
        clip = make_clip(
            caption="a woman near a tree holding a smartphone",
            width=1000, height=1000, frame_count=100,
        )
        for frame in (5, 50, 94):
            facts["boxes"][f"c1::{frame}::woman"] = [[0, 0, 200, 200]]
            facts["boxes"][f"c1::{frame}::tree"] = [[700, 0, 950, 300]]
        facts["boxes"]["c1::50::smartphone"] = [[400, 400, 600, 600]]
        if recheck_overrides:
            for key, verdict in recheck_overrides.items():
                facts["subjects"][key]["recheck"] = verdict
        return facts, clip

    def test_specificity_failure_drops_instance(self):
        facts, clip = self._facts({"c1::tree": {"specificity": False}})
        client, _ = make_client(facts)
        result = detect_clip(clip, client)
        assert sorted(i.phrase for i in result.instances) == ["smartphone", "woman"]

    def test_completeness_failure_drops_instance(self):
        facts, clip = self._facts({"c1::woman": {"completeness": False}})
        client, _ = make_client(facts)
        phrases = {i.phrase for i in detect_clip(clip, client).instances}
        assert "woman" not in phrases

    def test_all_pass_keeps_one_representative_per_phrase(self):
        facts, clip = self._facts()
        client, _ = make_client(facts)
        result = detect_clip(clip, client)
        assert sorted(i.phrase for i in result.instances) == [
            "smartphone", "tree", "woman"
        ]
        assert all(
            i.logo_visible is (True if i.category == "product" else None)
            for i in result.instances
        )

    def test_keyword_backend_failure_recorded_not_raised(self):
        facts, clip = self._facts()
        client, backend = make_client(facts)
        backend.inject_transport_faults("/v1/keywords", 10)
        result = detect_clip(clip, client)
        assert result.instances == []
        assert any("keyword" in e for e in result.errors)

    def test_recheck_backend_failure_drops_conservatively(self):
        facts, clip = self._facts()
        # Smartphone is detected in exactly one frame, so one exhausted
        # retry sequence on its recheck must drop the whole subject.
        facts["vocabulary"] = {"smartphone": "product"}
        client, backend = make_client(facts)
        backend.inject_transport_faults("/v1/recheck", 3)
        result = detect_clip(clip, client)
        assert result.instances == []
        assert result.errors == [
            "smartphone@50: recheck backend error: injected fault on /v1/recheck"
        ]

    def test_survivor_passed_every_gate(self):
        facts, clip = self._facts()
        client, _ = make_client(facts)
        for inst in detect_clip(clip, client).instances:
            assert inst.recheck is not None and inst.recheck.passed
            assert inst.bbox.width >= 128 and inst.bbox.height >= 128
            frac = inst.bbox.area / (clip.width * clip.height)
            assert 0.04 <= frac <= 0.90
