from __future__ import annotations

import pytest

from crosspair.core import pair_digest
from crosspair.verify import (
    CandidatePair,
    PairSide,
    PairVerdict,
    apply_prior,
    assemble_samples,
    canonical_orientation,
    finalize_pair,
    verify_candidates,
    vlm_verify_pair,
)
from test_detect import make_client


def side(
    subject_id,
    category="human",
    source="video_corpus",
    clip_id="c1",
    video_id="v1",
    phrase="woman",
    logo=None,
):
    if source == "external_images":
        return PairSide(subject_id=subject_id, source=source, category=category,
                        logo_visible=logo)
    return PairSide(
        subject_id=subject_id, source=source, category=category, clip_id=clip_id,
        video_id=video_id, frame_index=5, bbox=(0, 0, 160, 160), phrase=phrase,
        logo_visible=logo,
    )


def pair(query, candidate, similarity=0.8):
    return CandidatePair(query=query, candidate=candidate, similarity=similarity)


class TestApplyPrior:
    def test_living_same_video_different_clip_passes(self):
        p = pair(side("a", clip_id="c1"), side("b", clip_id="c2"))
        passed, rule, reason = apply_prior(p)
        assert passed and rule == "living_same_video" and reason is None

    def test_living_different_video_fails(self):
        p = pair(side("a", video_id="v1"), side("b", clip_id="c2", video_id="v2"))
        passed, _, reason = apply_prior(p)
        assert not passed and "different long-form video" in reason

    def test_living_same_clip_fails(self):
        p = pair(side("a", clip_id="c1"), side("b", clip_id="c1"))
        assert not apply_prior(p)[0]

    def test_living_external_candidate_fails(self):
        p = pair(side("a"), side("img", source="external_images"))
        passed, _, reason = apply_prior(p)
        assert not passed and "video corpus" in reason

    def test_living_missing_video_id_fails_with_reason(self):
        p = pair(side("a"), side("b", clip_id="c2", video_id=None))
        passed, _, reason = apply_prior(p)
        assert not passed and "missing video_id" in reason

    def test_product_logo_both_sides_passes_with_external(self):
        p = pair(
            side("a", category="product", phrase="sneaker", logo=True),
            side("img", category="product", source="external_images", logo=True),
        )
        passed, rule, _ = apply_prior(p)
        assert passed and rule == "product_logo"

    def test_product_logo_missing_fails(self):
        p = pair(
            side("a", category="product", logo=False),
            side("img", category="product", source="external_images", logo=True),
        )
        assert not apply_prior(p)[0]

    def test_category_other_excluded(self):
        p = pair(side("a", category="other"), side("b", category="other", clip_id="c2"))
        passed, rule, _ = apply_prior(p)
        assert not passed and rule == "category_other_excluded"

    def test_animals_use_living_rule(self):
        p = pair(
            side("a", category="animal", phrase="dog"),
            side("b", category="animal", phrase="dog", clip_id="c2"),
        )
        passed, rule, _ = apply_prior(p)
        assert passed and rule == "living_same_video"


VERIFY_FACTS = {
    "dims": {"face": 16, "general": 16},
    "vocabulary": {"woman": "human"},
    "clips": {"c1": {"context": "park"}, "c2": {"context": "beach"},
              "c3": {"context": "park"}},
    "subjects": {
        "c1::woman": {"identity": "alice"},
        "c2::woman": {"identity": "alice"},
        "c3::woman": {"identity": "alice"},          # same context as c1
        "c2::impostor": {"identity": "mallory"},
    },
    "boxes": {},
}


class TestVlmVerifyPair:
    def _pair(self, q_clip, c_clip, c_phrase="woman"):
        return pair(
            side("a", clip_id=q_clip, phrase="woman"),
            side("b", clip_id=c_clip, phrase=c_phrase),
        )

    def test_same_identity_different_context(self):
        client, _ = make_client(VERIFY_FACTS)
        assert vlm_verify_pair(self._pair("c1", "c2"), client) == (True, True)

    def test_same_identity_same_context_fails_diversity(self):
        client, _ = make_client(VERIFY_FACTS)
        assert vlm_verify_pair(self._pair("c1", "c3"), client) == (True, False)

    def test_different_identity_fails_consistency(self):
        client, _ = make_client(VERIFY_FACTS)
        identity, _ = vlm_verify_pair(self._pair("c1", "c2", "impostor"), client)
        assert identity is False


class TestFinalizePair:
    def _verdict(self, prior=True, identity=True, diverse=True):
        return PairVerdict(
            prior_pass=prior, prior_rule="living_same_video",
            identity_consistent=identity, context_diverse=diverse,
        )

    def test_all_pass_yields_verified(self):
        p = pair(side("a"), side("b", clip_id="c2"))
        row = finalize_pair(p, self._verdict())
        assert row["pair_id"] == pair_digest("a", "b")
        assert row["verdict"]["context_diverse"] is True
        assert row["query"]["subject_id"] == "a"

    def test_diversity_failure_names_context(self):
        p = pair(side("a"), side("b", clip_id="c2"))
        row = finalize_pair(p, self._verdict(diverse=False))
        assert row["reason"] == "context_not_diverse"

    def test_prior_failure_short_circuits_reason(self):
        p = pair(side("a"), side("b", clip_id="c2"))
        verdict = PairVerdict(prior_pass=False, prior_rule="living_same_video",
                              prior_reason="candidate from a different long-form video")
        row = finalize_pair(p, verdict)
        assert row["reason"] == "prior:living_same_video"
        assert "different long-form video" in row["detail"]

    def test_self_pair_rejected_at_construction(self):
        with pytest.raises(ValueError, match="self-pair"):
            pair(side("a"), side("a", clip_id="c2"))


class TestCanonicalOrientation:
    def test_external_candidate_stays_reference(self):
        p = pair(side("b", clip_id="c9"), side("img", source="external_images"))
        assert canonical_orientation(p) is p

    def test_video_pair_orients_by_clip_then_subject(self):
        a = side("a", clip_id="c2")
        b = side("b", clip_id="c1")
        flipped = canonical_orientation(pair(a, b))
        assert flipped.query.subject_id == "b"
        assert flipped.candidate.subject_id == "a"

    def test_both_directions_converge(self):
        a = side("a", clip_id="c1")
        b = side("b", clip_id="c2")
        one = canonical_orientation(pair(a, b))
        other = canonical_orientation(pair(b, a))
        assert one.query.subject_id == other.query.subject_id
        assert one.pair_id == other.pair_id


class TestVerifyCandidates:
    def test_duplicate_unordered_pair_dropped(self):
        client, _ = make_client(VERIFY_FACTS)
        a = side("a", clip_id="c1")
        b = side("b", clip_id="c2")
        outcome = verify_candidates([pair(a, b), pair(b, a)], client)
        assert len(outcome.verified) == 1
        assert outcome.duplicates == 1

    def test_conjunction_across_checks(self):
        client, _ = make_client(VERIFY_FACTS)
        ok = pair(side("a", clip_id="c1"), side("b", clip_id="c2"))
        same_ctx = pair(side("c", clip_id="c1"), side("d", clip_id="c3"))
        wrong_video = pair(side("e", clip_id="c1"),
                           side("f", clip_id="c9", video_id="v9"))
        outcome = verify_candidates([ok, same_ctx, wrong_video], client)
        assert [r["pair_id"] for r in outcome.verified] == [ok.pair_id]
        reasons = {r["pair_id"]: r["reason"] for r in outcome.rejected}
        assert reasons[same_ctx.pair_id] == "context_not_diverse"
        assert reasons[wrong_video.pair_id] == "prior:living_same_video"

    def test_backend_failure_rejects_pair(self):
        client, backend = make_client(VERIFY_FACTS)
        backend.inject_transport_faults("/v1/verify_pair", 3)
        outcome = verify_candidates(
            [pair(side("a", clip_id="c1"), side("b", clip_id="c2"))], client
        )
        assert outcome.verified == []
        assert outcome.rejected[0]["reason"] == "backend_error"


class TestAssembleSamples:
    CLIPS = {
        "c1": {"clip_id": "c1", "video_id": "v1", "caption": "one"},
        "c2": {"clip_id": "c2", "video_id": "v1", "caption": "two"},
    }

    def _verified(self, query_sid, clip_id, phrase="woman", category="human",
                  ref_sid="r1"):
        p = pair(
            side(query_sid, clip_id=clip_id, phrase=phrase, category=category),
            side(ref_sid, clip_id="c9"),
        )
        verdict = PairVerdict(prior_pass=True, prior_rule="living_same_video",
                              identity_consistent=True, context_diverse=True)
        return finalize_pair(p, verdict)

    def test_single_reference_sample(self):
        samples = assemble_samples([self._verified("a", "c1")], self.CLIPS)
        assert len(samples) == 1
        assert samples[0]["clip_id"] == "c1"
        assert samples[0]["subject_count"] == 1
        assert samples[0]["caption"] == "one"

    def test_two_subjects_make_multi_reference_sample(self):
        rows = [
            self._verified("a", "c1", phrase="woman", ref_sid="r1"),
            self._verified("b", "c1", phrase="sneaker", category="product", ref_sid="r2"),
        ]
        samples = assemble_samples(rows, self.CLIPS)
        assert len(samples) == 1
        assert samples[0]["subject_count"] == 2
        assert len(samples[0]["references"]) == 2

    def test_zero_verified_pairs_no_samples(self):
        assert assemble_samples([], self.CLIPS) == []

    def test_partition_every_pair_in_exactly_one_sample(self):
        rows = [
            self._verified("a", "c1", ref_sid="r1"),
            self._verified("b", "c2", ref_sid="r2"),
            self._verified("c", "c2", phrase="man", ref_sid="r3"),
        ]
        samples = assemble_samples(rows, self.CLIPS)
        seen = [ref["pair_id"] for s in samples for ref in s["references"]]
        assert sorted(seen) == sorted(r["pair_id"] for r in rows)
        assert len(seen) == len(set(seen))

    def test_unknown_clip_rejected(self):
        with pytest.raises(ValueError, match="unknown clip"):
            assemble_samples([self._verified("a", "cX")], self.CLIPS)
