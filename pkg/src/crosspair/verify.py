"""Prior-based identity verification and training-sample assembly.

Checks run cheapest-first: the category prior is free, the two model-backed
checks (identity consistency, then contextual diversity) only run when the
prior passes. Living subjects must pair across different clips of the same
long-form video; products must show a logo on both sides; category "other"
never pairs.

Pairs are canonically oriented before verification so each unordered pair
is verified once and lands in a deterministic target clip: an external
candidate always becomes the reference, and for video-video pairs the side
with the smaller (clip_id, subject_id) becomes the query.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from .core import LIVING_CATEGORIES, pair_digest
from .infer import InferenceClient, InferenceError, MalformedResponse

logger = logging.getLogger(__name__)

PRIOR_LIVING = "living_same_video"
PRIOR_PRODUCT = "product_logo"
PRIOR_OTHER = "category_other_excluded"


@dataclass(frozen=True)
class PairSide:
    """One endpoint of a candidate pair, resolved to its full record."""

    subject_id: str
    source: str
    category: str
    clip_id: Optional[str] = None
    video_id: Optional[str] = None
    frame_index: Optional[int] = None
    bbox: Optional[tuple[int, int, int, int]] = None
    phrase: Optional[str] = None
    logo_visible: Optional[bool] = None

    def wire_ref(self) -> dict:
        if self.source == "external_images":
            return {"image_id": self.subject_id}
        return {
            "clip_id": self.clip_id,
            "frame_index": self.frame_index,
            "bbox": list(self.bbox),
            "phrase": self.phrase,
        }

    def as_row(self) -> dict:
        row: dict = {"subject_id": self.subject_id, "source": self.source,
                     "category": self.category}
        for key in ("clip_id", "video_id", "phrase"):
            value = getattr(self, key)
            if value is not None:
                row[key] = value
        if self.frame_index is not None:
            row["frame_index"] = self.frame_index
        if self.bbox is not None:
            row["bbox"] = list(self.bbox)
        if self.logo_visible is not None:
            row["logo_visible"] = self.logo_visible
        return row


@dataclass(frozen=True)
class CandidatePair:
    query: PairSide
    candidate: PairSide
    similarity: float

    def __post_init__(self) -> None:
        if self.query.subject_id == self.candidate.subject_id:
            raise ValueError(f"self-pair {self.query.subject_id}")

    @property
    def pair_id(self) -> str:
        return pair_digest(self.query.subject_id, self.candidate.subject_id)

    @property
    def category(self) -> str:
        return self.query.category


@dataclass
class PairVerdict:
    prior_pass: bool
    prior_rule: str
    prior_reason: Optional[str] = None
    identity_consistent: Optional[bool] = None
    context_diverse: Optional[bool] = None
    backend_error: Optional[str] = None

    @property
    def accepted(self) -> bool:
        return bool(self.prior_pass and self.identity_consistent and self.context_diverse)

    def first_failure(self) -> Optional[str]:
        if not self.prior_pass:
            return f"prior:{self.prior_rule}"
        if self.backend_error is not None:
            return "backend_error"
        if not self.identity_consistent:
            return "identity_inconsistent"
        if not self.context_diverse:
            return "context_not_diverse"
        return None


def canonical_orientation(pair: CandidatePair) -> CandidatePair:
    """Deterministic query/reference orientation for an unordered pair."""
    q, c = pair.query, pair.candidate
    if c.source == "external_images":
        return pair
    if (c.clip_id or "", c.subject_id) < (q.clip_id or "", q.subject_id):
        return CandidatePair(query=c, candidate=q, similarity=pair.similarity)
    return pair


def apply_prior(pair: CandidatePair) -> tuple[bool, str, Optional[str]]:
    """Category-specific structural rule; returns (passed, rule, fail reason)."""
    category = pair.category
    if category in LIVING_CATEGORIES:
        cand = pair.candidate
        if cand.source != "video_corpus":
            return False, PRIOR_LIVING, "living candidate not from the video corpus"
        if cand.video_id is None or pair.query.video_id is None:
            return False, PRIOR_LIVING, "missing video_id on a living pair"
        if cand.video_id != pair.query.video_id:
            return False, PRIOR_LIVING, "candidate from a different long-form video"
        if cand.clip_id is None or cand.clip_id == pair.query.clip_id:
            return False, PRIOR_LIVING, "candidate not from a different clip"
        return True, PRIOR_LIVING, None
    if category == "product":
        if pair.query.logo_visible is True and pair.candidate.logo_visible is True:
            return True, PRIOR_PRODUCT, None
        return False, PRIOR_PRODUCT, "logo not visible on both sides"
    return False, PRIOR_OTHER, f"category {category!r} excluded from cross-pairing"


def vlm_verify_pair(
    pair: CandidatePair, client: InferenceClient
) -> tuple[bool, bool]:
    """Model-backed identity-consistency and context-diversity checks."""
    body = client.verify_pair(
        pair.query.wire_ref(), pair.candidate.wire_ref(), pair.category
    )
    return bool(body["identity_consistent"]), bool(body["context_diverse"])


def finalize_pair(pair: CandidatePair, verdict: PairVerdict) -> dict:
    """Produce the verified row, or a rejection row naming the first failure."""
    if verdict.accepted:
        return {
            "pair_id": pair.pair_id,
            "category": pair.category,
            "query": pair.query.as_row(),
            "reference": pair.candidate.as_row(),
            "similarity": round(pair.similarity, 6),
            "verdict": {
                "prior_rule": verdict.prior_rule,
                "prior": True,
                "identity_consistent": True,
                "context_diverse": True,
            },
        }
    row = {
        "pair_id": pair.pair_id,
        "category": pair.category,
        "query_subject_id": pair.query.subject_id,
        "candidate_subject_id": pair.candidate.subject_id,
        "reason": verdict.first_failure(),
    }
    if verdict.prior_reason is not None:
        row["detail"] = verdict.prior_reason
    elif verdict.backend_error is not None:
        row["detail"] = verdict.backend_error
    return row


@dataclass
class VerifyOutcome:
    verified: list[dict] = field(default_factory=list)
    rejected: list[dict] = field(default_factory=list)
    duplicates: int = 0


def verify_candidates(pairs: list[CandidatePair], client: InferenceClient) -> VerifyOutcome:
    """Run prior + model checks over candidate pairs with unordered dedup.

    Pairs are canonicalized, processed in sorted order, and each unordered
    (subject, subject) set is verified at most once; later submissions of
    the same set are dropped as duplicates.
    """
    canonical = [canonical_orientation(p) for p in pairs]
    canonical.sort(key=lambda p: (p.query.subject_id, p.candidate.subject_id))
    outcome = VerifyOutcome()
    seen: set[str] = set()
    for pair in canonical:
        if pair.pair_id in seen:
            outcome.duplicates += 1
            continue
        seen.add(pair.pair_id)
        passed, rule, reason = apply_prior(pair)
        verdict = PairVerdict(prior_pass=passed, prior_rule=rule, prior_reason=reason)
        if passed:
            try:
                identity, diverse = vlm_verify_pair(pair, client)
                verdict.identity_consistent = identity
                verdict.context_diverse = diverse
            except (InferenceError, MalformedResponse) as exc:
                verdict.backend_error = str(exc)
                verdict.identity_consistent = False
                logger.warning("pair %s rejected: backend error %s", pair.pair_id, exc)
        row = finalize_pair(pair, verdict)
        if verdict.accepted:
            outcome.verified.append(row)
        else:
            outcome.rejected.append(row)
    return outcome


def assemble_samples(verified_rows: list[dict], clips_by_id: dict[str, dict]) -> list[dict]:
    """One training sample per target clip carrying all its verified references.

    Multi-reference samples arise when >= 2 distinct subjects of a clip have
    verified references; every verified pair lands in exactly one sample.
    """
    by_clip: dict[str, list[dict]] = {}
    for row in verified_rows:
        clip_id = row["query"]["clip_id"]
        if clip_id not in clips_by_id:
            raise ValueError(f"verified pair {row['pair_id']} references unknown clip {clip_id}")
        by_clip.setdefault(clip_id, []).append(row)
    samples = []
    for clip_id in sorted(by_clip):
        rows = sorted(by_clip[clip_id], key=lambda r: (r["query"]["subject_id"], r["pair_id"]))
        clip = clips_by_id[clip_id]
        references = [
            {
                "pair_id": r["pair_id"],
                "target_subject_id": r["query"]["subject_id"],
                "phrase": r["query"].get("phrase"),
                "category": r["category"],
                "reference": r["reference"],
            }
            for r in rows
        ]
        samples.append(
            {
                "clip_id": clip_id,
                "video_id": clip.get("video_id"),
                "caption": clip.get("caption", ""),
                "references": references,
                "subject_count": len({r["query"]["subject_id"] for r in rows}),
            }
        )
    return samples
