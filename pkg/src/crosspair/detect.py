"""Subject detection over (clip, caption): sampling, keyword extraction,
grounding, geometric filtering, overlap suppression, recheck, and
representative selection.

A detection survives iff it passed every gate: unambiguous grounding, the
geometric filter, overlap suppression, and the full three-criterion
recheck. Backend failures during recheck drop the instance (precision over
recall).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

from .core import (
    BoundingBox,
    ClipRecord,
    FilterPolicy,
    RecheckVerdict,
    SamplingPolicy,
    SubjectInstance,
)
from .infer import InferenceClient, InferenceError, MalformedResponse

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    phrase: str
    category: str
    frame_index: int
    bbox: BoundingBox


@dataclass
class ClipDetectResult:
    clip_id: str
    instances: list[SubjectInstance]
    errors: list[str]
    dropped_boxes: int = 0


def sample_frames(frame_count: int, policy: SamplingPolicy = SamplingPolicy()) -> list[int]:
    """Clip-relative fractions to frame indices: round-half-up on f*(N-1)."""
    if frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    indices = []
    for f in policy.fractions:
        idx = math.floor(f * (frame_count - 1) + 0.5)
        indices.append(min(max(idx, 0), frame_count - 1))
    return sorted(set(indices))


def extract_keywords(caption: str, client: InferenceClient) -> list[tuple[str, str]]:
    """Key noun phrases with categories, deduplicated preserving first occurrence."""
    if not caption.strip():
        return []
    phrases = client.keywords(caption)
    seen: set[str] = set()
    out = []
    for item in phrases:
        text = item["text"]
        if text and text not in seen:
            seen.add(text)
            out.append((text, item["category"]))
    return out


def _clip_box(raw: list[float], width: int, height: int) -> Optional[BoundingBox]:
    x0 = max(0, min(int(raw[0]), width))
    y0 = max(0, min(int(raw[1]), height))
    x1 = max(0, min(int(raw[2]), width))
    y1 = max(0, min(int(raw[3]), height))
    if x1 <= x0 or y1 <= y0:
        return None
    return BoundingBox(x0, y0, x1, y1)


def ground_phrases(
    clip: ClipRecord,
    frame_indices: list[int],
    phrases: list[tuple[str, str]],
    client: InferenceClient,
) -> tuple[list[Detection], int]:
    """Align each phrase to regions per sampled frame.

    A phrase matching two or more regions in a frame is ambiguous: all its
    boxes in that frame are removed. Boxes are clipped to frame bounds;
    boxes degenerate after clipping are dropped and counted.
    """
    detections: list[Detection] = []
    dropped = 0
    for phrase, category in phrases:
        for frame_index in frame_indices:
            raw_boxes = client.ground(phrase, clip.clip_id, frame_index)
            if len(raw_boxes) >= 2:
                continue  # ambiguous match: drop every region for this frame
            for raw in raw_boxes:
                box = _clip_box(raw, clip.width, clip.height)
                if box is None:
                    dropped += 1
                    logger.warning(
                        "clip %s frame %d phrase %r: malformed box %s dropped",
                        clip.clip_id, frame_index, phrase, raw,
                    )
                    continue
                detections.append(
                    Detection(phrase=phrase, category=category,
                              frame_index=frame_index, bbox=box)
                )
    return detections, dropped


def box_admissible(
    bbox: BoundingBox, width: int, height: int, policy: FilterPolicy
) -> bool:
    fraction = bbox.area / (width * height)
    return (
        policy.min_area_fraction <= fraction <= policy.max_area_fraction
        and bbox.width >= policy.min_side_px
        and bbox.height >= policy.min_side_px
    )


def filter_bboxes(
    detections: list[Detection], width: int, height: int, policy: FilterPolicy
) -> list[Detection]:
    """Keep boxes within the inclusive area-fraction band and min side length."""
    return [d for d in detections if box_admissible(d.bbox, width, height, policy)]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix0, iy0 = max(a.x0, b.x0), max(a.y0, b.y0)
    ix1, iy1 = min(a.x1, b.x1), min(a.y1, b.y1)
    if ix1 <= ix0 or iy1 <= iy0:
        return 0.0
    inter = (ix1 - ix0) * (iy1 - iy0)
    return inter / (a.area + b.area - inter)


def suppress_overlaps(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy same-frame suppression, keeping larger boxes.

    Candidates are visited in descending-area order (ties by lexicographic
    box coordinates); a box is kept iff its IoU with every already-kept box
    is <= threshold (strictly-greater overlap suppresses).
    """
    order = sorted(detections, key=lambda d: (-d.bbox.area, d.bbox.as_tuple()))
    kept: list[Detection] = []
    for det in order:
        if all(iou(det.bbox, k.bbox) <= iou_threshold for k in kept):
            kept.append(det)
    return kept


def recheck_detection(
    det: Detection, clip: ClipRecord, client: InferenceClient
) -> tuple[Optional[RecheckVerdict], Optional[bool], Optional[str]]:
    """Run the completeness/specificity/matching check for one detection.

    Returns (verdict, logo_visible, error). Backend failure after retries
    yields (None, None, reason) and the caller drops the instance.
    """
    try:
        body = client.recheck(
            det.phrase, clip.clip_id, det.frame_index, list(det.bbox.as_tuple())
        )
    except (InferenceError, MalformedResponse) as exc:
        return None, None, f"recheck backend error: {exc}"
    verdict = RecheckVerdict(
        completeness=body["completeness"],
        specificity=body["specificity"],
        matching=body["matching"],
    )
    return verdict, body.get("logo_visible"), None


def select_representative(instances: list[SubjectInstance]) -> SubjectInstance:
    """One instance per (clip, phrase): largest box, then earliest frame,
    then lexicographically smallest bbox."""
    if not instances:
        raise ValueError("select_representative needs at least one instance")
    keys = {(i.clip_id, i.phrase) for i in instances}
    if len(keys) != 1:
        raise ValueError(f"instances span multiple subjects: {sorted(keys)}")
    return min(
        instances,
        key=lambda i: (-i.bbox.area, i.frame_index, i.bbox.as_tuple()),
    )


def detect_clip(
    clip: ClipRecord,
    client: InferenceClient,
    sampling: SamplingPolicy = SamplingPolicy(),
    policy: FilterPolicy = FilterPolicy(),
) -> ClipDetectResult:
    """Full detection pass for one clip; errors are recorded, not raised."""
    result = ClipDetectResult(clip_id=clip.clip_id, instances=[], errors=[])
    frame_indices = sample_frames(clip.frame_count, sampling)
    try:
        phrases = extract_keywords(clip.caption, client)
    except (InferenceError, MalformedResponse) as exc:
        result.errors.append(f"keyword extraction failed: {exc}")
        return result
    if not phrases:
        return result

    try:
        detections, dropped = ground_phrases(clip, frame_indices, phrases, client)
    except (InferenceError, MalformedResponse) as exc:
        result.errors.append(f"grounding failed: {exc}")
        return result
    result.dropped_boxes = dropped

    detections = filter_bboxes(detections, clip.width, clip.height, policy)
    by_frame: dict[int, list[Detection]] = {}
    for det in detections:
        by_frame.setdefault(det.frame_index, []).append(det)
    surviving: list[Detection] = []
    for frame_index in sorted(by_frame):
        surviving.extend(
            suppress_overlaps(by_frame[frame_index], policy.iou_suppress_threshold)
        )

    categories = dict(phrases)
    checked: list[SubjectInstance] = []
    for det in surviving:
        verdict, logo_visible, error = recheck_detection(det, clip, client)
        if error is not None:
            result.errors.append(f"{det.phrase}@{det.frame_index}: {error}")
            continue
        if not verdict.passed:
            continue
        checked.append(
            SubjectInstance.build(
                clip_id=clip.clip_id,
                frame_index=det.frame_index,
                bbox=det.bbox,
                phrase=det.phrase,
                category=categories[det.phrase],
                video_id=clip.video_id,
                logo_visible=logo_visible if categories[det.phrase] == "product" else None,
                recheck=verdict,
            )
        )

    by_phrase: dict[str, list[SubjectInstance]] = {}
    for inst in checked:
        by_phrase.setdefault(inst.phrase, []).append(inst)
    for phrase in sorted(by_phrase):
        result.instances.append(select_representative(by_phrase[phrase]))
    result.instances.sort(key=lambda i: (i.clip_id, i.subject_id))
    return result
