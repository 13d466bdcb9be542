"""Domain types, stable identifiers, and manifest validation shared by all stages.

Everything here is an immutable value type; operations are pure functions.
Bounding boxes use half-open pixel intervals so area = (x1-x0)*(y1-y0) with
no off-by-one ambiguity.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

CATEGORIES = ("human", "animal", "product", "other")
LIVING_CATEGORIES = frozenset({"human", "animal"})

QUALITY_FLAGS = ("black_border_checked", "motion_checked")

# Manifest fields owned by ClipRecord; anything else rides in `extras` and is
# preserved on rewrite.
_CLIP_FIELDS = (
    "clip_id",
    "video_id",
    "start_s",
    "end_s",
    "frame_count",
    "width",
    "height",
    "caption",
    "quality",
)


def living_from_category(category: str) -> bool:
    return category in LIVING_CATEGORIES


@dataclass(frozen=True, order=True)
class BoundingBox:
    """Half-open pixel box: covers x in [x0, x1), y in [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"negative box origin: {self}")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"empty or inverted box: {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def validate_within(self, frame_width: int, frame_height: int) -> None:
        if self.x1 > frame_width or self.y1 > frame_height:
            raise ValueError(
                f"box {self.as_tuple()} exceeds frame {frame_width}x{frame_height}"
            )

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    @classmethod
    def from_seq(cls, seq: Iterable[float]) -> "BoundingBox":
        x0, y0, x1, y1 = (int(v) for v in seq)
        return cls(x0, y0, x1, y1)


@dataclass(frozen=True)
class RecheckVerdict:
    """Three-criterion validation of a grounded detection."""

    completeness: bool
    specificity: bool
    matching: bool

    @property
    def passed(self) -> bool:
        return self.completeness and self.specificity and self.matching


@dataclass(frozen=True)
class SamplingPolicy:
    """Clip-relative positions at which frames are sampled."""

    fractions: tuple[float, ...] = (0.05, 0.5, 0.95)

    def __post_init__(self) -> None:
        fr = tuple(self.fractions)
        object.__setattr__(self, "fractions", fr)
        if not fr:
            raise ValueError("fractions must be non-empty")
        for f in fr:
            if not 0.0 <= f <= 1.0:
                raise ValueError(f"fraction {f} outside [0, 1]")
        if any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError(f"fractions not strictly increasing: {fr}")


@dataclass(frozen=True)
class FilterPolicy:
    """Geometric admissibility rules for detected boxes (bounds inclusive)."""

    min_area_fraction: float = 0.04
    max_area_fraction: float = 0.90
    min_side_px: int = 128
    iou_suppress_threshold: float = 0.8

    def __post_init__(self) -> None:
        if not 0.0 < self.min_area_fraction < self.max_area_fraction <= 1.0:
            raise ValueError(
                f"need 0 < min_area_fraction < max_area_fraction <= 1, got "
                f"{self.min_area_fraction}, {self.max_area_fraction}"
            )
        if self.min_side_px < 1:
            raise ValueError("min_side_px must be >= 1")
        if not 0.0 < self.iou_suppress_threshold <= 1.0:
            raise ValueError("iou_suppress_threshold must be in (0, 1]")


@dataclass(frozen=True)
class ClipRecord:
    """One scene-segmented clip plus its caption and quality flags.

    Construction never raises: manifest rows are parsed first and validated
    as a batch by :func:`validate_manifest`, which reports per-record errors
    instead of failing fast.
    """

    clip_id: str
    video_id: str
    start_s: float
    end_s: float
    frame_count: int
    width: int
    height: int
    caption: str
    quality: frozenset = frozenset()
    extras: dict = field(default_factory=dict, compare=False)

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    def with_quality(self, *flags: str) -> "ClipRecord":
        return ClipRecord(
            clip_id=self.clip_id,
            video_id=self.video_id,
            start_s=self.start_s,
            end_s=self.end_s,
            frame_count=self.frame_count,
            width=self.width,
            height=self.height,
            caption=self.caption,
            quality=self.quality | frozenset(flags),
            extras=dict(self.extras),
        )


@dataclass(frozen=True)
class SubjectInstance:
    """A qualified detected subject: one representative box per (clip, phrase).

    `video_id` is joined in from the owning clip so downstream stages can
    apply same-video priors without re-reading the manifest.
    """

    subject_id: str
    clip_id: str
    frame_index: int
    bbox: BoundingBox
    phrase: str
    category: str
    living: bool
    video_id: Optional[str] = None
    logo_visible: Optional[bool] = None
    recheck: Optional[RecheckVerdict] = None

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.living != living_from_category(self.category):
            raise ValueError(
                f"living={self.living} inconsistent with category {self.category!r}"
            )
        expected = subject_digest(self.clip_id, self.frame_index, self.bbox, self.phrase)
        if self.subject_id != expected:
            raise ValueError(f"subject_id {self.subject_id} is not the digest of its fields")

    @classmethod
    def build(
        cls,
        clip_id: str,
        frame_index: int,
        bbox: BoundingBox,
        phrase: str,
        category: str,
        video_id: Optional[str] = None,
        logo_visible: Optional[bool] = None,
        recheck: Optional[RecheckVerdict] = None,
    ) -> "SubjectInstance":
        return cls(
            subject_id=subject_digest(clip_id, frame_index, bbox, phrase),
            clip_id=clip_id,
            frame_index=frame_index,
            bbox=bbox,
            phrase=phrase,
            category=category,
            living=living_from_category(category),
            video_id=video_id,
            logo_visible=logo_visible,
            recheck=recheck,
        )


def subject_digest(clip_id: str, frame_index: int, bbox: BoundingBox, phrase: str) -> str:
    """Stable 128-bit id for a detection.

    Canonical byte layout: domain tag, length-prefixed clip_id bytes, the
    frame index and box coordinates as fixed-width little-endian int32, then
    length-prefixed phrase bytes. Text is digested byte-exact (no
    normalization), so "dog" and "Dog" produce different ids.
    """
    h = hashlib.sha256()
    h.update(b"subj\x00")
    cid = clip_id.encode("utf-8")
    h.update(struct.pack("<I", len(cid)))
    h.update(cid)
    h.update(struct.pack("<iiiii", frame_index, bbox.x0, bbox.y0, bbox.x1, bbox.y1))
    ph = phrase.encode("utf-8")
    h.update(struct.pack("<I", len(ph)))
    h.update(ph)
    return h.hexdigest()[:32]


def pair_digest(subject_id_a: str, subject_id_b: str) -> str:
    """Order-normalized id for an unordered pair of subjects."""
    lo, hi = sorted((subject_id_a, subject_id_b))
    h = hashlib.sha256()
    h.update(b"pair\x00")
    h.update(lo.encode("utf-8"))
    h.update(b"\x00")
    h.update(hi.encode("utf-8"))
    return h.hexdigest()[:32]


class ManifestReport:
    """Validation outcome for a clip manifest, errors keyed by clip_id."""

    def __init__(self) -> None:
        self.errors: dict[str, list[str]] = {}

    def add(self, clip_id: str, message: str) -> None:
        self.errors.setdefault(clip_id, []).append(message)

    @property
    def ok(self) -> bool:
        return not self.errors

    def as_dict(self) -> dict[str, list[str]]:
        return {k: list(v) for k, v in sorted(self.errors.items())}


def clip_errors(record: ClipRecord) -> list[str]:
    errs = []
    if not record.clip_id:
        errs.append("empty clip_id")
    if not record.video_id:
        errs.append("empty video_id")
    if record.start_s < 0:
        errs.append(f"negative start_s {record.start_s}")
    if record.start_s >= record.end_s:
        errs.append(f"start_s {record.start_s} >= end_s {record.end_s}")
    if record.frame_count < 1:
        errs.append(f"frame_count {record.frame_count} < 1")
    if record.width < 1 or record.height < 1:
        errs.append(f"non-positive dimensions {record.width}x{record.height}")
    unknown = set(record.quality) - set(QUALITY_FLAGS)
    if unknown:
        errs.append(f"unknown quality flags {sorted(unknown)}")
    return errs


def validate_manifest(records: list[ClipRecord]) -> ManifestReport:
    """Check type invariants and id uniqueness; reports all errors, never mutates."""
    report = ManifestReport()
    seen: set[str] = set()
    for rec in records:
        for msg in clip_errors(rec):
            report.add(rec.clip_id, msg)
        if rec.clip_id in seen:
            report.add(rec.clip_id, "duplicate clip_id")
        seen.add(rec.clip_id)
    return report


def clip_to_row(record: ClipRecord) -> dict:
    row = {
        "clip_id": record.clip_id,
        "video_id": record.video_id,
        "start_s": record.start_s,
        "end_s": record.end_s,
        "frame_count": record.frame_count,
        "width": record.width,
        "height": record.height,
        "caption": record.caption,
        "quality": sorted(record.quality),
    }
    for key, value in sorted(record.extras.items()):
        row.setdefault(key, value)
    return row


def clip_from_row(row: dict) -> ClipRecord:
    extras = {k: v for k, v in row.items() if k not in _CLIP_FIELDS}
    return ClipRecord(
        clip_id=str(row.get("clip_id", "")),
        video_id=str(row.get("video_id", "")),
        start_s=float(row.get("start_s", 0.0)),
        end_s=float(row.get("end_s", 0.0)),
        frame_count=int(row.get("frame_count", 0)),
        width=int(row.get("width", 0)),
        height=int(row.get("height", 0)),
        caption=str(row.get("caption", "")),
        quality=frozenset(row.get("quality", ())),
        extras=extras,
    )


def read_manifest(path: Path) -> list[ClipRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            records.append(clip_from_row(row))
    return records


def subject_to_row(inst: SubjectInstance) -> dict:
    row = {
        "subject_id": inst.subject_id,
        "clip_id": inst.clip_id,
        "video_id": inst.video_id,
        "frame_index": inst.frame_index,
        "bbox": list(inst.bbox.as_tuple()),
        "phrase": inst.phrase,
        "category": inst.category,
        "living": inst.living,
    }
    if inst.logo_visible is not None:
        row["logo_visible"] = inst.logo_visible
    if inst.recheck is not None:
        row["recheck"] = {
            "completeness": inst.recheck.completeness,
            "specificity": inst.recheck.specificity,
            "matching": inst.recheck.matching,
        }
    return row


def subject_from_row(row: dict) -> SubjectInstance:
    recheck = None
    if "recheck" in row:
        r = row["recheck"]
        recheck = RecheckVerdict(
            completeness=bool(r["completeness"]),
            specificity=bool(r["specificity"]),
            matching=bool(r["matching"]),
        )
    return SubjectInstance(
        subject_id=row["subject_id"],
        clip_id=row["clip_id"],
        frame_index=int(row["frame_index"]),
        bbox=BoundingBox.from_seq(row["bbox"]),
        phrase=row["phrase"],
        category=row["category"],
        living=bool(row["living"]),
        video_id=row.get("video_id"),
        logo_visible=row.get("logo_visible"),
        recheck=recheck,
    )
