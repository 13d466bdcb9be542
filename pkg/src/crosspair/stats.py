"""Dataset-level statistics over the constructed samples and clip manifest."""

from __future__ import annotations

from dataclasses import dataclass, field

DURATION_BUCKETS = ("0-5s", "5-10s", "10-20s", "20s+")
COMPOSITION_KEYS = ("1", "2", "3+")


def duration_bucket(duration_s: float) -> str:
    if duration_s < 5.0:
        return "0-5s"
    if duration_s < 10.0:
        return "5-10s"
    if duration_s < 20.0:
        return "10-20s"
    return "20s+"


def resolution_label(width: int, height: int) -> str:
    # Label by vertical resolution, the convention the corpus is described in.
    if height in (480, 720, 1080, 2160):
        return f"{height}p"
    return f"{width}x{height}"


@dataclass
class StatsReport:
    duration_histogram: dict[str, int] = field(default_factory=dict)
    resolution_counts: dict[str, int] = field(default_factory=dict)
    composition: dict[str, int] = field(default_factory=dict)
    category_counts: dict[str, int] = field(default_factory=dict)
    motion_counts: dict[str, int] = field(default_factory=dict)
    total_clips: int = 0
    total_subjects: int = 0
    total_verified_pairs: int = 0
    total_samples: int = 0
    multi_subject_samples: int = 0

    def as_dict(self) -> dict:
        out = {
            "duration_histogram": {k: self.duration_histogram.get(k, 0) for k in DURATION_BUCKETS},
            "resolution_counts": dict(sorted(self.resolution_counts.items())),
            "composition": {k: self.composition.get(k, 0) for k in COMPOSITION_KEYS},
            "category_counts": dict(sorted(self.category_counts.items())),
            "totals": {
                "clips": self.total_clips,
                "subjects": self.total_subjects,
                "verified_pairs": self.total_verified_pairs,
                "samples": self.total_samples,
                "multi_subject_samples": self.multi_subject_samples,
            },
        }
        if self.motion_counts:
            out["motion_counts"] = dict(sorted(self.motion_counts.items()))
        return out


def compute_stats(samples: list[dict], clips: list[dict]) -> StatsReport:
    """Aggregate duration/resolution/composition/category distributions.

    Deterministic; durations come from (end_s - start_s) over the clip
    manifest, composition from distinct target subjects per sample.
    `totals.subjects` counts distinct target-clip subjects across samples
    (the only subject population visible from these two inputs). The motion
    table appears only when clips carry a `motion` label.
    """
    report = StatsReport()
    clip_ids = set()
    for clip in clips:
        clip_ids.add(clip["clip_id"])
        report.total_clips += 1
        bucket = duration_bucket(float(clip["end_s"]) - float(clip["start_s"]))
        report.duration_histogram[bucket] = report.duration_histogram.get(bucket, 0) + 1
        label = resolution_label(int(clip["width"]), int(clip["height"]))
        report.resolution_counts[label] = report.resolution_counts.get(label, 0) + 1
        motion = clip.get("motion")
        if motion is not None:
            report.motion_counts[str(motion)] = report.motion_counts.get(str(motion), 0) + 1

    subjects: set[str] = set()
    for sample in samples:
        if sample["clip_id"] not in clip_ids:
            raise ValueError(f"sample references unknown clip {sample['clip_id']}")
        report.total_samples += 1
        refs = sample["references"]
        report.total_verified_pairs += len(refs)
        distinct = {r["target_subject_id"] for r in refs}
        subjects.update(distinct)
        key = "1" if len(distinct) == 1 else ("2" if len(distinct) == 2 else "3+")
        report.composition[key] = report.composition.get(key, 0) + 1
        if len(distinct) >= 2:
            report.multi_subject_samples += 1
        for ref in refs:
            cat = ref["category"]
            report.category_counts[cat] = report.category_counts.get(cat, 0) + 1
    report.total_subjects = len(subjects)

    assert sum(report.duration_histogram.values()) == report.total_clips
    assert sum(report.composition.values()) == report.total_samples
    return report


def render_text(report: StatsReport) -> str:
    """Human-readable table of the report."""
    d = report.as_dict()
    lines = ["dataset statistics", "=" * 18, ""]

    def section(title: str, counts: dict) -> None:
        lines.append(title)
        if not counts:
            lines.append("  (none)")
        width = max((len(k) for k in counts), default=0)
        for key, value in counts.items():
            lines.append(f"  {key.ljust(width)}  {value}")
        lines.append("")

    section("clip duration", d["duration_histogram"])
    section("resolution", d["resolution_counts"])
    section("subjects per sample", d["composition"])
    section("reference category", d["category_counts"])
    if "motion_counts" in d:
        section("motion", d["motion_counts"])
    section("totals", d["totals"])
    return "\n".join(lines)
