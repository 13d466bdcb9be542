"""Manifest ingestion and implementable clip-quality filters.

Only black-border filtering is computed here; motion analysis arrives
precomputed via manifest quality flags. Frames are read from a codec-free
sidecar store: one raw 8-bit grayscale file per (clip, frame) with a small
width/height header, which keeps fixtures file-based.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import ClipRecord

logger = logging.getLogger(__name__)

DEFAULT_BLACK_THRESHOLD = 16
DEFAULT_ROW_FRACTION = 0.98
DEFAULT_MAX_BORDER_FRACTION = 0.10

_FRAME_HEADER = struct.Struct("<II")


@dataclass(frozen=True)
class BorderReport:
    """Contiguous near-black border depth, in pixels, from each frame edge."""

    top: int
    bottom: int
    left: int
    right: int

    @property
    def is_zero(self) -> bool:
        return self.top == self.bottom == self.left == self.right == 0


@dataclass(frozen=True)
class FramePixels:
    """One grayscale frame; luma is row-major uint8 of length width*height."""

    width: int
    height: int
    luma: np.ndarray

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"bad frame dims {self.width}x{self.height}")
        if self.luma.size != self.width * self.height:
            raise ValueError(
                f"luma length {self.luma.size} != {self.width}x{self.height}"
            )

    def grid(self) -> np.ndarray:
        return np.asarray(self.luma, dtype=np.uint8).reshape(self.height, self.width)


@dataclass(frozen=True)
class QualityDecision:
    keep: bool
    checked: bool
    reason: Optional[str] = None


def _leading_run(flags: np.ndarray) -> int:
    """Length of the True run starting at index 0."""
    if flags.all():
        return int(flags.size)
    return int(np.argmin(flags))


def detect_black_borders(
    frame: FramePixels,
    black_threshold: int = DEFAULT_BLACK_THRESHOLD,
    row_fraction: float = DEFAULT_ROW_FRACTION,
) -> BorderReport:
    """Measure maximal contiguous border runs from each edge.

    A row (column) counts as border iff at least `row_fraction` of its
    pixels have luma <= `black_threshold`. When opposing runs would overlap
    (fully black frame), the top/left run wins and the opposite side is
    clamped to keep top+bottom <= height and left+right <= width.
    """
    grid = frame.grid()
    dark = grid <= black_threshold
    row_is_border = dark.sum(axis=1) >= row_fraction * frame.width
    col_is_border = dark.sum(axis=0) >= row_fraction * frame.height

    top = _leading_run(row_is_border)
    bottom = min(_leading_run(row_is_border[::-1]), frame.height - top)
    left = _leading_run(col_is_border)
    right = min(_leading_run(col_is_border[::-1]), frame.width - left)
    return BorderReport(top=top, bottom=bottom, left=left, right=right)


def quality_filter(
    clip: ClipRecord,
    report: Optional[BorderReport],
    max_border_fraction: float = DEFAULT_MAX_BORDER_FRACTION,
) -> QualityDecision:
    """Keep/drop a clip by border coverage; absent evidence passes unchecked."""
    if report is None:
        return QualityDecision(keep=True, checked=False)
    v_frac = (report.top + report.bottom) / clip.height
    h_frac = (report.left + report.right) / clip.width
    if v_frac > max_border_fraction:
        return QualityDecision(
            keep=False, checked=True,
            reason=f"vertical border fraction {v_frac:.4f} > {max_border_fraction}",
        )
    if h_frac > max_border_fraction:
        return QualityDecision(
            keep=False, checked=True,
            reason=f"horizontal border fraction {h_frac:.4f} > {max_border_fraction}",
        )
    return QualityDecision(keep=True, checked=True)


# -- frame store ------------------------------------------------------------


def frame_path(frames_dir: Path, clip_id: str, frame_index: int) -> Path:
    return Path(frames_dir) / clip_id / f"{frame_index}.y"


def write_frame(path: Path, frame: FramePixels) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_FRAME_HEADER.pack(frame.width, frame.height))
        fh.write(frame.grid().tobytes())


def read_frame(path: Path) -> FramePixels:
    with open(path, "rb") as fh:
        header = fh.read(_FRAME_HEADER.size)
        if len(header) != _FRAME_HEADER.size:
            raise ValueError(f"{path}: truncated frame header")
        width, height = _FRAME_HEADER.unpack(header)
        data = fh.read(width * height)
    if len(data) != width * height:
        raise ValueError(f"{path}: truncated frame payload")
    return FramePixels(width=width, height=height, luma=np.frombuffer(data, dtype=np.uint8))


def ingest_clip(
    clip: ClipRecord,
    frames_dir: Optional[Path],
    border_frame_index: int = 0,
    black_threshold: int = DEFAULT_BLACK_THRESHOLD,
    row_fraction: float = DEFAULT_ROW_FRACTION,
    max_border_fraction: float = DEFAULT_MAX_BORDER_FRACTION,
) -> tuple[Optional[ClipRecord], Optional[str]]:
    """Run the border filter for one clip.

    Returns (kept record with updated quality flags, None) or (None, drop
    reason). A missing frame file or a frame whose dimensions disagree with
    the manifest yields an unchecked pass-through.
    """
    report = None
    if frames_dir is not None:
        path = frame_path(frames_dir, clip.clip_id, border_frame_index)
        if path.is_file():
            frame = read_frame(path)
            if (frame.width, frame.height) != (clip.width, clip.height):
                logger.warning(
                    "clip %s: frame %s is %dx%d but manifest says %dx%d; skipping border check",
                    clip.clip_id, path.name, frame.width, frame.height,
                    clip.width, clip.height,
                )
            else:
                report = detect_black_borders(frame, black_threshold, row_fraction)
    decision = quality_filter(clip, report, max_border_fraction)
    if not decision.keep:
        return None, decision.reason
    if decision.checked:
        return clip.with_quality("black_border_checked"), None
    return clip, None
