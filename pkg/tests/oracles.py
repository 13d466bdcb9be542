"""Independent reference implementations the fast paths are checked against.

Everything here is deliberately naive (double loops, scalar math, no numpy
batching) and stays independent of the code under test.
"""

from __future__ import annotations

import math


def box_area(box: tuple[int, int, int, int]) -> int:
    x0, y0, x1, y1 = box
    return (x1 - x0) * (y1 - y0)


def box_admissible_oracle(
    box: tuple[int, int, int, int],
    width: int,
    height: int,
    min_area_fraction: float,
    max_area_fraction: float,
    min_side_px: int,
) -> bool:
    x0, y0, x1, y1 = box
    fraction = box_area(box) / (width * height)
    return (
        min_area_fraction <= fraction <= max_area_fraction
        and (x1 - x0) >= min_side_px
        and (y1 - y0) >= min_side_px
    )


def iou_oracle(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    ix0 = max(a[0], b[0])
    iy0 = max(a[1], b[1])
    ix1 = min(a[2], b[2])
    iy1 = min(a[3], b[3])
    if ix1 <= ix0 or iy1 <= iy0:
        return 0.0
    inter = (ix1 - ix0) * (iy1 - iy0)
    return inter / (box_area(a) + box_area(b) - inter)


def suppress_oracle(
    boxes: list[tuple[int, int, int, int]], threshold: float
) -> list[tuple[int, int, int, int]]:
    """Greedy suppression in descending-area order, ties lexicographic."""
    order = sorted(boxes, key=lambda b: (-box_area(b), b))
    kept: list[tuple[int, int, int, int]] = []
    for box in order:
        ok = True
        for other in kept:
            if iou_oracle(box, other) > threshold:
                ok = False
                break
        if ok:
            kept.append(box)
    return kept


def cosine_oracle(a: list[float], b: list[float]) -> float:
    dot = 0.0
    na = 0.0
    nb = 0.0
    for x, y in zip(a, b):
        dot += x * y
        na += x * x
        nb += y * y
    return dot / math.sqrt(na * nb)


def band_scan_oracle(
    entries: list[tuple[str, list[float]]],
    query: list[float],
    lower: float,
    upper: float,
    k: int,
    exclude: set[str] = frozenset(),
) -> list[tuple[str, float]]:
    """Naive double-loop banded scan over (id, vector) entries."""
    hits = []
    for subject_id, vector in entries:
        if subject_id in exclude:
            continue
        sim = cosine_oracle(vector, query)
        if lower <= sim <= upper:
            hits.append((subject_id, sim))
    hits.sort(key=lambda item: (-item[1], item[0]))
    return hits[:k]
