"""Line-delimited JSON helpers with atomic, byte-stable writes.

Stage outputs are written sorted and via write-temp/fsync/rename so a crash
never leaves a partially visible file and reruns are byte-identical.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Callable, Iterable, Optional


def dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def read_rows(path: Path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def write_atomic_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.parent / f".tmp-{path.name}-{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_atomic_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.parent / f".tmp-{path.name}-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_rows(
    path: Path,
    rows: Iterable[dict],
    sort_key: Optional[Callable[[dict], Any]] = None,
) -> int:
    """Serialize rows (optionally sorted) and write atomically; returns row count."""
    rows = list(rows)
    if sort_key is not None:
        rows.sort(key=sort_key)
    text = "".join(dumps(r) + "\n" for r in rows)
    write_atomic_text(path, text)
    return len(rows)
