"""Identity-preserving subject embeddings and their on-disk store.

Category dispatch: humans get a person vector (unit-norm general segment
concatenated with a unit-norm face segment, overall norm sqrt(2), never
renormalized so face and clothing contribute equally to cosine); animals,
products, and "other" take the general path; a human whose crop yields no
face downgrades to a general record with a recorded flag.

Store layout per kind: a binary vector file (little-endian header: magic,
version, kind, dim; then length-prefixed subject_id, source tag byte, and
dim float32 values per record) plus a line-delimited JSON sidecar carrying
human-readable metadata (clip/video ids, segment dims, downgrade flag).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import jsonl
from .core import SubjectInstance
from .infer import InferenceClient, MalformedResponse, NoFaceError

KINDS = ("face", "general", "person")
SOURCES = ("video_corpus", "external_images")

NORM_TOLERANCE = 1e-6

_MAGIC = b"XEMB"
_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}
_SOURCE_CODE = {s: i for i, s in enumerate(SOURCES)}


class StoreFormatError(Exception):
    pass


@dataclass(frozen=True)
class EmbeddingRecord:
    subject_id: str
    kind: str
    vector: np.ndarray
    source: str
    video_id: Optional[str] = None
    clip_id: Optional[str] = None
    dim_general: Optional[int] = None
    dim_face: Optional[int] = None
    downgraded: bool = False

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        vec = np.asarray(self.vector, dtype=np.float32)
        object.__setattr__(self, "vector", vec)
        validate_norm(self)


def validate_norm(record: EmbeddingRecord) -> None:
    """Enforce the norm contract: unit for face/general, sqrt(2) for person
    (unit per segment when the split is known)."""
    vec = np.asarray(record.vector, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if record.kind in ("face", "general"):
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise ValueError(f"{record.kind} vector norm {norm} != 1")
        return
    if abs(norm - math.sqrt(2.0)) > NORM_TOLERANCE:
        raise ValueError(f"person vector norm {norm} != sqrt(2)")
    if record.dim_general is not None and record.dim_face is not None:
        if record.dim_general + record.dim_face != record.dim:
            raise ValueError(
                f"person dim {record.dim} != general {record.dim_general} + face {record.dim_face}"
            )
        g = float(np.linalg.norm(vec[: record.dim_general]))
        f = float(np.linalg.norm(vec[record.dim_general :]))
        if abs(g - 1.0) > NORM_TOLERANCE or abs(f - 1.0) > NORM_TOLERANCE:
            raise ValueError(f"person segments not unit-norm: general {g}, face {f}")


def video_crop_ref(instance: SubjectInstance) -> dict:
    return {
        "clip_id": instance.clip_id,
        "frame_index": instance.frame_index,
        "bbox": list(instance.bbox.as_tuple()),
        "phrase": instance.phrase,
    }


def _fetch(kind: str, crop_ref: dict, client: InferenceClient) -> np.ndarray:
    expected = client.dims.dim_face if kind == "face" else client.dims.dim_general
    vector = np.asarray(client.embed(kind, crop_ref), dtype=np.float64)
    if vector.shape[0] != expected:
        raise MalformedResponse(
            f"{kind} embedding has dim {vector.shape[0]}, handshake declared {expected}"
        )
    norm = float(np.linalg.norm(vector))
    if abs(norm - 1.0) > NORM_TOLERANCE:
        raise MalformedResponse(f"{kind} embedding norm {norm} != 1")
    return vector


def embed_face(crop_ref: dict, client: InferenceClient) -> np.ndarray:
    return _fetch("face", crop_ref, client)


def embed_general(crop_ref: dict, client: InferenceClient) -> np.ndarray:
    return _fetch("general", crop_ref, client)


def embed_person(body_ref: dict, face_ref: dict, client: InferenceClient) -> np.ndarray:
    """Concatenate [general segment ; face segment]; segments stay unit-norm."""
    general = embed_general(body_ref, client)
    face = embed_face(face_ref, client)
    return np.concatenate([general, face])


def embed_subject(
    instance: SubjectInstance, client: InferenceClient, source: str = "video_corpus"
) -> EmbeddingRecord:
    """Dispatch by category; NoFace on a human downgrades to general."""
    ref = video_crop_ref(instance)
    common = dict(
        subject_id=instance.subject_id,
        source=source,
        video_id=instance.video_id,
        clip_id=instance.clip_id,
    )
    if instance.category == "human":
        try:
            vector = embed_person(ref, ref, client)
            return EmbeddingRecord(
                kind="person",
                vector=vector,
                dim_general=client.dims.dim_general,
                dim_face=client.dims.dim_face,
                **common,
            )
        except NoFaceError:
            return EmbeddingRecord(
                kind="general", vector=embed_general(ref, client),
                downgraded=True, **common,
            )
    return EmbeddingRecord(kind="general", vector=embed_general(ref, client), **common)


def embed_external_image(row: dict, client: InferenceClient) -> EmbeddingRecord:
    """Embed one external-corpus image record ({image_id, category, ...})."""
    image_id = row["image_id"]
    ref = {"image_id": image_id}
    common = dict(subject_id=image_id, source="external_images")
    if row.get("category") == "human":
        try:
            return EmbeddingRecord(
                kind="person",
                vector=embed_person(ref, ref, client),
                dim_general=client.dims.dim_general,
                dim_face=client.dims.dim_face,
                **common,
            )
        except NoFaceError:
            return EmbeddingRecord(
                kind="general", vector=embed_general(ref, client),
                downgraded=True, **common,
            )
    return EmbeddingRecord(kind="general", vector=embed_general(ref, client), **common)


# -- store I/O ---------------------------------------------------------------


def _meta_path(path: Path) -> Path:
    return Path(str(path) + ".meta.jsonl")


def write_store(path: Path, kind: str, dim: int, records: list[EmbeddingRecord]) -> None:
    """Write one kind's records (sorted by subject_id) plus the JSON sidecar."""
    records = sorted(records, key=lambda r: r.subject_id)
    chunks = [_HEADER.pack(_MAGIC, _VERSION, _KIND_CODE[kind], dim)]
    meta_rows = []
    for rec in records:
        if rec.kind != kind:
            raise ValueError(f"record kind {rec.kind} in {kind} store")
        if rec.dim != dim:
            raise ValueError(f"record dim {rec.dim} != store dim {dim}")
        sid = rec.subject_id.encode("utf-8")
        chunks.append(struct.pack("<I", len(sid)))
        chunks.append(sid)
        chunks.append(struct.pack("<B", _SOURCE_CODE[rec.source]))
        chunks.append(np.asarray(rec.vector, dtype="<f4").tobytes())
        row = {"subject_id": rec.subject_id, "kind": kind, "dim": dim, "source": rec.source}
        if rec.video_id is not None:
            row["video_id"] = rec.video_id
        if rec.clip_id is not None:
            row["clip_id"] = rec.clip_id
        if rec.dim_general is not None:
            row["dim_general"] = rec.dim_general
        if rec.dim_face is not None:
            row["dim_face"] = rec.dim_face
        if rec.downgraded:
            row["downgraded"] = True
        meta_rows.append(row)
    jsonl.write_atomic_bytes(Path(path), b"".join(chunks))
    jsonl.write_rows(_meta_path(path), meta_rows, sort_key=lambda r: r["subject_id"])


def read_store(path: Path) -> list[EmbeddingRecord]:
    """Load a store, joining sidecar metadata; rejects norm violations."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise StoreFormatError(f"{path}: truncated header")
    magic, version, kind_code, dim = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise StoreFormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    try:
        kind = KINDS[kind_code]
    except IndexError:
        raise StoreFormatError(f"{path}: bad kind code {kind_code}") from None

    meta = {row["subject_id"]: row for row in jsonl.read_rows(_meta_path(path))}
    records = []
    offset = _HEADER.size
    vec_bytes = 4 * dim
    while offset < len(data):
        if offset + 4 > len(data):
            raise StoreFormatError(f"{path}: truncated record length")
        (id_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + id_len + 1 + vec_bytes > len(data):
            raise StoreFormatError(f"{path}: truncated record")
        subject_id = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        source_code = data[offset]
        offset += 1
        vector = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
        offset += vec_bytes
        row = meta.get(subject_id, {})
        records.append(
            EmbeddingRecord(
                subject_id=subject_id,
                kind=kind,
                vector=vector,
                source=SOURCES[source_code],
                video_id=row.get("video_id"),
                clip_id=row.get("clip_id"),
                dim_general=row.get("dim_general"),
                dim_face=row.get("dim_face"),
                downgraded=bool(row.get("downgraded", False)),
            )
        )
    return records
