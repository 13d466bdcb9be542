"""Large-scale retrieval bank: banded cosine queries with exact and
approximate paths.

The band carries both a lower bound (exclude unrelated identities) and an
upper bound (discard near-duplicates). `exact_scan` is the oracle; the
approximate path is a navigable-small-world graph built in canonical
(sorted subject_id) insertion order with unpruned friend lists, queried by
beam search. Every candidate the graph proposes is re-scored with the same
scalar routine the exact scan uses before the band is applied, so
query_band answers are a subset of the exact admissible set by
construction: the index proposes, the band disposes.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import jsonl
from .embed import KINDS, SOURCES, EmbeddingRecord

_MAGIC = b"XBNK"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}
_SOURCE_CODE = {s: i for i, s in enumerate(SOURCES)}

_MODE_UNBUILT = 0
_MODE_GRAPH = 1
_MODE_EXACT_FALLBACK = 2

# Below this record count the "approximate" path is an exact scan; a graph
# buys nothing at desk scale.
DEFAULT_APPROX_THRESHOLD = 50_000
DEFAULT_GRAPH_DEGREE = 16
DEFAULT_EF_BUILD = 64
DEFAULT_EF_SEARCH = 512

# Safety margin when prefiltering with batched BLAS sims before the exact
# scalar re-score; covers summation-order drift between kernel shapes.
_PREFILTER_MARGIN = 1e-9


class BankError(Exception):
    pass


class DuplicateIdError(BankError):
    pass


class BankFormatError(BankError):
    pass


@dataclass(frozen=True)
class BandQuery:
    """Similarity band [lower, upper] (inclusive) around a query vector."""

    vector: np.ndarray
    lower: float
    upper: float
    k: int
    exclude_clip: Optional[str] = None
    exclude_video: Optional[str] = None

    def __post_init__(self) -> None:
        if not -1.0 <= self.lower < self.upper <= 1.0:
            raise ValueError(
                f"band must satisfy -1 <= lower < upper <= 1, got [{self.lower}, {self.upper}]"
            )
        if self.k < 1:
            raise ValueError("k must be >= 1")
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float64))


@dataclass(frozen=True)
class Candidate:
    subject_id: str
    similarity: float
    source: str
    video_id: Optional[str] = None
    clip_id: Optional[str] = None


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; raises on zero-norm input."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-norm vector has no direction")
    # cosine's codomain is [-1, 1]; excursions are rounding error
    return min(1.0, max(-1.0, float(np.dot(a, b) / (na * nb))))


class Bank:
    """One kind's embedding collection; many readers or one writer."""

    def __init__(self, kind: str, dim: int) -> None:
        if kind not in KINDS:
            raise ValueError(f"unknown kind {kind!r}")
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.kind = kind
        self.dim = dim
        self._ids: list[str] = []
        self._sources: list[str] = []
        self._video_ids: list[Optional[str]] = []
        self._clip_ids: list[Optional[str]] = []
        self._vectors: list[np.ndarray] = []
        self._by_id: dict[str, int] = {}
        self._mode = _MODE_UNBUILT
        self._matrix: Optional[np.ndarray] = None
        self._norms: Optional[np.ndarray] = None
        self._adjacency: list[list[int]] = []
        self._graph_degree = DEFAULT_GRAPH_DEGREE
        self._ef_build = DEFAULT_EF_BUILD

    def __len__(self) -> int:
        return len(self._ids)

    def register(self, record: EmbeddingRecord) -> None:
        if record.kind != self.kind:
            raise BankError(f"kind {record.kind} cannot register into {self.kind} bank")
        if record.dim != self.dim:
            raise BankError(f"dim {record.dim} != bank dim {self.dim}")
        if record.subject_id in self._by_id:
            raise DuplicateIdError(record.subject_id)
        self._by_id[record.subject_id] = len(self._ids)
        self._ids.append(record.subject_id)
        self._sources.append(record.source)
        self._video_ids.append(record.video_id)
        self._clip_ids.append(record.clip_id)
        self._vectors.append(np.asarray(record.vector, dtype=np.float32))
        self._mode = _MODE_UNBUILT
        self._matrix = None

    # -- canonical layout ---------------------------------------------------

    def _canonicalize(self) -> None:
        """Sort records by subject_id so results and graphs are independent
        of registration order."""
        order = sorted(range(len(self._ids)), key=lambda i: self._ids[i])
        if order == list(range(len(self._ids))):
            return
        self._ids = [self._ids[i] for i in order]
        self._sources = [self._sources[i] for i in order]
        self._video_ids = [self._video_ids[i] for i in order]
        self._clip_ids = [self._clip_ids[i] for i in order]
        self._vectors = [self._vectors[i] for i in order]
        self._by_id = {sid: i for i, sid in enumerate(self._ids)}

    def _ensure_matrix(self) -> None:
        if self._matrix is None:
            self._canonicalize()
            if self._vectors:
                self._matrix = np.stack(self._vectors).astype(np.float64)
                self._norms = np.linalg.norm(self._matrix, axis=1)
            else:
                self._matrix = np.zeros((0, self.dim), dtype=np.float64)
                self._norms = np.zeros(0, dtype=np.float64)

    def _pair_sim(self, index: int, qvec: np.ndarray, qnorm: float) -> float:
        """Scalar cosine clamped to [-1, 1]; the single scoring routine both
        query paths share."""
        sim = float(np.dot(self._matrix[index], qvec) / (self._norms[index] * qnorm))
        return min(1.0, max(-1.0, sim))

    def _admit(self, index: int, query: BandQuery, qvec: np.ndarray, qnorm: float) -> Optional[Candidate]:
        if query.exclude_clip is not None and self._clip_ids[index] == query.exclude_clip:
            return None
        if query.exclude_video is not None and self._video_ids[index] == query.exclude_video:
            return None
        sim = self._pair_sim(index, qvec, qnorm)
        if not (query.lower <= sim <= query.upper):
            return None
        return Candidate(
            subject_id=self._ids[index],
            similarity=sim,
            source=self._sources[index],
            video_id=self._video_ids[index],
            clip_id=self._clip_ids[index],
        )

    @staticmethod
    def _rank(cands: list[Candidate], k: int) -> list[Candidate]:
        cands.sort(key=lambda c: (-c.similarity, c.subject_id))
        return cands[:k]

    # -- exact path -----------------------------------------------------------

    def exact_scan(self, query: BandQuery) -> list[Candidate]:
        """All records with lower <= cosine <= upper, minus exclusions,
        sorted by similarity descending (ties by subject_id), top-k."""
        self._ensure_matrix()
        if query.vector.shape[0] != self.dim:
            raise BankError(f"query dim {query.vector.shape[0]} != bank dim {self.dim}")
        if len(self._ids) == 0:
            return []
        qnorm = float(np.linalg.norm(query.vector))
        if qnorm == 0.0:
            raise BankError("zero-norm query vector")
        sims = (self._matrix @ query.vector) / (self._norms * qnorm)
        near = np.nonzero(
            (sims >= query.lower - _PREFILTER_MARGIN)
            & (sims <= query.upper + _PREFILTER_MARGIN)
        )[0]
        out = []
        for index in near:
            cand = self._admit(int(index), query, query.vector, qnorm)
            if cand is not None:
                out.append(cand)
        return self._rank(out, query.k)

    # -- graph index ----------------------------------------------------------

    def build_index(
        self,
        graph_degree: int = DEFAULT_GRAPH_DEGREE,
        ef_build: int = DEFAULT_EF_BUILD,
        approx_threshold: int = DEFAULT_APPROX_THRESHOLD,
    ) -> None:
        """Build the query index; banks below `approx_threshold` records use
        the exact scan directly."""
        self._ensure_matrix()
        self._graph_degree = graph_degree
        self._ef_build = ef_build
        if len(self._ids) < approx_threshold:
            self._mode = _MODE_EXACT_FALLBACK
            self._adjacency = []
            return
        self._adjacency = [[] for _ in range(len(self._ids))]
        for node in range(1, len(self._ids)):
            qvec = self._matrix[node]
            qnorm = float(self._norms[node])
            scored = self._beam_search(qvec, qnorm, ef_build, size=node)
            nearest = heapq.nlargest(
                graph_degree, ((sim, -peer) for peer, sim in scored.items())
            )
            for sim, neg_peer in nearest:
                peer = -neg_peer
                self._adjacency[node].append(peer)
                self._adjacency[peer].append(node)
        self._adjacency = [sorted(set(nbrs)) for nbrs in self._adjacency]
        self._mode = _MODE_GRAPH

    @staticmethod
    def _entries(size: int) -> list[int]:
        if size <= 0:
            return []
        picks = {0, size // 4, size // 2, (3 * size) // 4}
        return sorted(p for p in picks if p < size)

    def _score_batch(self, indices: list[int], qvec: np.ndarray, qnorm: float) -> np.ndarray:
        sims = (self._matrix[indices] @ qvec) / (self._norms[indices] * qnorm)
        return np.clip(sims, -1.0, 1.0)

    def _beam_search(
        self, qvec: np.ndarray, qnorm: float, ef: int, size: Optional[int] = None
    ) -> dict[int, float]:
        """Greedy ef-bounded expansion; returns every node scored en route.

        Traversal similarities are batched for speed and only steer which
        nodes get scanned; band admission re-scores each candidate with the
        shared scalar routine.
        """
        if size is None:
            size = len(self._ids)
        scored: dict[int, float] = {}
        frontier: list[tuple[float, int]] = []  # (-sim, node)
        best: list[tuple[float, int]] = []  # min-heap of top ef (sim, node)

        def admit_nodes(nodes: list[int]) -> None:
            sims = self._score_batch(nodes, qvec, qnorm)
            for node, sim in zip(nodes, sims):
                sim = float(sim)
                scored[node] = sim
                heapq.heappush(frontier, (-sim, node))
                heapq.heappush(best, (sim, node))
                if len(best) > ef:
                    heapq.heappop(best)

        seeds = self._entries(size)
        if not seeds:
            return scored
        admit_nodes(seeds)
        expanded: set[int] = set()
        while frontier:
            neg_sim, node = heapq.heappop(frontier)
            if len(best) >= ef and -neg_sim < best[0][0]:
                break
            if node in expanded:
                continue
            expanded.add(node)
            if node >= len(self._adjacency):
                continue
            fresh = [p for p in self._adjacency[node] if p < size and p not in scored]
            if fresh:
                admit_nodes(fresh)
        return scored

    def query_band(self, query: BandQuery, ef_search: int = DEFAULT_EF_SEARCH) -> list[Candidate]:
        """Banded query via the built index; subset of exact_scan's answers."""
        if self._mode == _MODE_UNBUILT:
            raise BankError("index not built; call build_index() first")
        if self._mode == _MODE_EXACT_FALLBACK:
            return self.exact_scan(query)
        self._ensure_matrix()
        if query.vector.shape[0] != self.dim:
            raise BankError(f"query dim {query.vector.shape[0]} != bank dim {self.dim}")
        if len(self._ids) == 0:
            return []
        qnorm = float(np.linalg.norm(query.vector))
        if qnorm == 0.0:
            raise BankError("zero-norm query vector")
        scored = self._beam_search(query.vector, qnorm, ef_search)
        out = []
        for index in scored:
            cand = self._admit(index, query, query.vector, qnorm)
            if cand is not None:
                out.append(cand)
        return self._rank(out, query.k)

    # -- persistence ------------------------------------------------------------

    def persist(self, path: Path) -> None:
        self._ensure_matrix()
        chunks = [
            _HEADER.pack(
                _MAGIC, _VERSION, _KIND_CODE[self.kind], self.dim,
                len(self._ids), self._mode,
            )
        ]
        for i, sid in enumerate(self._ids):
            sid_b = sid.encode("utf-8")
            chunks.append(struct.pack("<I", len(sid_b)))
            chunks.append(sid_b)
            chunks.append(struct.pack("<B", _SOURCE_CODE[self._sources[i]]))
            for value in (self._video_ids[i], self._clip_ids[i]):
                if value is None:
                    chunks.append(struct.pack("<B", 0))
                else:
                    vb = value.encode("utf-8")
                    chunks.append(struct.pack("<BI", 1, len(vb)))
                    chunks.append(vb)
            chunks.append(np.asarray(self._vectors[i], dtype="<f4").tobytes())
        if self._mode == _MODE_GRAPH:
            for nbrs in self._adjacency:
                chunks.append(struct.pack("<I", len(nbrs)))
                chunks.append(np.asarray(nbrs, dtype="<u4").tobytes())
        jsonl.write_atomic_bytes(Path(path), b"".join(chunks))

    @classmethod
    def load(cls, path: Path) -> "Bank":
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise BankFormatError(f"{path}: truncated header")
        magic, version, kind_code, dim, count, mode = _HEADER.unpack_from(data, 0)
        if magic != _MAGIC:
            raise BankFormatError(f"{path}: bad magic {magic!r}")
        if version != _VERSION:
            raise BankFormatError(f"{path}: unsupported version {version}")
        bank = cls(KINDS[kind_code], dim)
        offset = _HEADER.size

        def take(n: int) -> bytes:
            nonlocal offset
            if offset + n > len(data):
                raise BankFormatError(f"{path}: truncated at offset {offset}")
            piece = data[offset : offset + n]
            offset += n
            return piece

        for _ in range(count):
            (id_len,) = struct.unpack("<I", take(4))
            sid = take(id_len).decode("utf-8")
            (source_code,) = struct.unpack("<B", take(1))
            optional: list[Optional[str]] = []
            for _f in range(2):
                (flag,) = struct.unpack("<B", take(1))
                if flag:
                    (vlen,) = struct.unpack("<I", take(4))
                    optional.append(take(vlen).decode("utf-8"))
                else:
                    optional.append(None)
            vector = np.frombuffer(take(4 * dim), dtype="<f4").copy()
            index = len(bank._ids)
            bank._by_id[sid] = index
            bank._ids.append(sid)
            bank._sources.append(SOURCES[source_code])
            bank._video_ids.append(optional[0])
            bank._clip_ids.append(optional[1])
            bank._vectors.append(vector)
        if mode == _MODE_GRAPH:
            adjacency = []
            for _ in range(count):
                (deg,) = struct.unpack("<I", take(4))
                nbrs = np.frombuffer(take(4 * deg), dtype="<u4")
                adjacency.append([int(x) for x in nbrs])
            bank._adjacency = adjacency
        if offset != len(data):
            raise BankFormatError(f"{path}: {len(data) - offset} trailing bytes")
        bank._mode = mode
        return bank


def bank_from_records(kind: str, dim: int, records: list[EmbeddingRecord]) -> Bank:
    bank = Bank(kind, dim)
    for rec in records:
        bank.register(rec)
    return bank
