"""Deterministic mock backend implementing every protocol endpoint.

Responses are pure functions of the planted facts file plus the request, so
full pipeline runs over the same fixture are byte-identical. Identity and
context tokens are mapped onto orthonormal basis coordinates; embedding
vectors are built from them:

    vector = basis(embed_token)                       when no jitter planted
    vector = (basis(embed_token) + s * basis(jitter)) / sqrt(1 + s^2)

so planted cosines are exact: same embed token and jitter -> 1.0; same
embed token, different jitter -> 1/(1+s^2) (0.8 at the default s=0.5);
different embed tokens -> at most s^2/(1+s^2) = 0.2, comfortably below the
0.3 inter-identity ceiling. Unplanted crops fall back to digest-seeded unit
vectors (near-orthogonal to everything at the default dimensions).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

import numpy as np

from . import infer
from .infer import BackendRejection, NoFaceError, TransportError, validate_payload

logger = logging.getLogger(__name__)

DEFAULT_DIMS = {"face": 512, "general": 512}
DEFAULT_JITTER_SCALE = 0.5


def _subject_key(clip_id: str, phrase: str) -> str:
    return f"{clip_id}::{phrase}"


def _box_key(clip_id: str, frame_index: int, phrase: str) -> str:
    return f"{clip_id}::{frame_index}::{phrase}"


class MockFacts:
    """Planted facts: vocabulary, per-subject tokens, boxes, verdicts."""

    def __init__(self, data: dict) -> None:
        self.seed = int(data.get("seed", 0))
        dims = dict(DEFAULT_DIMS)
        dims.update(data.get("dims", {}))
        self.dim_face = int(dims["face"])
        self.dim_general = int(dims["general"])
        self.jitter_scale = float(data.get("jitter_scale", DEFAULT_JITTER_SCALE))
        self.vocabulary: dict[str, str] = dict(data.get("vocabulary", {}))
        self.clips: dict[str, dict] = dict(data.get("clips", {}))
        self.subjects: dict[str, dict] = dict(data.get("subjects", {}))
        self.external_images: dict[str, dict] = dict(data.get("external_images", {}))
        self.boxes: dict[str, list] = dict(data.get("boxes", {}))
        for cat in self.vocabulary.values():
            if cat not in infer._CATEGORY_ENUM:
                raise ValueError(f"vocabulary category {cat!r} unknown")

    @classmethod
    def from_file(cls, path: Path) -> "MockFacts":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    def entity(self, ref: dict) -> Optional[dict]:
        """Resolve a crop/subject ref to its planted entity facts, or None."""
        if "image_id" in ref:
            return self.external_images.get(ref["image_id"])
        phrase = ref.get("phrase")
        if phrase is None:
            return None
        return self.subjects.get(_subject_key(ref["clip_id"], phrase))

    def entity_context(self, ref: dict) -> Optional[str]:
        ent = self.entity(ref)
        if ent is None:
            return None
        if "context" in ent:
            return ent["context"]
        if "image_id" in ref:
            return None
        clip = self.clips.get(ref["clip_id"], {})
        return clip.get("context")


class MockBackend:
    """Implements every endpoint deterministically from a MockFacts instance.

    Thread-safe; tracks a concurrent-request high-water mark so tests can
    assert the client's in-flight bound, and supports injecting transport
    faults per endpoint to exercise the retry contract.
    """

    def __init__(self, facts: MockFacts, latency_s: float = 0.0) -> None:
        self.facts = facts
        self.latency_s = latency_s
        self._lock = threading.Lock()
        self._in_flight = 0
        self.high_water = 0
        self.calls = 0
        self._faults: dict[str, int] = {}
        self._basis_face = self._assign_basis("face")
        self._basis_general = self._assign_basis("general")

    # -- token/basis plumbing --------------------------------------------

    def _assign_basis(self, space: str) -> dict[str, int]:
        tokens: set[str] = set()
        for ent in list(self.facts.subjects.values()) + list(
            self.facts.external_images.values()
        ):
            identity = ent.get("identity")
            embed = ent.get("embed", identity)
            if space == "face":
                primary = ent.get("face", embed)
            else:
                primary = embed
            if primary is not None:
                tokens.add(f"id:{primary}")
            jitter = ent.get("jitter")
            if jitter is not None:
                tokens.add(f"jx:{jitter}")
        dim = self.facts.dim_face if space == "face" else self.facts.dim_general
        ordered = sorted(tokens)
        if len(ordered) > dim:
            raise ValueError(
                f"{len(ordered)} planted tokens exceed {space} dimension {dim}"
            )
        return {tok: i for i, tok in enumerate(ordered)}

    def _entity_vector(self, space: str, ent: dict) -> np.ndarray:
        basis = self._basis_face if space == "face" else self._basis_general
        dim = self.facts.dim_face if space == "face" else self.facts.dim_general
        identity = ent.get("identity")
        embed = ent.get("embed", identity)
        primary = ent.get("face", embed) if space == "face" else embed
        vec = np.zeros(dim, dtype=np.float64)
        vec[basis[f"id:{primary}"]] = 1.0
        jitter = ent.get("jitter")
        if jitter is not None:
            s = self.facts.jitter_scale
            vec[basis[f"jx:{jitter}"]] += s
            vec /= math.sqrt(1.0 + s * s)
        return vec

    def _fallback_vector(self, space: str, key: str) -> np.ndarray:
        dim = self.facts.dim_face if space == "face" else self.facts.dim_general
        digest = hashlib.sha256(
            f"mockvec\x00{self.facts.seed}\x00{space}\x00{key}".encode("utf-8")
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = rng.standard_normal(dim)
        return vec / np.linalg.norm(vec)

    # -- request handling --------------------------------------------------

    def inject_transport_faults(self, endpoint: str, count: int) -> None:
        with self._lock:
            self._faults[endpoint] = self._faults.get(endpoint, 0) + count

    def handle(self, endpoint: str, payload: dict) -> dict:
        with self._lock:
            if self._faults.get(endpoint, 0) > 0:
                self._faults[endpoint] -= 1
                raise TransportError(f"injected fault on {endpoint}")
            self._in_flight += 1
            self.calls += 1
            self.high_water = max(self.high_water, self._in_flight)
        try:
            if self.latency_s:
                time.sleep(self.latency_s)
            return self._dispatch(endpoint, payload)
        finally:
            with self._lock:
                self._in_flight -= 1

    def _dispatch(self, endpoint: str, payload: dict) -> dict:
        if endpoint not in infer.SCHEMAS:
            raise BackendRejection("unknown_endpoint", endpoint)
        try:
            validate_payload(endpoint, payload, "request")
        except infer.MalformedResponse as exc:
            raise BackendRejection("bad_request", str(exc)) from None
        if endpoint == infer.HANDSHAKE:
            return {
                "version": infer.PROTOCOL_VERSION,
                "dims": {"face": self.facts.dim_face, "general": self.facts.dim_general},
            }
        if endpoint == infer.KEYWORDS:
            return self._keywords(payload["caption"])
        if endpoint == infer.GROUND:
            return self._ground(payload["phrase"], payload["frame_ref"])
        if endpoint == infer.RECHECK:
            return self._recheck(payload["phrase"], payload["frame_ref"])
        if endpoint == infer.EMBED:
            return self._embed(payload["kind"], payload["crop_ref"])
        if endpoint == infer.VERIFY_PAIR:
            return self._verify_pair(payload["a_ref"], payload["b_ref"])
        raise BackendRejection("unknown_endpoint", endpoint)

    def _keywords(self, caption: str) -> dict:
        text = caption.lower()
        found: list[tuple[int, str]] = []
        for phrase in self.facts.vocabulary:
            pos = _find_word(text, phrase.lower())
            if pos >= 0:
                found.append((pos, phrase))
        found.sort()
        return {
            "phrases": [
                {"text": phrase, "category": self.facts.vocabulary[phrase]}
                for _, phrase in found
            ]
        }

    def _ground(self, phrase: str, frame_ref: dict) -> dict:
        key = _box_key(frame_ref["clip_id"], frame_ref["frame_index"], phrase)
        boxes = self.facts.boxes.get(key, [])
        return {"boxes": [list(b) for b in boxes]}

    def _recheck(self, phrase: str, frame_ref: dict) -> dict:
        ent = self.facts.subjects.get(_subject_key(frame_ref["clip_id"], phrase), {})
        verdicts = ent.get("recheck", {})
        out = {
            "completeness": bool(verdicts.get("completeness", True)),
            "specificity": bool(verdicts.get("specificity", True)),
            "matching": bool(verdicts.get("matching", True)),
        }
        if self.facts.vocabulary.get(phrase) == "product":
            out["logo_visible"] = bool(ent.get("logo_visible", False))
        return out

    def _embed(self, kind: str, crop_ref: dict) -> dict:
        ent = self.facts.entity(crop_ref)
        if ent is not None:
            if kind == "face" and ent.get("no_face"):
                raise NoFaceError("no_face", "no face in referenced crop")
            vec = self._entity_vector(kind, ent)
        else:
            key = json.dumps(crop_ref, sort_keys=True)
            vec = self._fallback_vector(kind, key)
        return {"vector": [float(v) for v in vec]}

    def _verify_pair(self, a_ref: dict, b_ref: dict) -> dict:
        ent_a, ent_b = self.facts.entity(a_ref), self.facts.entity(b_ref)
        id_a = ent_a.get("identity") if ent_a else None
        id_b = ent_b.get("identity") if ent_b else None
        ctx_a = self.facts.entity_context(a_ref)
        ctx_b = self.facts.entity_context(b_ref)
        consistent = id_a is not None and id_a == id_b
        # Unknown context is not verifiably diverse; stay conservative.
        diverse = ctx_a is not None and ctx_b is not None and ctx_a != ctx_b
        return {"identity_consistent": consistent, "context_diverse": diverse}


def _find_word(text: str, phrase: str) -> int:
    """First word-boundary occurrence of phrase in text, or -1."""
    start = 0
    while True:
        pos = text.find(phrase, start)
        if pos < 0:
            return -1
        before_ok = pos == 0 or not text[pos - 1].isalnum()
        end = pos + len(phrase)
        after_ok = end == len(text) or not text[end].isalnum()
        if before_ok and after_ok:
            return pos
        start = pos + 1


class _MockHandler(BaseHTTPRequestHandler):
    backend: MockBackend  # injected by serve_mock

    def do_POST(self) -> None:  # noqa: N802 (BaseHTTPRequestHandler API)
        length = int(self.headers.get("Content-Length", "0"))
        raw = self.rfile.read(length)
        try:
            payload = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            self._reply(400, {"error": {"code": "bad_request", "message": "invalid JSON"}})
            return
        try:
            body = self.backend.handle(self.path, payload)
        except TransportError as exc:
            self._reply(503, {"error": {"code": "unavailable", "message": str(exc)}})
            return
        except BackendRejection as exc:
            self._reply(400, {"error": {"code": exc.code, "message": exc.detail}})
            return
        self._reply(200, body)

    def _reply(self, status: int, body: dict) -> None:
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, fmt: str, *args) -> None:
        logger.debug("mock-serve %s", fmt % args)


def serve_mock(facts: MockFacts, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Bind the mock backend to an HTTP port; caller drives serve_forever()."""
    backend = MockBackend(facts)
    handler = type("BoundMockHandler", (_MockHandler,), {"backend": backend})
    server = ThreadingHTTPServer((host, port), handler)
    server.mock_backend = backend  # type: ignore[attr-defined]
    return server
