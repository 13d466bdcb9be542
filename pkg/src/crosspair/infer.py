"""Wire protocol shared by every model-backed call in the pipeline.

One client speaks to five model roles (keyword extraction, grounding,
recheck, embedding, pair verification) through the same JSON-over-HTTP
endpoint set, so mocks, the real-model adapter, and future models are
interchangeable behind a URL. See protocol.md for the endpoint contract.

Retries apply to transport failures only; a semantically invalid response
is raised immediately as MalformedResponse so determinism violations are
never papered over by a retry.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Optional, Protocol

import jsonschema
import requests

PROTOCOL_VERSION = 1

HANDSHAKE = "/v1/handshake"
KEYWORDS = "/v1/keywords"
GROUND = "/v1/ground"
RECHECK = "/v1/recheck"
EMBED = "/v1/embed"
VERIFY_PAIR = "/v1/verify_pair"

ENDPOINTS = (HANDSHAKE, KEYWORDS, GROUND, RECHECK, EMBED, VERIFY_PAIR)

_CATEGORY_ENUM = ["human", "animal", "product", "other"]

_FRAME_REF = {
    "type": "object",
    "required": ["clip_id", "frame_index"],
    "properties": {
        "clip_id": {"type": "string", "minLength": 1},
        "frame_index": {"type": "integer", "minimum": 0},
    },
    "additionalProperties": False,
}

_BBOX = {
    "type": "array",
    "items": {"type": "number"},
    "minItems": 4,
    "maxItems": 4,
}

# A crop is referenced by location, never inlined: video crops by
# (clip_id, frame_index, bbox) against the shared frame store, external
# corpus images by image_id. The optional phrase rides along for backends
# that key per-subject state off it (the deterministic mock); pixel-backed
# adapters ignore it.
_VIDEO_CROP_REF = {
    "type": "object",
    "required": ["clip_id", "frame_index", "bbox"],
    "properties": {
        "clip_id": {"type": "string", "minLength": 1},
        "frame_index": {"type": "integer", "minimum": 0},
        "bbox": _BBOX,
        "phrase": {"type": "string"},
    },
    "additionalProperties": False,
}

_EXTERNAL_CROP_REF = {
    "type": "object",
    "required": ["image_id"],
    "properties": {"image_id": {"type": "string", "minLength": 1}},
    "additionalProperties": False,
}

_CROP_REF = {"oneOf": [_VIDEO_CROP_REF, _EXTERNAL_CROP_REF]}

_SCHEMA_VERSION = {"type": "integer", "enum": [PROTOCOL_VERSION]}

SCHEMAS: dict[str, dict[str, dict]] = {
    HANDSHAKE: {
        "request": {
            "type": "object",
            "required": ["schema_version"],
            "properties": {"schema_version": _SCHEMA_VERSION},
            "additionalProperties": False,
        },
        "response": {
            "type": "object",
            "required": ["version", "dims"],
            "properties": {
                "version": {"type": "integer"},
                "dims": {
                    "type": "object",
                    "required": ["face", "general"],
                    "properties": {
                        "face": {"type": "integer", "minimum": 1},
                        "general": {"type": "integer", "minimum": 1},
                    },
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
    },
    KEYWORDS: {
        "request": {
            "type": "object",
            "required": ["schema_version", "caption"],
            "properties": {
                "schema_version": _SCHEMA_VERSION,
                "caption": {"type": "string"},
            },
            "additionalProperties": False,
        },
        "response": {
            "type": "object",
            "required": ["phrases"],
            "properties": {
                "phrases": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["text", "category"],
                        "properties": {
                            "text": {"type": "string", "minLength": 1},
                            "category": {"type": "string", "enum": _CATEGORY_ENUM},
                        },
                        "additionalProperties": False,
                    },
                }
            },
            "additionalProperties": False,
        },
    },
    GROUND: {
        "request": {
            "type": "object",
            "required": ["schema_version", "phrase", "frame_ref"],
            "properties": {
                "schema_version": _SCHEMA_VERSION,
                "phrase": {"type": "string", "minLength": 1},
                "frame_ref": _FRAME_REF,
            },
            "additionalProperties": False,
        },
        "response": {
            "type": "object",
            "required": ["boxes"],
            "properties": {"boxes": {"type": "array", "items": _BBOX}},
            "additionalProperties": False,
        },
    },
    RECHECK: {
        "request": {
            "type": "object",
            "required": ["schema_version", "phrase", "frame_ref", "bbox"],
            "properties": {
                "schema_version": _SCHEMA_VERSION,
                "phrase": {"type": "string", "minLength": 1},
                "frame_ref": _FRAME_REF,
                "bbox": _BBOX,
            },
            "additionalProperties": False,
        },
        "response": {
            "type": "object",
            "required": ["completeness", "specificity", "matching"],
            "properties": {
                "completeness": {"type": "boolean"},
                "specificity": {"type": "boolean"},
                "matching": {"type": "boolean"},
                "logo_visible": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
    },
    EMBED: {
        "request": {
            "type": "object",
            "required": ["schema_version", "kind", "crop_ref"],
            "properties": {
                "schema_version": _SCHEMA_VERSION,
                "kind": {"type": "string", "enum": ["face", "general"]},
                "crop_ref": _CROP_REF,
            },
            "additionalProperties": False,
        },
        "response": {
            "type": "object",
            "required": ["vector"],
            "properties": {
                "vector": {"type": "array", "items": {"type": "number"}, "minItems": 1}
            },
            "additionalProperties": False,
        },
    },
    VERIFY_PAIR: {
        "request": {
            "type": "object",
            "required": ["schema_version", "a_ref", "b_ref", "category"],
            "properties": {
                "schema_version": _SCHEMA_VERSION,
                "a_ref": _CROP_REF,
                "b_ref": _CROP_REF,
                "category": {"type": "string", "enum": _CATEGORY_ENUM},
            },
            "additionalProperties": False,
        },
        "response": {
            "type": "object",
            "required": ["identity_consistent", "context_diverse"],
            "properties": {
                "identity_consistent": {"type": "boolean"},
                "context_diverse": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
    },
}

ERROR_BODY_SCHEMA = {
    "type": "object",
    "required": ["error"],
    "properties": {
        "error": {
            "type": "object",
            "required": ["code", "message"],
            "properties": {
                "code": {"type": "string", "minLength": 1},
                "message": {"type": "string"},
            },
            "additionalProperties": False,
        }
    },
    "additionalProperties": False,
}


class InferenceError(Exception):
    """Base for all protocol-level failures."""


class TransportError(InferenceError):
    """Timeout, connection failure, or 5xx; eligible for retry."""


class MalformedResponse(InferenceError):
    """Response violates the endpoint schema; never retried."""


class VersionMismatch(InferenceError):
    """Backend speaks a different protocol version."""


class BackendRejection(InferenceError):
    """Semantic error body returned by the backend; never retried."""

    def __init__(self, code: str, message: str = "") -> None:
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.detail = message


class NoFaceError(BackendRejection):
    """The backend found no face in the referenced crop."""


def rejection_from_body(body: dict) -> BackendRejection:
    err = body.get("error") or {}
    code = str(err.get("code", "unknown"))
    message = str(err.get("message", ""))
    if code == "no_face":
        return NoFaceError(code, message)
    return BackendRejection(code, message)


def validate_payload(endpoint: str, payload: dict, side: str) -> None:
    """Raise MalformedResponse if payload violates the endpoint schema."""
    try:
        schema = SCHEMAS[endpoint][side]
    except KeyError:
        raise MalformedResponse(f"unknown endpoint {endpoint}") from None
    try:
        jsonschema.validate(payload, schema)
    except jsonschema.ValidationError as exc:
        raise MalformedResponse(f"{endpoint} {side}: {exc.message}") from None


class Transport(Protocol):
    def send(self, endpoint: str, payload: dict) -> dict:
        """Deliver one request; raise TransportError / BackendRejection."""
        ...


class InProcessTransport:
    """Calls a backend object directly; used for desk-scale runs and tests."""

    def __init__(self, backend: Any) -> None:
        self._backend = backend

    def send(self, endpoint: str, payload: dict) -> dict:
        return self._backend.handle(endpoint, payload)


class HttpTransport:
    """JSON POST transport over requests with a per-call timeout."""

    def __init__(self, base_url: str, timeout_s: float = 30.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self._session = requests.Session()

    def send(self, endpoint: str, payload: dict) -> dict:
        url = self.base_url + endpoint
        try:
            resp = self._session.post(url, json=payload, timeout=self.timeout_s)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TransportError(f"POST {url}: {exc}") from exc
        if resp.status_code >= 500:
            raise TransportError(f"POST {url}: HTTP {resp.status_code}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise MalformedResponse(f"POST {url}: non-JSON body") from exc
        if resp.status_code >= 400:
            raise rejection_from_body(body)
        return body


@dataclass(frozen=True)
class Handshake:
    version: int
    dim_face: int
    dim_general: int

    @property
    def dim_person(self) -> int:
        return self.dim_general + self.dim_face


class InferenceClient:
    """Retrying, concurrency-bounded client over a Transport.

    The handshake must succeed before any other call; declared embedding
    dimensions are fixed for the run. At most `max_in_flight` requests are
    outstanding at once across all threads sharing this client.
    """

    def __init__(
        self,
        transport: Transport,
        max_in_flight: int = 8,
        retry_attempts: int = 3,
        retry_backoff_s: float = 0.05,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if retry_attempts < 1:
            raise ValueError("retry_attempts must be >= 1")
        self._transport = transport
        self._gate = threading.BoundedSemaphore(max_in_flight)
        self._retry_attempts = retry_attempts
        self._retry_backoff_s = retry_backoff_s
        self._sleep = sleep
        self._handshake: Optional[Handshake] = None

    @property
    def dims(self) -> Handshake:
        if self._handshake is None:
            raise InferenceError("handshake not performed")
        return self._handshake

    def handshake(self) -> Handshake:
        body = self._call_raw(HANDSHAKE, {"schema_version": PROTOCOL_VERSION})
        if body["version"] != PROTOCOL_VERSION:
            raise VersionMismatch(
                f"backend protocol version {body['version']}, expected {PROTOCOL_VERSION}"
            )
        self._handshake = Handshake(
            version=body["version"],
            dim_face=body["dims"]["face"],
            dim_general=body["dims"]["general"],
        )
        return self._handshake

    def call(self, endpoint: str, payload: dict) -> dict:
        if self._handshake is None:
            raise InferenceError("handshake required before calls")
        return self._call_raw(endpoint, payload)

    def _call_raw(self, endpoint: str, payload: dict) -> dict:
        last: Optional[TransportError] = None
        for attempt in range(1, self._retry_attempts + 1):
            try:
                with self._gate:
                    body = self._transport.send(endpoint, payload)
                validate_payload(endpoint, body, "response")
                return body
            except TransportError as exc:
                last = exc
                if attempt < self._retry_attempts:
                    self._sleep(self._retry_backoff_s * (2 ** (attempt - 1)))
        assert last is not None
        raise last

    # Convenience wrappers building schema-versioned payloads.

    def keywords(self, caption: str) -> list[dict]:
        body = self.call(KEYWORDS, {"schema_version": PROTOCOL_VERSION, "caption": caption})
        return body["phrases"]

    def ground(self, phrase: str, clip_id: str, frame_index: int) -> list[list[float]]:
        body = self.call(
            GROUND,
            {
                "schema_version": PROTOCOL_VERSION,
                "phrase": phrase,
                "frame_ref": {"clip_id": clip_id, "frame_index": frame_index},
            },
        )
        return body["boxes"]

    def recheck(self, phrase: str, clip_id: str, frame_index: int, bbox: list[int]) -> dict:
        return self.call(
            RECHECK,
            {
                "schema_version": PROTOCOL_VERSION,
                "phrase": phrase,
                "frame_ref": {"clip_id": clip_id, "frame_index": frame_index},
                "bbox": list(bbox),
            },
        )

    def embed(self, kind: str, crop_ref: dict) -> list[float]:
        body = self.call(
            EMBED,
            {"schema_version": PROTOCOL_VERSION, "kind": kind, "crop_ref": crop_ref},
        )
        return body["vector"]

    def verify_pair(self, a_ref: dict, b_ref: dict, category: str) -> dict:
        return self.call(
            VERIFY_PAIR,
            {
                "schema_version": PROTOCOL_VERSION,
                "a_ref": a_ref,
                "b_ref": b_ref,
                "category": category,
            },
        )
