"""FastAPI service exposing the crosspair inference protocol over /v1/*.

Request and response bodies are validated against the vendored protocol
schemas (kept in sync with the repo-level contract by a test). Every error
leaves as HTTP 400 with the protocol's {"error": {code, message}} body so
clients never see framework-specific error shapes.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import jsonschema
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .config import AdapterConfig
from .engines import NoFace, build_engines

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
_SCHEMAS = json.loads(
    (Path(__file__).parent / "protocol_schemas.json").read_text(encoding="utf-8")
)


class ProtocolError(Exception):
    def __init__(self, code: str, message: str = "") -> None:
        super().__init__(message)
        self.code = code
        self.message = message


def _error_response(code: str, message: str, status: int = 400) -> JSONResponse:
    return JSONResponse(
        status_code=status, content={"error": {"code": code, "message": message}}
    )


def _validate(endpoint: str, payload: dict, side: str) -> None:
    schema = _SCHEMAS["endpoints"].get(endpoint, {}).get(side)
    if schema is None:
        raise ProtocolError("unknown_endpoint", endpoint)
    try:
        jsonschema.validate(payload, schema)
    except jsonschema.ValidationError as exc:
        raise ProtocolError("bad_request", f"{endpoint}: {exc.message}") from None


def create_app(config: AdapterConfig) -> FastAPI:
    """Build the service; engine construction happens here, so a missing
    model artifact fails before the port ever binds."""
    engines = build_engines(config)
    app = FastAPI(title="crosspair-adapter", docs_url=None, redoc_url=None)

    dims = {
        "face": getattr(engines["embed_face"], "dim", config.dims["face"]),
        "general": getattr(engines["embed_general"], "dim", config.dims["general"]),
    }

    async def _read_payload(request: Request) -> dict:
        try:
            payload = json.loads(await request.body())
        except json.JSONDecodeError:
            raise ProtocolError("bad_request", "invalid JSON body") from None
        if not isinstance(payload, dict):
            raise ProtocolError("bad_request", "body must be a JSON object")
        return payload

    def _handle(endpoint: str, payload: dict) -> dict:
        _validate(endpoint, payload, "request")
        if endpoint == "/v1/handshake":
            return {"version": PROTOCOL_VERSION, "dims": dims}
        if endpoint == "/v1/keywords":
            return {"phrases": engines["keywords"].extract(payload["caption"])}
        if endpoint == "/v1/ground":
            ref = payload["frame_ref"]
            boxes = engines["ground"].ground(
                payload["phrase"], ref["clip_id"], ref["frame_index"]
            )
            return {"boxes": [[int(v) for v in box] for box in boxes]}
        if endpoint == "/v1/recheck":
            ref = payload["frame_ref"]
            return engines["recheck"].recheck(
                payload["phrase"], ref["clip_id"], ref["frame_index"],
                [int(v) for v in payload["bbox"]],
            )
        if endpoint == "/v1/embed":
            engine = engines["embed_face" if payload["kind"] == "face" else "embed_general"]
            try:
                return {"vector": engine.embed(payload["crop_ref"])}
            except NoFace as exc:
                raise ProtocolError("no_face", str(exc)) from None
        if endpoint == "/v1/verify_pair":
            return engines["verify_pair"].verify(
                payload["a_ref"], payload["b_ref"], payload["category"]
            )
        raise ProtocolError("unknown_endpoint", endpoint)

    @app.post("/v1/{rest:path}")
    async def v1(rest: str, request: Request):  # noqa: ANN202
        endpoint = f"/v1/{rest}"
        try:
            payload = await _read_payload(request)
            response = _handle(endpoint, payload)
        except ProtocolError as exc:
            return _error_response(exc.code, exc.message)
        except Exception as exc:  # noqa: BLE001 - protocol-level error body
            logger.exception("endpoint %s failed", endpoint)
            return _error_response("internal", str(exc), status=500)
        _validate(endpoint, response, "response")
        return JSONResponse(content=response)

    return app
