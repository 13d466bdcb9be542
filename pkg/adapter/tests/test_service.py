from __future__ import annotations

import struct

import numpy as np
import pytest
from fastapi.testclient import TestClient

from crosspair_adapter.config import AdapterConfig
from crosspair_adapter.engines import (
    EngineLoadError,
    StubGroundEngine,
    StubKeywordEngine,
    StubVerifyEngine,
    build_engines,
)
from crosspair_adapter.service import create_app


def write_frame(path, width, height, value=128):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", width, height))
        fh.write(bytes([value]) * (width * height))


@pytest.fixture()
def client(stub_config):
    return TestClient(create_app(stub_config))


class TestHandshake:
    def test_dims_consistent_with_embed_lengths(self, client):
        hs = client.post("/v1/handshake", json={"schema_version": 1}).json()
        assert hs["version"] == 1
        for kind in ("face", "general"):
            body = {
                "schema_version": 1,
                "kind": kind,
                "crop_ref": {"clip_id": "c1", "frame_index": 0,
                             "bbox": [0, 0, 200, 200], "phrase": "woman"},
            }
            vector = client.post("/v1/embed", json=body).json()["vector"]
            assert len(vector) == hs["dims"][kind]


class TestDeterminism:
    def test_identical_crop_identical_vector(self, client):
        body = {
            "schema_version": 1,
            "kind": "general",
            "crop_ref": {"clip_id": "c1", "frame_index": 4,
                         "bbox": [10, 10, 300, 300], "phrase": "dog"},
        }
        first = client.post("/v1/embed", json=body).json()["vector"]
        second = client.post("/v1/embed", json=body).json()["vector"]
        assert first == second

    def test_vectors_unit_norm(self, client):
        body = {
            "schema_version": 1,
            "kind": "general",
            "crop_ref": {"image_id": "img_1"},
        }
        vector = np.array(client.post("/v1/embed", json=body).json()["vector"])
        assert abs(np.linalg.norm(vector) - 1.0) < 1e-6

    def test_distinct_subjects_near_orthogonal(self, client):
        def vec(phrase):
            body = {
                "schema_version": 1, "kind": "general",
                "crop_ref": {"clip_id": "c1", "frame_index": 0,
                             "bbox": [0, 0, 128, 128], "phrase": phrase},
            }
            return np.array(client.post("/v1/embed", json=body).json()["vector"])

        assert abs(float(vec("woman") @ vec("dog"))) < 0.6


class TestFacePath:
    def test_small_crop_reports_no_face(self, client):
        body = {
            "schema_version": 1, "kind": "face",
            "crop_ref": {"clip_id": "c1", "frame_index": 0,
                         "bbox": [0, 0, 40, 40], "phrase": "woman"},
        }
        response = client.post("/v1/embed", json=body)
        assert response.status_code == 400
        assert response.json()["error"]["code"] == "no_face"


class TestErrorShapes:
    def test_invalid_json_body(self, client):
        response = client.post("/v1/keywords", content=b"{nope")
        assert response.status_code == 400
        assert response.json()["error"]["code"] == "bad_request"

    def test_unknown_endpoint_is_protocol_error(self, client):
        response = client.post("/v1/definitely_not", json={"schema_version": 1})
        assert response.status_code == 400
        assert response.json()["error"]["code"] == "unknown_endpoint"

    def test_schema_violation_names_endpoint(self, client):
        response = client.post("/v1/ground", json={"schema_version": 1})
        assert response.status_code == 400
        assert "/v1/ground" in response.json()["error"]["message"]


class TestStubEngines:
    def test_keyword_lexicon_scan_in_caption_order(self):
        engine = StubKeywordEngine()
        phrases = engine.extract("a dog chasing a woman past a sneaker shop")
        assert [p["text"] for p in phrases] == ["dog", "woman", "sneaker"]

    def test_ground_reads_frame_header(self, tmp_path):
        write_frame(tmp_path / "c1" / "0.y", 640, 360)
        engine = StubGroundEngine(tmp_path)
        boxes = engine.ground("woman", "c1", 7)  # falls back to frame 0 dims
        assert len(boxes) == 1
        x0, y0, x1, y1 = boxes[0]
        assert x1 - x0 >= 128 and y1 - y0 >= 128
        assert 0 <= x0 and x1 <= 640 and 0 <= y0 and y1 <= 360

    def test_ground_without_frames_returns_nothing(self, tmp_path):
        engine = StubGroundEngine(tmp_path / "missing")
        assert engine.ground("woman", "c1", 0) == []

    def test_verify_is_conservative(self):
        engine = StubVerifyEngine()
        a = {"clip_id": "c1", "frame_index": 0, "bbox": [0, 0, 9, 9], "phrase": "woman"}
        b = {"clip_id": "c2", "frame_index": 0, "bbox": [0, 0, 9, 9], "phrase": "woman"}
        verdict = engine.verify(a, b, "human")
        assert verdict == {"identity_consistent": False, "context_diverse": True}


class TestEngineLoading:
    def test_missing_model_artifact_refuses_to_bind(self, tmp_path):
        config = AdapterConfig(
            engines={"keywords": "transformers"},
            models={"keywords": str(tmp_path / "not-a-model")},
        )
        with pytest.raises(EngineLoadError):
            create_app(config)

    def test_unknown_engine_name_rejected(self):
        config = AdapterConfig(engines={"ground": "quantum"})
        with pytest.raises(EngineLoadError, match="unknown engine"):
            build_engines(config)
