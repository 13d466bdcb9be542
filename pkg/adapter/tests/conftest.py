from __future__ import annotations

import json
from pathlib import Path

import pytest

from crosspair_adapter.config import AdapterConfig

ADAPTER_ROOT = Path(__file__).resolve().parent.parent
REPO_ROOT = ADAPTER_ROOT.parent
PROTOCOL_DIR = REPO_ROOT / "fixtures" / "protocol"


@pytest.fixture()
def stub_config(tmp_path) -> AdapterConfig:
    return AdapterConfig(dims={"face": 32, "general": 32}, frames_dir=tmp_path / "frames")


def load_schemas() -> dict:
    return json.loads((PROTOCOL_DIR / "schemas.json").read_text(encoding="utf-8"))


def load_cases() -> list[dict]:
    return json.loads((PROTOCOL_DIR / "cases.json").read_text(encoding="utf-8"))["cases"]
