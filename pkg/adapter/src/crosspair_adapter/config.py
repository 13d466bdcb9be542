"""Adapter configuration: which engine serves each model role."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .engines import ROLES

DEFAULT_DIMS = {"face": 512, "general": 512}


class AdapterConfigError(Exception):
    pass


@dataclass
class AdapterConfig:
    host: str = "127.0.0.1"
    port: int = 8801
    device: str = "cpu"
    frames_dir: Optional[Path] = None
    dims: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_DIMS))
    engines: dict[str, str] = field(default_factory=dict)
    models: dict[str, str] = field(default_factory=dict)


def load_adapter_config(path: Path) -> AdapterConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise AdapterConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise AdapterConfigError(f"{path}: {exc}") from None

    cfg = AdapterConfig()
    service = data.get("service", {})
    cfg.host = str(service.get("host", cfg.host))
    cfg.port = int(service.get("port", cfg.port))
    cfg.device = str(service.get("device", cfg.device))
    if "frames_dir" in service:
        frames = Path(service["frames_dir"])
        cfg.frames_dir = frames if frames.is_absolute() else path.parent / frames
    cfg.dims["face"] = int(service.get("dims_face", cfg.dims["face"]))
    cfg.dims["general"] = int(service.get("dims_general", cfg.dims["general"]))

    engines = data.get("engines", {})
    for role, engine in engines.items():
        if role not in ROLES:
            raise AdapterConfigError(f"[engines].{role}: unknown role")
        cfg.engines[role] = str(engine)
    cfg.models = {str(k): str(v) for k, v in data.get("models", {}).items()}
    return cfg
