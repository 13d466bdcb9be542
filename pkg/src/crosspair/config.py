"""Run configuration: one TOML file, flag overrides on top.

Paths are resolved relative to the config file's directory. Band defaults
(lower 0.50, upper 0.92) are tuning defaults, not corpus-derived values;
per-category overrides live under [retrieve.bands.<category>].
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import CATEGORIES, FilterPolicy, SamplingPolicy


class ConfigError(Exception):
    pass


@dataclass
class BackendConfig:
    url: str = "mock://facts.json"
    max_in_flight: int = 8
    timeout_s: float = 30.0
    retry_attempts: int = 3
    retry_backoff_s: float = 0.05


@dataclass
class IngestConfig:
    border_frame_index: int = 0
    black_threshold: int = 16
    row_fraction: float = 0.98
    max_border_fraction: float = 0.10


@dataclass
class BankConfig:
    approx_threshold: int = 50_000
    graph_degree: int = 16
    ef_build: int = 64
    ef_search: int = 512


@dataclass
class Band:
    lower: float = 0.50
    upper: float = 0.92

    def __post_init__(self) -> None:
        if not -1.0 <= self.lower < self.upper <= 1.0:
            raise ConfigError(
                f"band must satisfy -1 <= lower < upper <= 1, got [{self.lower}, {self.upper}]"
            )


@dataclass
class RetrieveConfig:
    k: int = 20
    band: Band = field(default_factory=Band)
    bands_by_category: dict[str, Band] = field(default_factory=dict)

    def band_for(self, category: str) -> Band:
        return self.bands_by_category.get(category, self.band)


@dataclass
class RunConfig:
    config_dir: Path
    manifest: Path
    out_dir: Path
    frames_dir: Optional[Path] = None
    external_images: Optional[Path] = None
    backend: BackendConfig = field(default_factory=BackendConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    sampling: SamplingPolicy = field(default_factory=SamplingPolicy)
    filter_policy: FilterPolicy = field(default_factory=FilterPolicy)
    bank: BankConfig = field(default_factory=BankConfig)
    retrieve: RetrieveConfig = field(default_factory=RetrieveConfig)
    seed: int = 0
    workers: int = 0

    def resolve(self, raw: str) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else self.config_dir / p

    # Per-stage views used for content-addressed checkpoint digests; a
    # config edit reruns exactly the stages whose view changed.
    def stage_view(self, stage: str) -> dict:
        common = {"seed": self.seed}
        if stage == "ingest":
            return {**common, "ingest": vars(self.ingest)}
        if stage == "detect":
            return {
                **common,
                "fractions": list(self.sampling.fractions),
                "filter": vars(self.filter_policy),
            }
        if stage == "embed":
            return common
        if stage == "bank_build":
            return {**common, "bank": vars(self.bank)}
        if stage == "retrieve":
            return {
                **common,
                "k": self.retrieve.k,
                "band": vars(self.retrieve.band),
                "bands_by_category": {
                    c: vars(b) for c, b in sorted(self.retrieve.bands_by_category.items())
                },
                "ef_search": self.bank.ef_search,
            }
        if stage in ("verify", "assemble", "stats"):
            return common
        raise ConfigError(f"unknown stage {stage!r}")


def _section(data: dict, name: str) -> dict:
    value = data.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a table")
    return value


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None

    config_dir = path.parent.resolve()
    paths = _section(data, "paths")
    if "manifest" not in paths:
        raise ConfigError("config must set paths.manifest")
    if "out_dir" not in paths:
        raise ConfigError("config must set paths.out_dir")

    cfg = RunConfig(
        config_dir=config_dir,
        manifest=config_dir / paths["manifest"],
        out_dir=config_dir / paths["out_dir"],
    )
    if "frames_dir" in paths:
        cfg.frames_dir = config_dir / paths["frames_dir"]
    if "external_images" in paths:
        cfg.external_images = config_dir / paths["external_images"]

    backend = _section(data, "backend")
    for key in vars(cfg.backend):
        if key in backend:
            setattr(cfg.backend, key, type(getattr(cfg.backend, key))(backend[key]))

    run = _section(data, "run")
    cfg.seed = int(run.get("seed", cfg.seed))
    cfg.workers = int(run.get("workers", cfg.workers))

    ingest = _section(data, "ingest")
    for key in vars(cfg.ingest):
        if key in ingest:
            setattr(cfg.ingest, key, type(getattr(cfg.ingest, key))(ingest[key]))

    detect = _section(data, "detect")
    try:
        if "fractions" in detect:
            cfg.sampling = SamplingPolicy(fractions=tuple(detect["fractions"]))
        cfg.filter_policy = FilterPolicy(
            min_area_fraction=float(detect.get("min_area_fraction", 0.04)),
            max_area_fraction=float(detect.get("max_area_fraction", 0.90)),
            min_side_px=int(detect.get("min_side_px", 128)),
            iou_suppress_threshold=float(detect.get("iou_suppress_threshold", 0.8)),
        )
    except ValueError as exc:
        raise ConfigError(f"[detect]: {exc}") from None

    bank = _section(data, "bank")
    for key in vars(cfg.bank):
        if key in bank:
            setattr(cfg.bank, key, int(bank[key]))

    retrieve = _section(data, "retrieve")
    cfg.retrieve.k = int(retrieve.get("k", cfg.retrieve.k))
    cfg.retrieve.band = Band(
        lower=float(retrieve.get("lower", 0.50)),
        upper=float(retrieve.get("upper", 0.92)),
    )
    for category, band in _section(retrieve, "bands").items():
        if category not in CATEGORIES:
            raise ConfigError(f"retrieve.bands.{category}: unknown category")
        cfg.retrieve.bands_by_category[category] = Band(
            lower=float(band.get("lower", cfg.retrieve.band.lower)),
            upper=float(band.get("upper", cfg.retrieve.band.upper)),
        )
    return cfg


def apply_overrides(
    cfg: RunConfig,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    backend_url: Optional[str] = None,
) -> RunConfig:
    if seed is not None:
        cfg.seed = seed
    if workers is not None:
        cfg.workers = workers
    if backend_url is not None:
        cfg.backend.url = backend_url
    return cfg
