"""Stage orchestration: content-addressed checkpoints, resume, bounded
parallelism, atomic outputs.

Stages run sequentially; items within a stage fan out over a worker pool
and results are sorted before the single atomic write, so identical inputs,
config, and seed produce byte-identical outputs. A checkpoint records the
(input digest, config digest, code version) triple plus output digests;
with --resume a stage is skipped only when its whole triple matches and
every upstream stage was itself skipped, so a rerun anywhere invalidates
everything downstream.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import __version__, jsonl
from .bank import Bank, BandQuery, bank_from_records
from .config import RunConfig
from .core import (
    clip_from_row,
    clip_to_row,
    read_manifest,
    subject_from_row,
    subject_to_row,
    validate_manifest,
)
from .detect import detect_clip
from .embed import EmbeddingRecord, embed_external_image, embed_subject, read_store, write_store
from .infer import HttpTransport, InferenceClient, InferenceError, InProcessTransport
from .ingest import ingest_clip
from .mockserve import MockBackend, MockFacts
from .stats import compute_stats, render_text
from .verify import CandidatePair, PairSide, assemble_samples, verify_candidates

logger = logging.getLogger(__name__)

STAGES = ("ingest", "detect", "embed", "bank_build", "retrieve", "verify", "assemble", "stats")

# Stages whose outputs depend on the backend bound to the run.
_BACKEND_STAGES = frozenset({"detect", "embed", "verify"})


class PipelineError(Exception):
    pass


class ValidationFailure(PipelineError):
    """Bad inputs or configuration; CLI exit code 1."""


class StageFailure(PipelineError):
    """A stage failed mid-run; prior outputs are left intact. Exit code 2."""


class StaleCheckpointError(PipelineError):
    """Upstream outputs do not match their recorded digests."""


@dataclass
class StageResult:
    name: str
    status: str  # ran | skipped
    duration_s: float = 0.0
    counts: dict[str, int] = field(default_factory=dict)


@dataclass
class RunSummary:
    results: list[StageResult] = field(default_factory=list)

    def stage(self, name: str) -> StageResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def as_text(self) -> str:
        lines = ["stage       status    duration  counts"]
        for r in self.results:
            counts = " ".join(f"{k}={v}" for k, v in sorted(r.counts.items()))
            lines.append(f"{r.name:<11} {r.status:<9} {r.duration_s:7.2f}s  {counts}")
        return "\n".join(lines)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_dir(path: Path) -> str:
    h = hashlib.sha256()
    for file in sorted(Path(path).rglob("*")):
        if file.is_file():
            h.update(file.relative_to(path).as_posix().encode("utf-8"))
            h.update(b"\x00")
            h.update(bytes.fromhex(sha256_file(file)))
    return h.hexdigest()


def _digest_json(obj: dict) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()


@dataclass
class StageSpec:
    name: str
    inputs: Callable[["Context"], dict[str, Path]]
    outputs: Callable[["Context"], dict[str, Path]]
    run: Callable[["Context"], dict[str, int]]


class Context:
    """Shared run state: config, paths, and the lazily-created client."""

    def __init__(self, cfg: RunConfig) -> None:
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self._client: Optional[InferenceClient] = None
        self._backend_descriptor: Optional[dict] = None

    def path(self, name: str) -> Path:
        return self.out / name

    def backend_descriptor(self) -> dict:
        if self._backend_descriptor is None:
            url = self.cfg.backend.url
            desc = {"url": url}
            if url.startswith("mock://"):
                facts_path = self.cfg.resolve(url[len("mock://") :])
                desc["facts_sha256"] = sha256_file(facts_path)
            self._backend_descriptor = desc
        return self._backend_descriptor

    @property
    def client(self) -> InferenceClient:
        if self._client is None:
            be = self.cfg.backend
            url = be.url
            if url.startswith("mock://"):
                facts = MockFacts.from_file(self.cfg.resolve(url[len("mock://") :]))
                transport = InProcessTransport(MockBackend(facts))
            elif url.startswith(("http://", "https://")):
                transport = HttpTransport(url, timeout_s=be.timeout_s)
            else:
                raise ValidationFailure(f"unsupported backend url {url!r}")
            client = InferenceClient(
                transport,
                max_in_flight=be.max_in_flight,
                retry_attempts=be.retry_attempts,
                retry_backoff_s=be.retry_backoff_s,
            )
            try:
                client.handshake()
            except InferenceError as exc:
                raise StageFailure(f"backend handshake failed: {exc}") from exc
            self._client = client
        return self._client

    @property
    def workers(self) -> int:
        return self.cfg.workers if self.cfg.workers > 0 else (os.cpu_count() or 1)

    def pool_map(self, fn, items):
        items = list(items)
        if self.workers <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))


# -- stage bodies -------------------------------------------------------------


def _stage_ingest(ctx: Context) -> dict[str, int]:
    records = read_manifest(ctx.cfg.manifest)
    report = validate_manifest(records)
    if not report.ok:
        detail = "; ".join(
            f"{cid}: {', '.join(msgs)}" for cid, msgs in sorted(report.errors.items())
        )
        raise ValidationFailure(f"manifest validation failed: {detail}")
    ic = ctx.cfg.ingest
    kept_rows, dropped_rows = [], []
    for clip in sorted(records, key=lambda c: c.clip_id):
        kept, reason = ingest_clip(
            clip,
            ctx.cfg.frames_dir,
            border_frame_index=ic.border_frame_index,
            black_threshold=ic.black_threshold,
            row_fraction=ic.row_fraction,
            max_border_fraction=ic.max_border_fraction,
        )
        if kept is not None:
            kept_rows.append(clip_to_row(kept))
        else:
            dropped_rows.append({"clip_id": clip.clip_id, "reason": reason})
    jsonl.write_rows(ctx.path("clips.jsonl"), kept_rows, sort_key=lambda r: r["clip_id"])
    jsonl.write_rows(ctx.path("clips_dropped.jsonl"), dropped_rows, sort_key=lambda r: r["clip_id"])
    return {"kept": len(kept_rows), "dropped": len(dropped_rows)}


def _stage_detect(ctx: Context) -> dict[str, int]:
    clips = [clip_from_row(r) for r in jsonl.read_rows(ctx.path("clips.jsonl"))]
    client = ctx.client
    results = ctx.pool_map(
        lambda clip: detect_clip(clip, client, ctx.cfg.sampling, ctx.cfg.filter_policy),
        clips,
    )
    subject_rows, error_rows = [], []
    for res in results:
        subject_rows.extend(subject_to_row(inst) for inst in res.instances)
        error_rows.extend({"clip_id": res.clip_id, "error": e} for e in res.errors)
    jsonl.write_rows(
        ctx.path("subjects.jsonl"), subject_rows,
        sort_key=lambda r: (r["clip_id"], r["subject_id"]),
    )
    jsonl.write_rows(
        ctx.path("detect_errors.jsonl"), error_rows,
        sort_key=lambda r: (r["clip_id"], r["error"]),
    )
    return {"subjects": len(subject_rows), "errors": len(error_rows)}


def _stage_embed(ctx: Context) -> dict[str, int]:
    subjects = [subject_from_row(r) for r in jsonl.read_rows(ctx.path("subjects.jsonl"))]
    client = ctx.client
    errors: list[dict] = []

    def _embed_one(inst):
        try:
            return embed_subject(inst, client)
        except InferenceError as exc:
            return {"subject_id": inst.subject_id, "error": str(exc)}

    produced = ctx.pool_map(_embed_one, subjects)

    externals = []
    if ctx.cfg.external_images is not None:
        ext_rows = sorted(
            jsonl.read_rows(ctx.cfg.external_images), key=lambda r: r["image_id"]
        )

        def _embed_ext(row):
            try:
                return embed_external_image(row, client)
            except InferenceError as exc:
                return {"subject_id": row["image_id"], "error": str(exc)}

        externals = ctx.pool_map(_embed_ext, ext_rows)

    by_kind: dict[str, list[EmbeddingRecord]] = {"face": [], "general": [], "person": []}
    for item in list(produced) + list(externals):
        if isinstance(item, EmbeddingRecord):
            by_kind[item.kind].append(item)
        else:
            errors.append(item)

    dims = client.dims
    kind_dims = {"face": dims.dim_face, "general": dims.dim_general, "person": dims.dim_person}
    for kind, dim in kind_dims.items():
        write_store(ctx.path(f"emb_{kind}.bin"), kind, dim, by_kind[kind])
    jsonl.write_rows(
        ctx.path("embed_errors.jsonl"), errors,
        sort_key=lambda r: (r["subject_id"], r["error"]),
    )
    total = sum(len(v) for v in by_kind.values())
    return {"embedded": total, "errors": len(errors)}


def _stage_bank_build(ctx: Context) -> dict[str, int]:
    counts = {}
    bc = ctx.cfg.bank
    for kind in ("person", "general", "face"):
        records = read_store(ctx.path(f"emb_{kind}.bin"))
        dims = {r.dim for r in records}
        dim = dims.pop() if len(dims) == 1 else _store_dim(ctx.path(f"emb_{kind}.bin"))
        bank = bank_from_records(kind, dim, records)
        bank.build_index(
            graph_degree=bc.graph_degree,
            ef_build=bc.ef_build,
            approx_threshold=bc.approx_threshold,
        )
        bank.persist(ctx.path(f"bank_{kind}.bin"))
        counts[kind] = len(bank)
    return counts


def _store_dim(path: Path) -> int:
    import struct

    with open(path, "rb") as fh:
        header = fh.read(16)
    return struct.unpack("<4sIII", header)[3]


def _stage_retrieve(ctx: Context) -> dict[str, int]:
    subjects = jsonl.read_rows(ctx.path("subjects.jsonl"))
    stores: dict[str, EmbeddingRecord] = {}
    for kind in ("person", "general", "face"):
        for rec in read_store(ctx.path(f"emb_{kind}.bin")):
            stores[rec.subject_id] = rec
    banks = {kind: Bank.load(ctx.path(f"bank_{kind}.bin")) for kind in ("person", "general", "face")}

    rows = []
    missing = 0
    for subject in subjects:
        rec = stores.get(subject["subject_id"])
        if rec is None or rec.source != "video_corpus":
            missing += 1
            continue
        band = ctx.cfg.retrieve.band_for(subject["category"])
        query = BandQuery(
            vector=rec.vector,
            lower=band.lower,
            upper=band.upper,
            k=ctx.cfg.retrieve.k,
            exclude_clip=subject["clip_id"],
        )
        for cand in banks[rec.kind].query_band(query, ef_search=ctx.cfg.bank.ef_search):
            if cand.subject_id == subject["subject_id"]:
                continue
            row = {
                "query_subject_id": subject["subject_id"],
                "candidate_subject_id": cand.subject_id,
                "similarity": round(cand.similarity, 6),
                "source": cand.source,
            }
            if cand.video_id is not None:
                row["video_id"] = cand.video_id
            if cand.clip_id is not None:
                row["clip_id"] = cand.clip_id
            rows.append(row)
    jsonl.write_rows(
        ctx.path("candidates.jsonl"), rows,
        sort_key=lambda r: (r["query_subject_id"], r["candidate_subject_id"]),
    )
    return {"candidates": len(rows), "subjects_without_embedding": missing}


def _pair_side_from_subject(row: dict) -> PairSide:
    return PairSide(
        subject_id=row["subject_id"],
        source="video_corpus",
        category=row["category"],
        clip_id=row["clip_id"],
        video_id=row.get("video_id"),
        frame_index=row["frame_index"],
        bbox=tuple(row["bbox"]),
        phrase=row["phrase"],
        logo_visible=row.get("logo_visible"),
    )


def _stage_verify(ctx: Context) -> dict[str, int]:
    candidates = jsonl.read_rows(ctx.path("candidates.jsonl"))
    subjects = {r["subject_id"]: r for r in jsonl.read_rows(ctx.path("subjects.jsonl"))}
    externals: dict[str, dict] = {}
    if ctx.cfg.external_images is not None:
        externals = {
            r["image_id"]: r for r in jsonl.read_rows(ctx.cfg.external_images)
        }
    pairs = []
    for row in candidates:
        query_row = subjects.get(row["query_subject_id"])
        if query_row is None:
            raise StageFailure(
                f"candidate references unknown query subject {row['query_subject_id']}"
            )
        cand_id = row["candidate_subject_id"]
        if row["source"] == "external_images":
            ext = externals.get(cand_id)
            if ext is None:
                raise StageFailure(f"candidate references unknown external image {cand_id}")
            candidate = PairSide(
                subject_id=cand_id,
                source="external_images",
                category=ext.get("category", "other"),
                logo_visible=ext.get("logo_visible"),
            )
        else:
            cand_row = subjects.get(cand_id)
            if cand_row is None:
                raise StageFailure(f"candidate references unknown subject {cand_id}")
            candidate = _pair_side_from_subject(cand_row)
        pairs.append(
            CandidatePair(
                query=_pair_side_from_subject(query_row),
                candidate=candidate,
                similarity=row["similarity"],
            )
        )
    outcome = verify_candidates(pairs, ctx.client)
    jsonl.write_rows(
        ctx.path("pairs_verified.jsonl"), outcome.verified, sort_key=lambda r: r["pair_id"]
    )
    jsonl.write_rows(
        ctx.path("pairs_rejected.jsonl"), outcome.rejected, sort_key=lambda r: r["pair_id"]
    )
    return {
        "verified": len(outcome.verified),
        "rejected": len(outcome.rejected),
        "duplicates": outcome.duplicates,
    }


def _stage_assemble(ctx: Context) -> dict[str, int]:
    verified = jsonl.read_rows(ctx.path("pairs_verified.jsonl"))
    clips = {r["clip_id"]: r for r in jsonl.read_rows(ctx.path("clips.jsonl"))}
    try:
        samples = assemble_samples(verified, clips)
    except ValueError as exc:
        raise StageFailure(str(exc)) from exc
    jsonl.write_rows(ctx.path("samples.jsonl"), samples, sort_key=lambda r: r["clip_id"])
    multi = sum(1 for s in samples if s["subject_count"] >= 2)
    return {"samples": len(samples), "multi_subject": multi}


def _stage_stats(ctx: Context) -> dict[str, int]:
    samples = jsonl.read_rows(ctx.path("samples.jsonl"))
    clips = jsonl.read_rows(ctx.path("clips.jsonl"))
    try:
        report = compute_stats(samples, clips)
    except ValueError as exc:
        raise StageFailure(str(exc)) from exc
    jsonl.write_atomic_text(
        ctx.path("stats.json"), json.dumps(report.as_dict(), indent=2) + "\n"
    )
    jsonl.write_atomic_text(ctx.path("stats.txt"), render_text(report) + "\n")
    return {"clips": report.total_clips, "pairs": report.total_verified_pairs}


def _emb_outputs(ctx: Context) -> dict[str, Path]:
    out = {}
    for kind in ("person", "general", "face"):
        out[f"emb_{kind}.bin"] = ctx.path(f"emb_{kind}.bin")
        out[f"emb_{kind}.bin.meta.jsonl"] = ctx.path(f"emb_{kind}.bin.meta.jsonl")
    out["embed_errors.jsonl"] = ctx.path("embed_errors.jsonl")
    return out


def _specs() -> dict[str, StageSpec]:
    def ingest_inputs(ctx: Context) -> dict[str, Path]:
        inputs = {"manifest": ctx.cfg.manifest}
        if ctx.cfg.frames_dir is not None:
            inputs["frames"] = ctx.cfg.frames_dir
        return inputs

    def embed_inputs(ctx: Context) -> dict[str, Path]:
        inputs = {"subjects.jsonl": ctx.path("subjects.jsonl")}
        if ctx.cfg.external_images is not None:
            inputs["external_images"] = ctx.cfg.external_images
        return inputs

    def verify_inputs(ctx: Context) -> dict[str, Path]:
        inputs = {
            "candidates.jsonl": ctx.path("candidates.jsonl"),
            "subjects.jsonl": ctx.path("subjects.jsonl"),
        }
        if ctx.cfg.external_images is not None:
            inputs["external_images"] = ctx.cfg.external_images
        return inputs

    def retrieve_inputs(ctx: Context) -> dict[str, Path]:
        inputs = {"subjects.jsonl": ctx.path("subjects.jsonl")}
        for kind in ("person", "general", "face"):
            inputs[f"bank_{kind}.bin"] = ctx.path(f"bank_{kind}.bin")
            inputs[f"emb_{kind}.bin"] = ctx.path(f"emb_{kind}.bin")
            inputs[f"emb_{kind}.bin.meta.jsonl"] = ctx.path(f"emb_{kind}.bin.meta.jsonl")
        return inputs

    return {
        "ingest": StageSpec(
            "ingest",
            ingest_inputs,
            lambda ctx: {
                "clips.jsonl": ctx.path("clips.jsonl"),
                "clips_dropped.jsonl": ctx.path("clips_dropped.jsonl"),
            },
            _stage_ingest,
        ),
        "detect": StageSpec(
            "detect",
            lambda ctx: {"clips.jsonl": ctx.path("clips.jsonl")},
            lambda ctx: {
                "subjects.jsonl": ctx.path("subjects.jsonl"),
                "detect_errors.jsonl": ctx.path("detect_errors.jsonl"),
            },
            _stage_detect,
        ),
        "embed": StageSpec("embed", embed_inputs, _emb_outputs, _stage_embed),
        "bank_build": StageSpec(
            "bank_build",
            lambda ctx: {
                name: ctx.path(name)
                for kind in ("person", "general", "face")
                for name in (f"emb_{kind}.bin", f"emb_{kind}.bin.meta.jsonl")
            },
            lambda ctx: {
                f"bank_{kind}.bin": ctx.path(f"bank_{kind}.bin")
                for kind in ("person", "general", "face")
            },
            _stage_bank_build,
        ),
        "retrieve": StageSpec(
            "retrieve",
            retrieve_inputs,
            lambda ctx: {"candidates.jsonl": ctx.path("candidates.jsonl")},
            _stage_retrieve,
        ),
        "verify": StageSpec(
            "verify",
            verify_inputs,
            lambda ctx: {
                "pairs_verified.jsonl": ctx.path("pairs_verified.jsonl"),
                "pairs_rejected.jsonl": ctx.path("pairs_rejected.jsonl"),
            },
            _stage_verify,
        ),
        "assemble": StageSpec(
            "assemble",
            lambda ctx: {
                "pairs_verified.jsonl": ctx.path("pairs_verified.jsonl"),
                "clips.jsonl": ctx.path("clips.jsonl"),
            },
            lambda ctx: {"samples.jsonl": ctx.path("samples.jsonl")},
            _stage_assemble,
        ),
        "stats": StageSpec(
            "stats",
            lambda ctx: {
                "samples.jsonl": ctx.path("samples.jsonl"),
                "clips.jsonl": ctx.path("clips.jsonl"),
            },
            lambda ctx: {
                "stats.json": ctx.path("stats.json"),
                "stats.txt": ctx.path("stats.txt"),
            },
            _stage_stats,
        ),
    }


def _digest_path(path: Path) -> str:
    if path.is_dir():
        return sha256_dir(path)
    return sha256_file(path)


def _input_digests(ctx: Context, spec: StageSpec) -> dict[str, str]:
    digests = {}
    for name, path in spec.inputs(ctx).items():
        if not path.exists():
            raise StageFailure(f"stage {spec.name}: missing input {name} ({path})")
        digests[name] = _digest_path(path)
    return digests


def _config_digest(ctx: Context, stage: str) -> str:
    view = {"config": ctx.cfg.stage_view(stage), "code_version": __version__}
    if stage in _BACKEND_STAGES:
        view["backend"] = ctx.backend_descriptor()
    return _digest_json(view)


def _checkpoint_path(ctx: Context, stage: str) -> Path:
    return ctx.out / ".checkpoints" / f"{stage}.json"


def _load_checkpoint(ctx: Context, stage: str) -> Optional[dict]:
    path = _checkpoint_path(ctx, stage)
    if not path.is_file():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return None


def _can_skip(ctx: Context, spec: StageSpec, config_digest: str, inputs: dict[str, str]) -> bool:
    ckpt = _load_checkpoint(ctx, spec.name)
    if ckpt is None:
        return False
    if ckpt.get("code_version") != __version__ or ckpt.get("config_digest") != config_digest:
        return False
    if ckpt.get("inputs") != inputs:
        return False
    for name, path in spec.outputs(ctx).items():
        if not path.exists():
            return False
        if ckpt.get("outputs", {}).get(name) != _digest_path(path):
            return False
    return True


def _write_checkpoint(ctx: Context, spec: StageSpec, config_digest: str, inputs: dict[str, str]) -> None:
    outputs = {name: _digest_path(path) for name, path in spec.outputs(ctx).items()}
    body = {
        "stage": spec.name,
        "code_version": __version__,
        "config_digest": config_digest,
        "inputs": inputs,
        "outputs": outputs,
    }
    jsonl.write_atomic_text(
        _checkpoint_path(ctx, spec.name),
        json.dumps(body, indent=2, sort_keys=True) + "\n",
    )


def run(cfg: RunConfig, resume: bool = False) -> RunSummary:
    """Execute the full stage plan; with resume=True, skip stages whose
    checkpoints match and whose upstream stages were all skipped."""
    ctx = Context(cfg)
    ctx.out.mkdir(parents=True, exist_ok=True)
    specs = _specs()
    summary = RunSummary()
    upstream_all_skipped = True
    for name in STAGES:
        spec = specs[name]
        config_digest = _config_digest(ctx, name)
        inputs = _input_digests(ctx, spec)
        if resume and upstream_all_skipped and _can_skip(ctx, spec, config_digest, inputs):
            logger.info("stage %s: skipped (checkpoint match)", name)
            summary.results.append(StageResult(name=name, status="skipped"))
            continue
        upstream_all_skipped = False
        started = time.monotonic()
        counts = spec.run(ctx)
        _write_checkpoint(ctx, spec, config_digest, inputs)
        duration = time.monotonic() - started
        logger.info("stage %s: ran in %.2fs %s", name, duration, counts)
        summary.results.append(
            StageResult(name=name, status="ran", duration_s=duration, counts=counts)
        )
    return summary


def run_single(cfg: RunConfig, stage: str) -> RunSummary:
    """Run exactly one stage, refusing if upstream outputs are stale."""
    if stage not in STAGES:
        raise ValidationFailure(f"unknown stage {stage!r}")
    ctx = Context(cfg)
    ctx.out.mkdir(parents=True, exist_ok=True)
    specs = _specs()
    spec = specs[stage]

    # Any input produced by an upstream stage must match that stage's
    # recorded output digest; otherwise the checkpoint chain is stale.
    upstream_outputs: dict[str, tuple[str, str]] = {}
    for name in STAGES[: STAGES.index(stage)]:
        ckpt = _load_checkpoint(ctx, name)
        if ckpt is None:
            continue
        for out_name, digest in ckpt.get("outputs", {}).items():
            upstream_outputs[out_name] = (name, digest)
    for in_name, path in spec.inputs(ctx).items():
        if in_name in upstream_outputs:
            producer, recorded = upstream_outputs[in_name]
            if not path.exists():
                raise StaleCheckpointError(
                    f"input {in_name} missing; rerun stage {producer} first"
                )
            if _digest_path(path) != recorded:
                raise StaleCheckpointError(
                    f"input {in_name} does not match the digest recorded by stage "
                    f"{producer}; rerun {producer} (or the full pipeline) first"
                )

    config_digest = _config_digest(ctx, stage)
    inputs = _input_digests(ctx, spec)
    started = time.monotonic()
    counts = spec.run(ctx)
    _write_checkpoint(ctx, spec, config_digest, inputs)
    summary = RunSummary()
    summary.results.append(
        StageResult(name=stage, status="ran", duration_s=time.monotonic() - started, counts=counts)
    )
    return summary
