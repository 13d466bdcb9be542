"""Operator entry point: one subcommand per stage plus the full pipeline.

Exit codes: 0 success, 1 validation/usage error, 2 stage failure. All
diagnostics go to standard error; data goes to files or standard output.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from . import __version__, jsonl, pipeline
from .bank import Bank, BandQuery, BankError
from .config import ConfigError, apply_overrides, load_config
from .core import clip_to_row, read_manifest
from .infer import InferenceError
from .mockserve import MockFacts, serve_mock
from .stats import compute_stats, render_text

logger = logging.getLogger(__name__)

_STAGE_COMMANDS = ("ingest", "detect", "embed", "retrieve", "verify", "assemble")


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message: str) -> None:  # noqa: A003
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, metavar="FILE",
                        help="run configuration (TOML)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override [run].seed")
    parser.add_argument("--workers", type=int, default=None,
                        help="override [run].workers (0 = logical cores)")
    parser.add_argument("--backend-url", default=None, metavar="URL",
                        help="override [backend].url (mock://FACTS or http://...)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crosspair",
                     description="Cross-pair subject-to-video dataset curation.")
    parser.add_argument("--version", action="version", version=f"crosspair {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run_p = sub.add_parser("run", help="run the full stage plan")
    _add_config_flags(run_p)
    run_p.add_argument("--resume", action="store_true",
                       help="skip stages whose checkpoints match")

    for stage in _STAGE_COMMANDS:
        stage_p = sub.add_parser(stage, help=f"run the {stage} stage")
        _add_config_flags(stage_p)

    stats_p = sub.add_parser("stats", help="compute dataset statistics")
    _add_config_flags(stats_p)

    bank_p = sub.add_parser("bank", help="retrieval bank operations")
    bank_sub = bank_p.add_subparsers(dest="bank_command", required=True, parser_class=_Parser)
    build_p = bank_sub.add_parser("build", help="build and persist the banks")
    _add_config_flags(build_p)
    query_p = bank_sub.add_parser("query", help="banded query (BandQuery JSON on stdin)")
    _add_config_flags(query_p)
    query_p.add_argument("--kind", choices=("person", "general", "face"),
                         default="general", help="which bank to query")

    mock_p = sub.add_parser("mock-serve", help="serve the deterministic mock backend")
    mock_p.add_argument("--facts", required=True, metavar="FILE",
                        help="planted facts JSON")
    mock_p.add_argument("--port", type=int, default=0,
                        help="port to bind (0 = ephemeral)")
    mock_p.add_argument("--host", default="127.0.0.1", help="host to bind")
    return parser


def _load(args: argparse.Namespace):
    cfg = load_config(Path(args.config))
    return apply_overrides(
        cfg,
        seed=args.seed,
        workers=args.workers,
        backend_url=getattr(args, "backend_url", None),
    )


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    summary = pipeline.run(cfg, resume=args.resume)
    print(summary.as_text(), file=sys.stderr)
    return 0


def _cmd_stage(args: argparse.Namespace, stage: str) -> int:
    cfg = _load(args)
    summary = pipeline.run_single(cfg, stage)
    print(summary.as_text(), file=sys.stderr)
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    cfg = _load(args)
    clips_path = cfg.out_dir / "clips.jsonl"
    if clips_path.is_file():
        clips = jsonl.read_rows(clips_path)
    else:
        clips = [clip_to_row(c) for c in read_manifest(cfg.manifest)]
    samples_path = cfg.out_dir / "samples.jsonl"
    samples = jsonl.read_rows(samples_path) if samples_path.is_file() else []
    report = compute_stats(samples, clips)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    jsonl.write_atomic_text(cfg.out_dir / "stats.json",
                            json.dumps(report.as_dict(), indent=2) + "\n")
    jsonl.write_atomic_text(cfg.out_dir / "stats.txt", render_text(report) + "\n")
    print(json.dumps(report.as_dict(), indent=2))
    return 0


def _cmd_bank_query(args: argparse.Namespace) -> int:
    cfg = _load(args)
    raw = sys.stdin.read()
    try:
        request = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"stdin is not valid BandQuery JSON: {exc}") from None
    try:
        query = BandQuery(
            vector=request["vector"],
            lower=float(request["lower"]),
            upper=float(request["upper"]),
            k=int(request.get("k", cfg.retrieve.k)),
            exclude_clip=request.get("exclude_clip"),
            exclude_video=request.get("exclude_video"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid BandQuery: {exc}") from None
    bank = Bank.load(cfg.out_dir / f"bank_{args.kind}.bin")
    for cand in bank.query_band(query, ef_search=cfg.bank.ef_search):
        row = {"subject_id": cand.subject_id,
               "similarity": round(cand.similarity, 6),
               "source": cand.source}
        if cand.video_id is not None:
            row["video_id"] = cand.video_id
        if cand.clip_id is not None:
            row["clip_id"] = cand.clip_id
        print(jsonl.dumps(row))
    return 0


def _cmd_mock_serve(args: argparse.Namespace) -> int:
    facts = MockFacts.from_file(Path(args.facts))
    server = serve_mock(facts, host=args.host, port=args.port)
    print(f"mock backend listening on http://{args.host}:{server.server_address[1]}",
          file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command in _STAGE_COMMANDS:
            return _cmd_stage(args, args.command)
        if args.command == "stats":
            return _cmd_stats(args)
        if args.command == "bank":
            if args.bank_command == "build":
                return _cmd_stage(args, "bank_build")
            return _cmd_bank_query(args)
        if args.command == "mock-serve":
            return _cmd_mock_serve(args)
        parser.error(f"unknown command {args.command!r}")
        return 1
    except (ConfigError, pipeline.ValidationFailure,
            pipeline.StaleCheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (pipeline.StageFailure, BankError, InferenceError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
