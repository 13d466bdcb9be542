"""Adapter entry point: load engines per the models config and serve."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

import uvicorn

from . import __version__
from .config import AdapterConfigError, load_adapter_config
from .engines import EngineLoadError
from .service import create_app

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crosspair-adapter",
        description="Serve real models behind the crosspair inference protocol.",
    )
    parser.add_argument("--version", action="version",
                        version=f"crosspair-adapter {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    serve = sub.add_parser("serve", help="bind the protocol endpoints")
    serve.add_argument("--models", required=True, metavar="FILE",
                       help="adapter config (TOML) naming each role's engine")
    serve.add_argument("--host", default=None, help="override [service].host")
    serve.add_argument("--port", type=int, default=None, help="override [service].port")
    serve.add_argument("--device", default=None, help="override [service].device")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = load_adapter_config(Path(args.models))
        if args.host is not None:
            config.host = args.host
        if args.port is not None:
            config.port = args.port
        if args.device is not None:
            config.device = args.device
        app = create_app(config)  # engine load failures surface here
    except (AdapterConfigError, EngineLoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logger.info("serving on http://%s:%d", config.host, config.port)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
