#!/usr/bin/env python3
"""
TwinID - Bayesian system identification with correlated model-prediction error
"""

import sys
import argparse
import logging
import socket

from pydantic import ValidationError

from twinid_shared import LEDGER_PATH, SERVER_AVAILABLE, TwinIDError
from twinid_config import RunConfig, load_config
from twinid_executive import TwinID
from twinid_memory import RunLedger

logger = logging.getLogger("TwinID")

COMMANDS = {
    "loglik-bench": "cmd_loglik_bench",
    "study": "cmd_study",
    "infer": "cmd_infer",
    "select": "cmd_select",
    "predict": "cmd_predict",
    "sweep": "cmd_sweep",
}


def is_port_available(port: int, host: str = "0.0.0.0") -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        try:
            s.bind((host, port))
            return True
        except socket.error:
            return False


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="TwinID: correlated-error Bayesian system identification")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="Override the configured seed")
        p.add_argument("--workers", type=int, default=None, help="Concurrency cap (1 = deterministic)")
        p.add_argument("--out", type=str, default=None, help="Output directory")
        p.add_argument("--ledger", type=str, default=str(LEDGER_PATH), help="sqlite run ledger")
        p.add_argument("--no-ledger", action="store_true", help="Do not record the run")
        p.add_argument("--verbose", action="store_true", help="Debug logging")
    serve = sub.add_parser("serve")
    serve.add_argument("--port", type=int, default=8000, help="Port for server mode")
    serve.add_argument("--host", type=str, default="0.0.0.0", help="Host IP address")
    serve.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {k: v for k, v in (("seed", args.seed), ("workers", args.workers), ("out_dir", args.out))
                 if v is not None}
    if overrides:
        config = RunConfig.model_validate({**config.model_dump(), **overrides})
    return config


def serve(args) -> None:
    if not SERVER_AVAILABLE:
        print("❌ Server dependencies missing. Install: pip install fastapi uvicorn")
        sys.exit(1)
    import uvicorn
    from twinid_server import app

    port = args.port
    if not is_port_available(port, args.host):
        print(f"⚠️ Port {port} is in use.")
        for i in range(1, 11):
            if is_port_available(port + i, args.host):
                port += i
                print(f"🔄 Switching to available port: {port}")
                break
        else:
            print(f"❌ Could not find available port in range {args.port}-{args.port + 10}")
            sys.exit(1)

    # Silence status polling
    class EndpointFilter(logging.Filter):
        def filter(self, record: logging.LogRecord) -> bool:
            return "/api/system/status" not in record.getMessage()
    logging.getLogger("uvicorn.access").addFilter(EndpointFilter())

    print(f"🚀 Starting TwinID API Server on port {port}...")
    uvicorn.run(app, host=args.host, port=port)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(levelname)s: %(message)s')

    if args.command == "serve":
        serve(args)
        return 0

    try:
        config = resolve_config(args)
        ledger = None if args.no_ledger else RunLedger(args.ledger)
        twin = TwinID(config, ledger=ledger)
        getattr(twin, COMMANDS[args.command])()
    except ValidationError as e:
        print(f"❌ Invalid configuration:\n{e}")
        sys.exit(1)
    except TwinIDError as e:
        print(f"❌ {e}")
        sys.exit(1)
    return 0


if __name__ == "__main__":
    main()
