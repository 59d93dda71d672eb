"""CLI: ``idec-logits-server --model <path-or-hf-id> [--port N] ...``"""

from __future__ import annotations

import argparse

from .server import ServerConfig, serve


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="idec-logits-server", description=__doc__)
    parser.add_argument("--model", required=True, help="model path or hub identifier")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8453)
    parser.add_argument("--max-prefix", type=int, default=2048)
    parser.add_argument("--sessions", type=int, default=16, help="session cache size")
    parser.add_argument(
        "--debug-json", action="store_true",
        help="also include log-probs as a JSON array in responses",
    )
    args = parser.parse_args(argv)
    serve(
        ServerConfig(
            model=args.model,
            device=args.device,
            host=args.host,
            port=args.port,
            max_prefix=args.max_prefix,
            session_cache_size=args.sessions,
            debug_json=args.debug_json,
        )
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
