"""Command line entry point: serve a fixture tree over HTTP."""

import argparse
import logging
import sys

from .server import serve
from .store import FixtureError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="toolserver",
        description="Replay recorded tool results over the inference wire protocol.")
    parser.add_argument("--fixture-root", required=True,
                        help="directory with tools/ and masks/ subtrees")
    parser.add_argument("--port", type=int, default=8706,
                        help="TCP port to bind (default 8706, 0 for ephemeral)")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--failure-config",
                        help="JSON file with timeout_s/malformed/error_rate settings")
    parser.add_argument("--verbose", action="store_true",
                        help="log each request")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        server = serve(args.fixture_root, port=args.port,
                       failure_config=args.failure_config, host=args.host)
    except (FixtureError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    host, port = server.server_address[:2]
    logging.getLogger("toolserver").info("serving on http://%s:%s", host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
