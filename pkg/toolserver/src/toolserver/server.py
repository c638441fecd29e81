"""Threaded HTTP server that replays fixture tool results.

Implements the wire protocol in PROTOCOL.md. A failure configuration
can degrade individual tools on purpose (slow replies, malformed
payloads, random server errors) so client fallback paths can be tested
over a real socket.
"""

from __future__ import annotations

import base64
import json
import logging
import random
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .store import FixtureStore

log = logging.getLogger("toolserver")

_INFER_PATH = re.compile(r"^/v1/tools/([^/]+)/infer$")
_FAILURE_KEYS = ("timeout_s", "malformed", "error_rate", "seed")
MALFORMED_SCORE_SUM = 0.8


class FailurePlan:
    """Per-tool failure injection, parsed once at startup.

    `timeout_s` maps tool id to a delay in seconds before replying,
    `malformed` lists tools whose payloads get corrupted per kind, and
    `error_rate` maps tool id to a probability of answering HTTP 500.
    """

    def __init__(self, config: dict | None):
        config = dict(config or {})
        unknown = set(config) - set(_FAILURE_KEYS)
        if unknown:
            raise ValueError(f"unknown failure config keys: {sorted(unknown)}")
        self.timeout_s = {str(k): float(v)
                          for k, v in dict(config.get("timeout_s", {})).items()}
        self.malformed = {str(t) for t in config.get("malformed", [])}
        self.error_rate = {str(k): float(v)
                           for k, v in dict(config.get("error_rate", {})).items()}
        self._rng = random.Random(int(config.get("seed", 0)))
        self._lock = threading.Lock()

    def should_error(self, tool_id: str) -> bool:
        rate = self.error_rate.get(tool_id, 0.0)
        if rate <= 0.0:
            return False
        with self._lock:
            return self._rng.random() < rate

    def corrupt(self, record: dict) -> dict:
        """Break the payload in the way its kind makes detectable."""
        rec = dict(record)
        if rec["kind"] == "label" and rec.get("scores"):
            total = sum(rec["scores"].values())
            rec["scores"] = {k: v * MALFORMED_SCORE_SUM / total
                             for k, v in rec["scores"].items()}
        elif rec["kind"] == "scalar":
            rec["unit"] = "furlongs"
        elif rec["kind"] == "mask":
            rec["mask_b64"] = rec["mask_b64"][: len(rec["mask_b64"]) // 2]
        return rec


def _make_handler(store: FixtureStore, plan: FailurePlan):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # route through logging, not stderr
            log.debug("%s %s", self.address_string(), fmt % args)

        def _reply(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _error(self, status: int, code: str, message: str) -> None:
            self._reply(status, {"error": {"code": code, "message": message}})

        def do_GET(self):
            if self.path == "/v1/health":
                self._reply(200, {"status": "ok"})
            else:
                self._error(404, "not_found", f"no such endpoint: {self.path}")

        def do_POST(self):
            match = _INFER_PATH.match(self.path)
            if not match:
                self._error(404, "not_found", f"no such endpoint: {self.path}")
                return
            tool_id = match.group(1)
            try:
                length = int(self.headers.get("Content-Length", "0"))
                request = json.loads(self.rfile.read(length))
                image_id = request["image_id"]
            except (ValueError, KeyError) as exc:
                self._error(400, "bad_request", f"unreadable request body: {exc}")
                return

            delay = plan.timeout_s.get(tool_id, 0.0)
            if delay > 0:
                time.sleep(delay)
            if plan.should_error(tool_id):
                self._error(500, "server_error",
                            f"injected failure for tool {tool_id!r}")
                return

            record = store.lookup(tool_id, image_id)
            if record is None:
                self._error(404, "missing_fixture",
                            f"no result for tool {tool_id!r}, image {image_id!r}")
                return
            mask_px = record.pop("_mask_px", None)
            image_px = len(base64.b64decode(request.get("image_b64", "")))
            if mask_px is not None and image_px and mask_px != image_px:
                self._error(500, "server_error",
                            f"fixture mask has {mask_px} px, image has {image_px}")
                return
            if tool_id in plan.malformed:
                record = plan.corrupt(record)
            self._reply(200, record)

    return Handler


def serve(fixture_root: str, port: int = 0, failure_config: dict | str | None = None,
          host: str = "127.0.0.1") -> ThreadingHTTPServer:
    """Bind and return the server; call serve_forever() to run it.

    Port 0 picks a free ephemeral port (read it back from
    `server.server_address`). Raises FixtureError on a broken fixture
    tree and OSError when the port is taken.
    """
    if isinstance(failure_config, str):
        with open(failure_config, encoding="utf-8") as fh:
            failure_config = json.load(fh)
    store = FixtureStore(fixture_root)
    plan = FailurePlan(failure_config)
    return ThreadingHTTPServer((host, port), _make_handler(store, plan))
