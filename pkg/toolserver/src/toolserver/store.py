"""Read-only fixture store backing the playback server.

The on-disk layout and the response schema are defined in PROTOCOL.md
at the repository root. The store is fully indexed at construction and
never mutated afterwards, so request handlers can share it freely
across threads.
"""

from __future__ import annotations

import base64
import json
import os

import numpy as np
from PIL import Image

_ALLOWED_KINDS = ("label", "mask", "scalar")


class FixtureError(Exception):
    """The fixture tree is unreadable or internally inconsistent."""


def encode_mask_png(png_path: str) -> tuple:
    """Wire-encode a mask PNG; returns (mask_b64, width, height)."""
    with Image.open(png_path) as img:
        data = np.asarray(img.convert("L")) > 0
    packed = np.packbits(data.astype(np.uint8), axis=None)
    return base64.b64encode(packed.tobytes()).decode("ascii"), data.shape[1], data.shape[0]


class FixtureStore:
    """Maps (tool_id, image_id) to a stored tool result.

    Construction scans the whole tree so a broken bundle fails the
    server at startup instead of on the first unlucky request.
    """

    def __init__(self, root: str):
        tools_dir = os.path.join(root, "tools")
        if not os.path.isdir(tools_dir):
            raise FixtureError(f"no tools/ directory under {root!r}")
        self.root = root
        self._index: dict = {}
        for tool_id in sorted(os.listdir(tools_dir)):
            tool_dir = os.path.join(tools_dir, tool_id)
            if not os.path.isdir(tool_dir):
                continue
            for name in sorted(os.listdir(tool_dir)):
                if not name.endswith(".json"):
                    continue
                image_id = name[: -len(".json")]
                path = os.path.join(tool_dir, name)
                self._check(path)
                self._index[(tool_id, image_id)] = path

    def _check(self, path: str) -> None:
        try:
            with open(path, encoding="utf-8") as fh:
                rec = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise FixtureError(f"unreadable fixture {path}: {exc}") from exc
        if rec.get("kind") not in _ALLOWED_KINDS:
            raise FixtureError(f"{path}: unknown kind {rec.get('kind')!r}")
        if rec["kind"] == "mask":
            mask_path = os.path.join(self.root, rec.get("mask_file", ""))
            try:
                with Image.open(mask_path) as img:
                    img.verify()
            except (OSError, SyntaxError) as exc:
                raise FixtureError(f"{path}: bad mask file: {exc}") from exc

    def __len__(self) -> int:
        return len(self._index)

    def tool_ids(self) -> list:
        return sorted({tool for tool, _ in self._index})

    def lookup(self, tool_id: str, image_id: str):
        """The wire-ready response dict, or None when unmapped.

        Mask fixtures are converted from their PNG file to `mask_b64`
        here; the private `_mask_px` annotation carries the decoded
        pixel count so the handler can reject a size mismatch against
        the request image before replying.
        """
        path = self._index.get((tool_id, image_id))
        if path is None:
            return None
        with open(path, encoding="utf-8") as fh:
            rec = json.load(fh)
        if rec["kind"] == "mask":
            mask_b64, width, height = encode_mask_png(
                os.path.join(self.root, rec.pop("mask_file")))
            rec["mask_b64"] = mask_b64
            rec["_mask_px"] = width * height
        return rec
