"""Shared domain types: queries, images, masks, tasks, and measurements.

Everything here is immutable after construction and safe to share across
concurrent workers. Each type serializes to a plain dict whose canonical
JSON form round-trips byte-identically.
"""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class TaskKind(str, Enum):
    STANDARD_PLANE = "StandardPlane"
    BRAIN_SUBPLANE = "BrainSubplane"
    HEAD_SEG = "HeadSeg"
    ABDOMEN_SEG = "AbdomenSeg"
    STOMACH_SEG = "StomachSeg"
    AOP = "AoP"
    GA = "GA"
    HC = "HC"
    AC = "AC"


class Unit(str, Enum):
    MM = "mm"
    DEGREES = "degrees"
    CM2 = "cm2"
    WEEKS = "weeks"


#: Unit each measurement-producing task must carry.
UNIT_FOR_TASK = {
    TaskKind.HC: Unit.MM,
    TaskKind.AC: Unit.MM,
    TaskKind.AOP: Unit.DEGREES,
    TaskKind.STOMACH_SEG: Unit.CM2,
    TaskKind.GA: Unit.WEEKS,
}


class RouteKind(str, Enum):
    SPECIFIC = "Specific"
    GENERAL = "General"


class GeneralSubTask(str, Enum):
    CAPTION = "Caption"
    VIDEO_SUMMARY = "VideoSummary"


@dataclass(frozen=True)
class QueryRoute:
    """Coordinator routing outcome; sub-task is present iff the route is General."""

    kind: RouteKind
    sub_task: GeneralSubTask | None = None

    def __post_init__(self):
        if (self.kind is RouteKind.GENERAL) != (self.sub_task is not None):
            raise ValueError("sub_task present iff route is General")

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value}
        if self.sub_task is not None:
            d["sub_task"] = self.sub_task.value
        return d


def _frozen_u8(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ImageRef:
    """A single 8-bit grayscale frame with isotropic mm-per-pixel spacing."""

    id: str
    pixels: np.ndarray  # HxW uint8
    spacing_mm_per_px: float
    source_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "pixels", _frozen_u8(self.pixels, np.uint8))
        if self.pixels.ndim != 2 or self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError("pixels must be a non-empty 2-D raster")
        if not (self.spacing_mm_per_px > 0):
            raise ValueError("spacing must be > 0 mm/px")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "spacing_mm_per_px": self.spacing_mm_per_px,
            "pixels_b64": base64.b64encode(self.pixels.tobytes()).decode("ascii"),
            "source_path": self.source_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRef":
        raw = base64.b64decode(d["pixels_b64"])
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(d["height"], d["width"])
        return cls(
            id=d["id"],
            pixels=pixels,
            spacing_mm_per_px=d["spacing_mm_per_px"],
            source_path=d.get("source_path"),
        )


@dataclass(frozen=True)
class VideoRef:
    """An ordered sequence of same-size uint8 frames with shared spacing."""

    id: str
    frames: tuple  # of HxW uint8 arrays
    frame_rate: float
    spacing_mm_per_px: float = 0.1

    def __post_init__(self):
        object.__setattr__(
            self, "frames", tuple(_frozen_u8(f, np.uint8) for f in self.frames)
        )
        if len(self.frames) < 1:
            raise ValueError("video needs at least one frame")
        shape = self.frames[0].shape
        if any(f.shape != shape for f in self.frames):
            raise ValueError("all frames must share dimensions")
        if not (self.frame_rate > 0):
            raise ValueError("frame rate must be > 0")
        if not (self.spacing_mm_per_px > 0):
            raise ValueError("spacing must be > 0 mm/px")

    def frame_image(self, index: int) -> ImageRef:
        """View one frame as a standalone image (id carries the frame index)."""
        return ImageRef(
            id=f"{self.id}#{index:04d}",
            pixels=self.frames[index],
            spacing_mm_per_px=self.spacing_mm_per_px,
        )

    def to_dict(self) -> dict:
        h, w = self.frames[0].shape
        return {
            "id": self.id,
            "frame_rate": self.frame_rate,
            "spacing_mm_per_px": self.spacing_mm_per_px,
            "width": w,
            "height": h,
            "frames_b64": [
                base64.b64encode(f.tobytes()).decode("ascii") for f in self.frames
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VideoRef":
        h, w = d["height"], d["width"]
        frames = tuple(
            np.frombuffer(base64.b64decode(b), dtype=np.uint8).reshape(h, w)
            for b in d["frames_b64"]
        )
        return cls(
            id=d["id"],
            frames=frames,
            frame_rate=d["frame_rate"],
            spacing_mm_per_px=d["spacing_mm_per_px"],
        )


def encode_mask_bits(data: np.ndarray) -> str:
    """Pack a boolean raster row-major into base64; the wire form of a mask."""
    return base64.b64encode(np.packbits(data.astype(np.uint8), axis=None).tobytes()).decode("ascii")


def decode_mask_bits(b64: str, width: int, height: int) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(b64), dtype=np.uint8)
    bits = np.unpackbits(raw)[: width * height]
    if bits.size != width * height:
        raise ValueError("mask payload shorter than declared dimensions")
    return bits.reshape(height, width).astype(bool)


@dataclass(frozen=True)
class Mask:
    """Binary segmentation raster; dimensions always equal the source image's."""

    width: int
    height: int
    data: np.ndarray  # HxW bool
    spacing_mm_per_px: float

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen_u8(self.data, bool))
        if self.data.shape != (self.height, self.width):
            raise ValueError("mask data shape does not match declared dimensions")
        if not (self.spacing_mm_per_px > 0):
            raise ValueError("spacing must be > 0 mm/px")

    @classmethod
    def for_image(cls, image: ImageRef, data: np.ndarray) -> "Mask":
        data = np.asarray(data, dtype=bool)
        if data.shape != (image.height, image.width):
            raise ValueError(
                f"mask shape {data.shape} does not match image "
                f"{(image.height, image.width)}"
            )
        return cls(
            width=image.width,
            height=image.height,
            data=data,
            spacing_mm_per_px=image.spacing_mm_per_px,
        )

    @property
    def area_px(self) -> int:
        return int(self.data.sum())

    @property
    def area_cm2(self) -> float:
        return self.area_px * self.spacing_mm_per_px**2 / 100.0

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "spacing_mm_per_px": self.spacing_mm_per_px,
            "bits_b64": encode_mask_bits(self.data),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mask":
        return cls(
            width=d["width"],
            height=d["height"],
            data=decode_mask_bits(d["bits_b64"], d["width"], d["height"]),
            spacing_mm_per_px=d["spacing_mm_per_px"],
        )


_OPTION_KEY_RE = re.compile(r"^[A-Z]$")


@dataclass(frozen=True)
class Query:
    """A user request: free text, optional keyed options, optional attachments."""

    id: str
    text: str
    options: tuple = ()  # ((key, text), ...)
    attachments: tuple = ()  # ImageRef / VideoRef

    def __post_init__(self):
        object.__setattr__(self, "options", tuple((k, t) for k, t in self.options))
        object.__setattr__(self, "attachments", tuple(self.attachments))
        if not self.text.strip():
            raise ValueError("query text must be non-empty")
        keys = [k for k, _ in self.options]
        expected = [chr(ord("A") + i) for i in range(len(keys))]
        if keys != expected:
            raise ValueError(f"option keys must be contiguous from 'A', got {keys}")
        for k in keys:
            if not _OPTION_KEY_RE.match(k):
                raise ValueError(f"bad option key {k!r}")

    @property
    def option_keys(self) -> tuple:
        return tuple(k for k, _ in self.options)

    def first_image(self) -> ImageRef | None:
        for a in self.attachments:
            if isinstance(a, ImageRef):
                return a
        return None

    def first_video(self) -> VideoRef | None:
        for a in self.attachments:
            if isinstance(a, VideoRef):
                return a
        return None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "options": [{"key": k, "text": t} for k, t in self.options],
            "attachments": [
                {"type": "video" if isinstance(a, VideoRef) else "image", **a.to_dict()}
                for a in self.attachments
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Query":
        attachments = []
        for a in d.get("attachments", []):
            a = dict(a)
            kind = a.pop("type", "image")
            attachments.append(VideoRef.from_dict(a) if kind == "video" else ImageRef.from_dict(a))
        return cls(
            id=d["id"],
            text=d["text"],
            options=tuple((o["key"], o["text"]) for o in d.get("options", [])),
            attachments=tuple(attachments),
        )


@dataclass(frozen=True)
class Measurement:
    """A unit-carrying biometric value with its fusion/tool provenance."""

    value: float
    unit: Unit
    provenance: str

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("measurement value must be finite")

    def check_task(self, task: TaskKind) -> "Measurement":
        expected = UNIT_FOR_TASK.get(task)
        if expected is not None and self.unit is not expected:
            raise ValueError(f"{task.value} expects {expected.value}, got {self.unit.value}")
        return self

    def to_dict(self) -> dict:
        return {"value": self.value, "unit": self.unit.value, "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict) -> "Measurement":
        return cls(value=d["value"], unit=Unit(d["unit"]), provenance=d["provenance"])


def canonical_json(obj) -> str:
    """Deterministic JSON used everywhere a byte-identical round trip matters."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def format_number(x) -> str:
    """Render a numeric value exactly as it appears in canonical JSON.

    Report text must use this so every printed numeral matches the cited
    bank entry's serialized form.
    """
    return json.dumps(x)
