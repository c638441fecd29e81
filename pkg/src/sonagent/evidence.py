"""Append-only evidence bank plus the retrieval subsystem.

The bank consolidates one run's intermediate findings: the structured
context, voter records, fused tool evidence, and retrieved knowledge
snippets. General (open-ended) runs carry no voter records at all, and the
bank enforces that. Retrieval is exact cosine scan over hashed-token
embeddings, so results are reproducible offline.
"""

from __future__ import annotations

import hashlib
import os
import re
import threading
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import canonical_json
from .errors import BackendUnavailable, EmptyIndex, ModeViolation

VALID_TAGS = ("context", "vote", "tool", "rag")
_SECTION_FOR_TAG = {"context": "context", "vote": "votes", "tool": "tools", "rag": "rag"}

DEFAULT_CHUNK_SIZE = 800
DEFAULT_CHUNK_OVERLAP = 120
DEFAULT_EMBED_DIM = 4096
DEFAULT_TOP_K = 5


class BankMode(str, Enum):
    SPECIFIC_TASK = "SpecificTask"
    GENERAL_TASK = "GeneralTask"


@dataclass(frozen=True)
class EvidenceEntry:
    """One immutable bank record; payload must be JSON-serializable."""

    id: int
    tag: str
    payload: dict

    def to_dict(self) -> dict:
        return {"id": self.id, "tag": self.tag, "payload": self.payload}


class EvidenceBank:
    """Append-only log of tagged evidence with strictly increasing ids."""

    def __init__(self, run_id: str, mode: BankMode = BankMode.SPECIFIC_TASK):
        self.run_id = run_id
        self.mode = BankMode(mode)
        self._entries: list = []
        self._next_id = 1
        self._lock = threading.Lock()

    def append(self, tag: str, payload: dict) -> int:
        if tag not in VALID_TAGS:
            raise ValueError(f"unknown evidence tag {tag!r}")
        if self.mode is BankMode.GENERAL_TASK and tag == "vote":
            raise ModeViolation("GeneralTask banks accept no vote entries")
        with self._lock:
            entry = EvidenceEntry(id=self._next_id, tag=tag, payload=payload)
            self._entries.append(entry)
            self._next_id += 1
            return entry.id

    @property
    def entries(self) -> tuple:
        return tuple(self._entries)

    def section(self, tag: str) -> tuple:
        return tuple(e for e in self._entries if e.tag == tag)

    def get(self, entry_id: int):
        for e in self._entries:
            if e.id == entry_id:
                return e
        return None

    def snapshot(self) -> str:
        """Canonical JSON serialization; loading and re-saving is byte-identical."""
        doc = {
            "run_id": self.run_id,
            "mode": self.mode.value,
            "context": [],
            "votes": [],
            "tools": [],
            "rag": [],
        }
        for e in self._entries:
            doc[_SECTION_FOR_TAG[e.tag]].append(e.to_dict())
        return canonical_json(doc)

    @classmethod
    def load_snapshot(cls, text: str) -> "EvidenceBank":
        import json

        doc = json.loads(text)
        bank = cls(run_id=doc["run_id"], mode=BankMode(doc["mode"]))
        entries = []
        for section in ("context", "votes", "tools", "rag"):
            for rec in doc.get(section, []):
                entries.append(EvidenceEntry(id=rec["id"], tag=rec["tag"], payload=rec["payload"]))
        entries.sort(key=lambda e: e.id)
        bank._entries = entries
        bank._next_id = (entries[-1].id + 1) if entries else 1
        return bank


def bank_append(bank: EvidenceBank, tag: str, payload: dict) -> int:
    return bank.append(tag, payload)


def bank_snapshot(bank: EvidenceBank) -> str:
    return bank.snapshot()


@dataclass(frozen=True)
class KnowledgeChunk:
    """A contiguous span of one source document."""

    chunk_id: int
    doc_id: str
    start: int
    end: int
    text: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("chunk text must be non-empty")

    def to_dict(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "start": self.start,
            "end": self.end,
            "text": self.text,
        }


def chunk_documents(
    documents: list,
    size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_CHUNK_OVERLAP,
) -> list:
    """Sliding-window chunking, snapping to paragraph breaks where possible.

    `documents` is a list of (doc id, text). Chunks of one document overlap
    by `overlap` characters and their spans tile [0, len(text)). A paragraph
    boundary ("\\n\\n") inside a window pulls the window's end back to just
    after the break, provided the chunk keeps making forward progress.
    """
    if not (size > overlap >= 0):
        raise ValueError("requires size > overlap >= 0")
    chunks = []
    next_id = 0
    for doc_id, text in documents:
        if not text:
            continue
        start = 0
        while True:
            end = min(start + size, len(text))
            if end < len(text):
                brk = text.rfind("\n\n", start, end)
                if brk != -1 and brk + 2 > start + overlap and brk + 2 < end:
                    end = brk + 2
            chunks.append(
                KnowledgeChunk(
                    chunk_id=next_id, doc_id=doc_id, start=start, end=end,
                    text=text[start:end],
                )
            )
            next_id += 1
            if end >= len(text):
                break
            start = end - overlap
    return chunks


_TOKEN = re.compile(r"[a-z0-9]+")


def _hash_bucket(token: str, dimension: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dimension


class DeterministicHashEmbedder:
    """Token-count embedding over hashed buckets; stable across platforms."""

    def __init__(self, dimension: int = DEFAULT_EMBED_DIM):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("text must be non-empty")
        vec = np.zeros(self.dimension, dtype=np.float64)
        for token in _TOKEN.findall(text.lower()):
            vec[_hash_bucket(token, self.dimension)] += 1.0
        norm = float(np.linalg.norm(vec))
        return vec / norm if norm > 0 else vec


class RemoteEmbedder:
    """Thin client for an embedding endpoint returning {"embedding": [...]}."""

    def __init__(self, endpoint: str, model: str, dimension: int, timeout_s: float = 10.0):
        self.endpoint = endpoint
        self.model = model
        self.dimension = dimension
        self.timeout_s = timeout_s

    def embed(self, text: str) -> np.ndarray:
        import requests

        if not text:
            raise ValueError("text must be non-empty")
        try:
            resp = requests.post(
                self.endpoint,
                json={"model": self.model, "input": text},
                timeout=self.timeout_s,
            )
            resp.raise_for_status()
            vec = np.asarray(resp.json()["embedding"], dtype=np.float64)
        except Exception as exc:
            raise BackendUnavailable(f"embedding endpoint failed: {exc}") from exc
        if vec.shape != (self.dimension,):
            raise BackendUnavailable(
                f"embedding dimension {vec.shape} != configured {self.dimension}"
            )
        norm = float(np.linalg.norm(vec))
        return vec / norm if norm > 0 else vec


class KnowledgeIndex:
    """Exact cosine index: build once, then concurrent reads."""

    def __init__(self, chunks: list, embedder):
        self.chunks = list(chunks)
        self.embedder = embedder
        if self.chunks:
            self._matrix = np.stack([embedder.embed(c.text) for c in self.chunks])
        else:
            self._matrix = np.zeros((0, getattr(embedder, "dimension", 0)))

    def __len__(self) -> int:
        return len(self.chunks)

    def retrieve(self, query_text: str, k: int = DEFAULT_TOP_K) -> list:
        """Top-k chunks by cosine similarity, ties broken by chunk id ascending."""
        if not self.chunks:
            raise EmptyIndex("cannot retrieve from an empty index")
        if k < 1:
            raise ValueError("k must be >= 1")
        q = self.embedder.embed(query_text)
        scores = self._matrix @ q
        order = sorted(range(len(self.chunks)), key=lambda i: (-scores[i], self.chunks[i].chunk_id))
        return [(self.chunks[i], float(scores[i])) for i in order[: min(k, len(self.chunks))]]


def retrieve(index: KnowledgeIndex, query_text: str, k: int = DEFAULT_TOP_K) -> list:
    return index.retrieve(query_text, k)


def load_knowledge_dir(path: str) -> list:
    """Read a directory of plain-text documents; doc id is the filename."""
    documents = []
    for name in sorted(os.listdir(path)):
        full = os.path.join(path, name)
        if os.path.isfile(full):
            with open(full, encoding="utf-8") as fh:
                documents.append((name, fh.read()))
    return documents
