"""Query routing, structured context construction, and expert allocation.

The router is deliberately LLM-free: a fixed keyword table (shipped as an
editable JSON asset) resolves each question to a task kind, so routing is
a pure function of the query text and options.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources

from .core import (
    GeneralSubTask,
    Query,
    QueryRoute,
    RouteKind,
    TaskKind,
    Unit,
    VideoRef,
)
from .errors import NoMatchingExpert

_OPTION_MARKER = re.compile(r"\(([A-Z])\)")
_NUMBER = re.compile(r"\d+(?:\.\d+)?")

_UNIT_PATTERNS = (
    (Unit.MM, re.compile(r"\bmm\b")),
    (Unit.DEGREES, re.compile(r"\bdegrees?\b|°")),
    (Unit.CM2, re.compile(r"\bcm2\b|cm²")),
    (Unit.WEEKS, re.compile(r"\bweeks?\b")),
)

# fusion-module operations an ExpertSpec may name
FUSION_RULE_IDS = frozenset(
    {
        "pixel_majority_vote",
        "mask_majority_with_fallback",
        "sequential_prompt_pipeline",
        "agreement_fusion",
        "label_majority_vote",
        "median_outlier_correct",
        "consistency_weighted",
        "biometry_with_fallback",
    }
)


@dataclass(frozen=True)
class ExpertSpec:
    """One expert agent: a tool subset plus the fusion rule that joins them."""

    expert_id: str
    task: TaskKind
    tool_ids: tuple
    fusion_rule: str
    priority: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "tool_ids", tuple(self.tool_ids))
        if not self.tool_ids:
            raise ValueError("expert needs at least one tool")
        if self.fusion_rule not in FUSION_RULE_IDS:
            raise ValueError(f"unknown fusion rule {self.fusion_rule!r}")
        prio = tuple(self.priority) if self.priority else self.tool_ids
        if set(prio) != set(self.tool_ids):
            raise ValueError("priority must cover exactly the expert's tools")
        object.__setattr__(self, "priority", prio)

    def to_dict(self) -> dict:
        return {
            "expert_id": self.expert_id,
            "task": self.task.value,
            "tool_ids": list(self.tool_ids),
            "fusion_rule": self.fusion_rule,
            "priority": list(self.priority),
        }


@dataclass(frozen=True)
class QuestionContext:
    """Deterministic parse of a question: the structured context handed on."""

    text: str  # normalized (lowercased) question text
    options: tuple  # of (key, text)
    keywords: tuple  # matched lexicon phrases, lowercase
    units: tuple  # of Unit
    numbers: tuple  # numeric literals found in the question stem
    hypothesis: TaskKind = TaskKind.STANDARD_PLANE

    def __post_init__(self):
        if any(k != k.lower() for k in self.keywords):
            raise ValueError("keywords must be lowercase")

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "options": [{"key": k, "text": t} for k, t in self.options],
            "keywords": list(self.keywords),
            "units": [u.value for u in self.units],
            "numbers": list(self.numbers),
            "hypothesis": self.hypothesis.value,
        }


class RoutingLexicon:
    """Ordered keyword table mapping question text to a TaskKind."""

    def __init__(self, entries: list, fallback: TaskKind):
        self.entries = [(TaskKind(task), groups) for task, groups in entries]
        self.fallback = fallback

    @classmethod
    def from_file(cls, path=None) -> "RoutingLexicon":
        if path is None:
            ref = resources.files("sonagent.assets") / "routing_lexicon.json"
            raw = json.loads(ref.read_text(encoding="utf-8"))
        else:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        entries = [(e["task"], e["groups"]) for e in raw["entries"]]
        return cls(entries, TaskKind(raw["fallback"]))

    @staticmethod
    def _phrase_matches(phrase: str, corpus: str) -> bool:
        if phrase.isalpha():
            return re.search(rf"\b{re.escape(phrase)}\b", corpus) is not None
        return phrase in corpus

    def matched_keywords(self, corpus: str) -> tuple:
        found = []
        for _, groups in self.entries:
            for group in groups:
                for phrase in group:
                    if phrase not in found and self._phrase_matches(phrase, corpus):
                        found.append(phrase)
        return tuple(found)

    def resolve(self, corpus: str) -> TaskKind:
        for task, groups in self.entries:
            if all(
                any(self._phrase_matches(p, corpus) for p in group)
                for group in groups
            ):
                return task
        return self.fallback


_DEFAULT_LEXICON = None


def default_lexicon() -> RoutingLexicon:
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = RoutingLexicon.from_file()
    return _DEFAULT_LEXICON


def route_query(query: Query) -> QueryRoute:
    """Split queries into Specific (option answering) vs General (open-ended)."""
    markers = set(_OPTION_MARKER.findall(query.text))
    if query.options or len(markers) >= 2:
        return QueryRoute(kind=RouteKind.SPECIFIC)
    has_video = any(isinstance(a, VideoRef) for a in query.attachments)
    sub = GeneralSubTask.VIDEO_SUMMARY if has_video else GeneralSubTask.CAPTION
    return QueryRoute(kind=RouteKind.GENERAL, sub_task=sub)


def build_context(query: Query, image=None, lexicon: RoutingLexicon | None = None) -> QuestionContext:
    """Parse the question into keywords, units, numbers, and a task hypothesis.

    Pure and deterministic: same query always yields an identical context.
    The keyword corpus covers the stem plus option texts so unit-bearing
    options (for example "18–20 weeks") can inform routing.
    """
    lex = lexicon or default_lexicon()
    text = query.text.lower()
    corpus = " ".join([text] + [t.lower() for _, t in query.options])
    units = tuple(u for u, pat in _UNIT_PATTERNS if pat.search(corpus))
    numbers = tuple(float(n) for n in _NUMBER.findall(text))
    return QuestionContext(
        text=text,
        options=tuple(query.options),
        keywords=lex.matched_keywords(corpus),
        units=units,
        numbers=numbers,
        hypothesis=lex.resolve(corpus),
    )


def allocate_task(query: Query, context: QuestionContext, registry: list) -> tuple:
    """Resolve the task kind and select every registered expert covering it."""
    if not registry:
        raise NoMatchingExpert("expert registry is empty")
    task = context.hypothesis
    selected = [spec for spec in registry if spec.task is task]
    if not selected:
        raise NoMatchingExpert(f"no registered expert covers task {task.value}")
    return task, selected
