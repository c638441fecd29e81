"""Final-decision arbitration over votes and tool evidence.

The deterministic policy is a fixed precedence ladder: a tool measurement
that lands in an option interval wins outright; otherwise a matched tool
label votes with configurable weight alongside the five unit-weight voter
ballots; ties favor the tool; with no usable tool evidence the voter
plurality stands. An LLM-arbitrated mode can be layered on top, falling
back to the deterministic policy whenever its reply defeats parsing.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

from .core import Measurement, Unit
from .errors import NoEvidence, UnparseableOptions

W_TOOL_DEFAULT = 3

_RANGE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*[–—-]\s*(\d+(?:\.\d+)?)\s*(.*?)\s*$")
_SINGLE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(.*?)\s*$")

_UNIT_ALIASES = {
    "mm": Unit.MM,
    "millimeters": Unit.MM,
    "millimetres": Unit.MM,
    "degrees": Unit.DEGREES,
    "degree": Unit.DEGREES,
    "°": Unit.DEGREES,
    "deg": Unit.DEGREES,
    "cm2": Unit.CM2,
    "cm²": Unit.CM2,
    "weeks": Unit.WEEKS,
    "week": Unit.WEEKS,
    "wk": Unit.WEEKS,
}


class DecisionMode(str, Enum):
    DETERMINISTIC = "Deterministic"
    LLM_ARBITRATED = "LlmArbitrated"


@dataclass(frozen=True)
class FinalDecision:
    key: str
    mode: DecisionMode
    justification: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"key": self.key, "mode": self.mode.value, "justification": self.justification}


def _parse_unit(text: str):
    return _UNIT_ALIASES.get(text.strip().lower())


def _parse_option_value(text: str):
    """Return ("range", lo, hi, unit) or ("single", x, None, unit) or None."""
    m = _RANGE.match(text)
    if m:
        return "range", float(m.group(1)), float(m.group(2)), _parse_unit(m.group(3))
    m = _SINGLE.match(text)
    if m and m.group(2):
        return "single", float(m.group(1)), None, _parse_unit(m.group(2))
    return None


def map_measurement_to_option(measurement: Measurement, options: list):
    """Match a measurement to the option interval containing it.

    Ranges are half-open [lo, hi); single values match within half the
    smallest gap between the single-valued options (unbounded when only
    one is numeric). Returns the option key or None when no interval
    contains the value.
    """
    if not options:
        raise ValueError("options must be non-empty")
    parsed = []
    any_numeric = False
    for key, text in options:
        p = _parse_option_value(text)
        if p is not None:
            any_numeric = True
            if p[3] is measurement.unit:
                parsed.append((key, p))
    if not any_numeric:
        raise UnparseableOptions("no option text contains a numeric value")
    singles = sorted(p[1] for _, p in parsed if p[0] == "single")
    if len(singles) >= 2:
        tol = min(b - a for a, b in zip(singles, singles[1:])) / 2.0
    else:
        tol = float("inf")
    v = measurement.value
    for key, (kind, lo, hi, _) in parsed:
        if kind == "range" and lo <= v < hi:
            return key
        if kind == "single" and abs(v - lo) < tol:
            return key
    return None


class SynonymTable:
    """Label equivalence classes for matching tool labels to option texts."""

    def __init__(self, synonyms: dict):
        self._canonical = {}
        for canonical, forms in synonyms.items():
            c = self._norm(canonical)
            self._canonical[c] = c
            for form in forms:
                self._canonical[self._norm(form)] = c

    @staticmethod
    def _norm(text: str) -> str:
        return re.sub(r"\s+", " ", text.strip().lower())

    @classmethod
    def from_asset(cls) -> "SynonymTable":
        ref = resources.files("sonagent.assets") / "label_synonyms.json"
        raw = json.loads(ref.read_text(encoding="utf-8"))
        return cls(raw["synonyms"])

    @classmethod
    def from_file(cls, path: str) -> "SynonymTable":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh)["synonyms"])

    def canonical(self, text: str) -> str:
        n = self._norm(text)
        return self._canonical.get(n, n)

    def label_matches_option(self, label: str, option_text: str) -> bool:
        lab = self.canonical(label)
        opt = self.canonical(option_text)
        if lab == opt:
            return True
        # label appearing as a whole word inside a longer option text
        return re.search(rf"\b{re.escape(lab)}\b", opt) is not None


_DEFAULT_SYNONYMS = None


def default_synonyms() -> SynonymTable:
    global _DEFAULT_SYNONYMS
    if _DEFAULT_SYNONYMS is None:
        _DEFAULT_SYNONYMS = SynonymTable.from_asset()
    return _DEFAULT_SYNONYMS


def _citation_ids(bank, e_vote, matched_tool_experts) -> dict:
    """Resolve bank entry ids for the evidence actually used."""
    cites = {"votes": [], "tally": None, "tools": [], "rag": []}
    if bank is None:
        return cites
    vote_profiles = {v.profile_id for v in e_vote}
    for entry in bank.entries:
        payload = entry.payload
        if entry.tag == "vote":
            if payload.get("kind") == "tally":
                cites["tally"] = entry.id
            elif payload.get("profile_id") in vote_profiles:
                cites["votes"].append(entry.id)
        elif entry.tag == "tool" and payload.get("expert_id") in matched_tool_experts:
            cites["tools"].append(entry.id)
        elif entry.tag == "rag":
            cites["rag"].append(entry.id)
    return cites


def _deterministic(e_vote, e_tool, bank, options, w_tool, synonyms) -> FinalDecision:
    option_keys = [k for k, _ in options]

    # (a) measurement evidence mapped through an option interval wins outright
    for ev in e_tool:
        fused = ev.fused
        if isinstance(fused, Measurement):
            try:
                key = map_measurement_to_option(fused, options)
            except UnparseableOptions:
                continue
            if key is not None:
                cites = _citation_ids(bank, [], {ev.expert_id})
                return FinalDecision(
                    key=key,
                    mode=DecisionMode.DETERMINISTIC,
                    justification={
                        "rule": "measurement_interval",
                        "expert_id": ev.expert_id,
                        "value": fused.value,
                        "unit": fused.unit.value,
                        "matched_option": key,
                        "citations": cites,
                    },
                )

    # (b) matched tool labels vote with weight w_tool next to the unit votes
    counts = Counter(v.key for v in e_vote)
    tool_backed = {}
    for ev in e_tool:
        fused = ev.fused
        if isinstance(fused, str):
            for key, text in options:
                if synonyms.label_matches_option(fused, text):
                    counts[key] += w_tool
                    tool_backed.setdefault(key, []).append(ev.expert_id)
                    break

    if tool_backed:
        top = max(counts.values())
        tied = sorted(k for k, c in counts.items() if c == top)
        tool_tied = [k for k in tied if k in tool_backed]
        # (c) ties favor the tool-backed option
        key = tool_tied[0] if tool_tied else tied[0]
        matched_experts = {e for k in tool_backed for e in tool_backed[k]}
        cites = _citation_ids(bank, e_vote, matched_experts)
        return FinalDecision(
            key=key,
            mode=DecisionMode.DETERMINISTIC,
            justification={
                "rule": "weighted_plurality" if len(tied) == 1 else "tie_tool_preference",
                "tally": dict(sorted(counts.items())),
                "w_tool": w_tool,
                "tool_backed": {k: v for k, v in sorted(tool_backed.items())},
                "citations": cites,
            },
        )

    # (d) no usable tool evidence: voter plurality, lexicographic tie-break
    if counts:
        top = max(counts.values())
        key = min(k for k, c in counts.items() if c == top)
        rule = "vote_plurality"
    else:
        key = min(option_keys)
        rule = "default_first_option"
    cites = _citation_ids(bank, e_vote, set())
    return FinalDecision(
        key=key,
        mode=DecisionMode.DETERMINISTIC,
        justification={
            "rule": rule,
            "tally": dict(sorted(counts.items())),
            "citations": cites,
        },
    )


def render_arbiter_prompt(e_vote, e_tool, options, bank) -> str:
    lines = ["Decide the final answer from the evidence digest below.", ""]
    lines.append("Options:")
    lines.extend(f"({k}) {t}" for k, t in options)
    lines.append("")
    lines.append("Voter ballots:")
    for v in e_vote:
        lines.append(f"- {v.profile_id}: ({v.key}) {v.rationale}")
    lines.append("Tool evidence:")
    for ev in e_tool:
        fused = ev.fused
        if isinstance(fused, Measurement):
            lines.append(f"- {ev.expert_id}: {fused.value} {fused.unit.value}")
        elif isinstance(fused, str):
            lines.append(f"- {ev.expert_id}: label {fused}")
        else:
            lines.append(f"- {ev.expert_id}: segmentation mask")
    if bank is not None:
        lines.append(f"Evidence bank entries: {len(bank.entries)}")
    lines.append("")
    lines.append("Reply with exactly one line of the form: Answer: (<letter>) <short rationale>")
    return "\n".join(lines)


def arbitrate(
    e_vote: list,
    e_tool: list,
    bank,
    options: list,
    mode: DecisionMode = DecisionMode.DETERMINISTIC,
    w_tool: int = W_TOOL_DEFAULT,
    synonyms: SynonymTable | None = None,
    backend=None,
) -> FinalDecision:
    """Combine deliberative votes and tool evidence into the final option key."""
    if not e_vote and not e_tool:
        raise NoEvidence("arbitration requires votes or tool evidence")
    syn = synonyms or default_synonyms()
    if mode is DecisionMode.LLM_ARBITRATED and backend is not None:
        from .deliberation import parse_vote_reply

        prompt = render_arbiter_prompt(e_vote, e_tool, options, bank)
        reply = backend.complete("Arbiter", prompt)
        parsed = parse_vote_reply(reply, tuple(k for k, _ in options))
        if parsed is not None:
            key, rationale = parsed
            cites = _citation_ids(bank, e_vote, {ev.expert_id for ev in e_tool})
            return FinalDecision(
                key=key,
                mode=DecisionMode.LLM_ARBITRATED,
                justification={"rule": "llm", "rationale": rationale, "citations": cites},
            )
    return _deterministic(e_vote, e_tool, bank, options, w_tool, syn)
