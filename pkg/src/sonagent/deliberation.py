"""Five role-differentiated voter agents over a pluggable text backend.

Each voter sees the question, options, image reference, and structured
context, never another voter's output. The scripted backend replays canned
answers keyed by (profile, query), which keeps whole-pipeline runs
deterministic and offline; the remote backend speaks a chat-completion
style HTTP API.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from importlib import resources

from .core import Query
from .errors import BackendUnavailable, MissingScript

PROFILE_IDS = (
    "StructureSpecialist",
    "EvidenceSpecialist",
    "EliminationReasoner",
    "UncertaintyReviewer",
    "IntegratedJudgement",
)

_ANSWER_LINE = re.compile(r"Answer:\s*\(([A-Za-z])\)\s*(.*)", re.DOTALL)
_QUERY_ID_LINE = re.compile(r"^Query-Id:\s*(\S+)\s*$", re.MULTILINE)


@dataclass(frozen=True)
class VoterProfile:
    profile_id: str
    template: str

    def __post_init__(self):
        if self.profile_id not in PROFILE_IDS:
            raise ValueError(f"unknown voter profile {self.profile_id!r}")


@dataclass(frozen=True)
class VoteRecord:
    """One voter's committed answer; key is always a valid option key."""

    profile_id: str
    key: str
    rationale: str

    def to_dict(self) -> dict:
        return {"profile_id": self.profile_id, "key": self.key, "rationale": self.rationale}


@dataclass(frozen=True)
class Abstention:
    """A voter whose reply stayed unparseable after one retry."""

    profile_id: str
    raw_reply: str

    def to_dict(self) -> dict:
        return {"profile_id": self.profile_id, "raw_reply": self.raw_reply}


def load_voter_profiles(directory: str | None = None) -> tuple:
    """The five fixed profiles, templates read from editable text assets."""
    profiles = []
    for pid in PROFILE_IDS:
        if directory is None:
            ref = resources.files("sonagent.assets") / "voter_prompts" / f"{pid}.txt"
            template = ref.read_text(encoding="utf-8")
        else:
            with open(os.path.join(directory, f"{pid}.txt"), encoding="utf-8") as fh:
                template = fh.read()
        profiles.append(VoterProfile(profile_id=pid, template=template))
    return tuple(profiles)


def render_voter_prompt(profile: VoterProfile, query: Query, image, context) -> str:
    """Fill one profile's template; contains no other voter's output by construction."""
    options = "\n".join(f"({k}) {t}" for k, t in query.options)
    context_digest = json.dumps(context.to_dict(), sort_keys=True) if context else "{}"
    return profile.template.format(
        query_id=query.id,
        image_id=getattr(image, "id", "none"),
        question=query.text,
        options=options,
        context=context_digest,
    )


def parse_vote_reply(reply: str, option_keys: tuple) -> tuple | None:
    """Extract (key, rationale); None when the reply defeats the grammar.

    Primary form is a line "Answer: (<key>) rationale"; the fallback takes
    the first standalone valid option letter anywhere in the reply.
    """
    m = _ANSWER_LINE.search(reply)
    if m:
        key = m.group(1).upper()
        if key in option_keys:
            rationale = m.group(2).strip()
            return key, rationale if rationale else reply.strip()
    for token in re.finditer(r"\b([A-Z])\b", reply):
        if token.group(1) in option_keys:
            return token.group(1), reply.strip()
    return None


class ScriptedBackend:
    """Replays canned votes from a mapping {query id: {profile id: {key, rationale}}}."""

    mode = "Scripted"

    def __init__(self, script: dict):
        self.script = script

    @classmethod
    def from_file(cls, path: str) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def complete(self, profile_id: str, prompt: str) -> str:
        m = _QUERY_ID_LINE.search(prompt)
        if not m:
            raise MissingScript("prompt carries no Query-Id line")
        query_id = m.group(1)
        try:
            entry = self.script[query_id][profile_id]
        except KeyError as exc:
            raise MissingScript(f"no script for ({profile_id}, {query_id})") from exc
        if isinstance(entry, str):
            return entry  # raw canned reply, e.g. for malformed-output tests
        return f"Answer: ({entry['key']}) {entry.get('rationale', 'scripted rationale')}"


class RemoteBackend:
    """Chat-completion style HTTP backend; temperature 0 for reproducibility."""

    mode = "Remote"

    def __init__(
        self,
        endpoint: str,
        model: str,
        auth_env_var: str = "",
        temperature: float = 0.0,
        timeout_s: float = 30.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.auth_env_var = auth_env_var
        self.temperature = temperature
        self.timeout_s = timeout_s

    def complete(self, profile_id: str, prompt: str) -> str:
        import requests

        headers = {}
        if self.auth_env_var:
            token = os.environ.get(self.auth_env_var, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        body = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        last_exc = None
        for _ in range(2):  # one retry
            try:
                resp = requests.post(
                    self.endpoint, json=body, headers=headers, timeout=self.timeout_s
                )
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except Exception as exc:
                last_exc = exc
        raise BackendUnavailable(f"text backend failed after retry: {last_exc}") from last_exc


def complete(backend, profile_id: str, prompt: str) -> str:
    return backend.complete(profile_id, prompt)


def run_voters(
    query: Query,
    image,
    context,
    backend,
    profiles: tuple | None = None,
) -> tuple:
    """Collect the five independent votes; returns (votes, abstentions).

    Unparseable replies are retried once with the identical prompt and then
    recorded as abstentions, keeping tallies honest. Output order is
    normalized to the canonical profile order.
    """
    if not query.options:
        raise ValueError("deliberation requires a Specific query with options")
    profs = profiles or load_voter_profiles()
    votes, abstentions = [], []
    for profile in sorted(profs, key=lambda p: PROFILE_IDS.index(p.profile_id)):
        prompt = render_voter_prompt(profile, query, image, context)
        reply = backend.complete(profile.profile_id, prompt)
        parsed = parse_vote_reply(reply, query.option_keys)
        if parsed is None:
            reply = backend.complete(profile.profile_id, prompt)
            parsed = parse_vote_reply(reply, query.option_keys)
        if parsed is None:
            abstentions.append(Abstention(profile_id=profile.profile_id, raw_reply=reply))
        else:
            key, rationale = parsed
            votes.append(VoteRecord(profile_id=profile.profile_id, key=key, rationale=rationale))
    return votes, abstentions
