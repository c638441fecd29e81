"""Voter profiles, scripted backend, extraction grammar, abstention."""

import numpy as np
import pytest

from sonagent.core import ImageRef, Query
from sonagent.deliberation import (
    PROFILE_IDS,
    ScriptedBackend,
    VoteRecord,
    load_voter_profiles,
    parse_vote_reply,
    render_voter_prompt,
    run_voters,
)
from sonagent.errors import MissingScript
from sonagent.orchestration import build_context


def img():
    return ImageRef(id="img-1", pixels=np.zeros((8, 8), dtype=np.uint8), spacing_mm_per_px=0.2)


def query(qid="q1"):
    return Query(
        id=qid,
        text="Does this scan represent the trans-thalamic plane?",
        options=(("A", "Yes"), ("B", "No")),
    )


def script_all(qid, key):
    return {qid: {pid: {"key": key, "rationale": f"{pid} says {key}"} for pid in PROFILE_IDS}}


def test_five_profiles_load_with_distinct_templates():
    profiles = load_voter_profiles()
    assert tuple(p.profile_id for p in profiles) == PROFILE_IDS
    assert len({p.template for p in profiles}) == 5
    for p in profiles:
        assert "{query_id}" in p.template and "{question}" in p.template


def test_scripted_unanimous_vote():
    q = query()
    ctx = build_context(q)
    votes, abstentions = run_voters(q, img(), ctx, ScriptedBackend(script_all("q1", "B")))
    assert len(votes) == 5 and not abstentions
    assert all(v.key == "B" for v in votes)
    assert tuple(v.profile_id for v in votes) == PROFILE_IDS


def test_scripted_split_preserves_per_profile_assignment():
    q = query()
    script = {"q1": {}}
    for pid, key in zip(PROFILE_IDS, ("A", "A", "A", "B", "B")):
        script["q1"][pid] = {"key": key, "rationale": "r"}
    votes, _ = run_voters(q, img(), ctx := build_context(q), ScriptedBackend(script))
    by_profile = {v.profile_id: v.key for v in votes}
    assert by_profile == dict(zip(PROFILE_IDS, ("A", "A", "A", "B", "B")))


def test_votes_plus_abstentions_total_five():
    q = query()
    script = script_all("q1", "A")
    script["q1"]["UncertaintyReviewer"] = "no stance taken here at all"  # unparseable raw reply
    votes, abstentions = run_voters(q, img(), build_context(q), ScriptedBackend(script))
    assert len(votes) + len(abstentions) == 5
    assert [a.profile_id for a in abstentions] == ["UncertaintyReviewer"]


def test_missing_script_raises():
    q = query()
    backend = ScriptedBackend({"other-query": {}})
    with pytest.raises(MissingScript):
        run_voters(q, img(), build_context(q), backend)


def test_extraction_grammar_primary_and_fallback():
    keys = ("A", "B", "C")
    assert parse_vote_reply("Answer: (C) because the thalami are visible", keys) == (
        "C",
        "because the thalami are visible",
    )
    key, rationale = parse_vote_reply("I would pick B given the cavum.", keys)
    assert key == "B"
    # lowercase markers or invalid keys defeat the grammar
    assert parse_vote_reply("answer is totally unclear", keys) is None
    assert parse_vote_reply("Answer: (Z) nope", ("A", "B")) is None


def test_prompt_contains_no_other_voter_content():
    q = query()
    ctx = build_context(q)
    profiles = load_voter_profiles()
    prompts = [render_voter_prompt(p, q, img(), ctx) for p in profiles]
    for i, prompt in enumerate(prompts):
        assert q.text in prompt
        assert "Query-Id: q1" in prompt
        for j, other in enumerate(PROFILE_IDS):
            if j != i:
                assert other not in prompt  # no cross-profile leakage


def test_scripted_runs_are_byte_identical():
    q = query()
    ctx = build_context(q)
    backend = ScriptedBackend(script_all("q1", "A"))
    first = run_voters(q, img(), ctx, backend)
    second = run_voters(q, img(), ctx, backend)
    assert first == second


def test_requires_options():
    q = Query(id="q2", text="caption this")
    with pytest.raises(ValueError):
        run_voters(q, img(), build_context(q), ScriptedBackend({}))


def test_vote_record_round_trip_dict():
    v = VoteRecord(profile_id="EvidenceSpecialist", key="A", rationale="clear rim")
    assert v.to_dict() == {
        "profile_id": "EvidenceSpecialist",
        "key": "A",
        "rationale": "clear rim",
    }
