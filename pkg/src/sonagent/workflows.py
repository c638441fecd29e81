"""End-to-end workflows: option QA, image captioning, and video summary.

Each workflow drives the same pipeline pieces (routing, experts, voters,
arbitration, reporting) and leaves a complete audit trail in an evidence
bank, so every number in the output can be traced to a bank entry.
"""

import json
from dataclasses import dataclass, field
from datetime import date
from importlib import resources

from .arbitration import (
    W_TOOL_DEFAULT,
    DecisionMode,
    SynonymTable,
    arbitrate,
    default_synonyms,
)
from .core import ImageRef, Measurement, Query, RouteKind, TaskKind, VideoRef
from .deliberation import load_voter_profiles, run_voters
from .errors import (
    AllToolsFailed,
    ConfigError,
    EmptyVideo,
    MissingFixture,
    SonagentError,
    ToolUnavailable,
)
from .evidence import DEFAULT_TOP_K, EvidenceBank
from .orchestration import (
    ExpertSpec,
    RoutingLexicon,
    allocate_task,
    build_context,
    default_lexicon,
    route_query,
)
from .reporting import Finding, consistency_check_and_reflect, generate_report
from .toolkit import ToolRegistry, invoke_expert, invoke_tool

KEYFRAME_TAU_DEFAULT = 0.5
KEYFRAME_WINDOW_DEFAULT = 15
KEYFRAME_MAX_PER_PLANE_DEFAULT = 3
GA_DISCREPANCY_WEEKS = 2.0

# the standard tool battery: (tool id, task served, output kind)
DEFAULT_TOOL_TABLE = (
    ("plane-clf-a", TaskKind.STANDARD_PLANE, "label"),
    ("plane-clf-b", TaskKind.STANDARD_PLANE, "label"),
    ("plane-clf-c", TaskKind.STANDARD_PLANE, "label"),
    ("plane-clf-d", TaskKind.STANDARD_PLANE, "label"),
    ("brain-clf-a", TaskKind.BRAIN_SUBPLANE, "label"),
    ("brain-clf-b", TaskKind.BRAIN_SUBPLANE, "label"),
    ("brain-clf-c", TaskKind.BRAIN_SUBPLANE, "label"),
    ("brain-clf-d", TaskKind.BRAIN_SUBPLANE, "label"),
    ("head-seg-a", TaskKind.HEAD_SEG, "mask"),
    ("head-seg-b", TaskKind.HEAD_SEG, "mask"),
    ("head-seg-c", TaskKind.HEAD_SEG, "mask"),
    ("abdomen-coarse", TaskKind.ABDOMEN_SEG, "mask"),
    ("abdomen-prompt", TaskKind.ABDOMEN_SEG, "mask"),
    ("stomach-seg-a", TaskKind.STOMACH_SEG, "mask"),
    ("stomach-seg-b", TaskKind.STOMACH_SEG, "mask"),
    ("stomach-seg-c", TaskKind.STOMACH_SEG, "mask"),
    ("aop-a", TaskKind.AOP, "scalar"),
    ("aop-b", TaskKind.AOP, "scalar"),
    ("aop-c", TaskKind.AOP, "scalar"),
    ("ga-a", TaskKind.GA, "scalar"),
    ("ga-b", TaskKind.GA, "scalar"),
    ("ga-c", TaskKind.GA, "scalar"),
)


def default_experts() -> tuple:
    """The standard expert bundle over the default tool battery."""
    return (
        ExpertSpec(expert_id="plane-expert", task=TaskKind.STANDARD_PLANE,
                   tool_ids=("plane-clf-a", "plane-clf-b", "plane-clf-c", "plane-clf-d"),
                   fusion_rule="agreement_fusion"),
        ExpertSpec(expert_id="brain-expert", task=TaskKind.BRAIN_SUBPLANE,
                   tool_ids=("brain-clf-a", "brain-clf-b", "brain-clf-c", "brain-clf-d"),
                   fusion_rule="label_majority_vote"),
        ExpertSpec(expert_id="head-seg-expert", task=TaskKind.HC,
                   tool_ids=("head-seg-a", "head-seg-b", "head-seg-c"),
                   fusion_rule="pixel_majority_vote"),
        ExpertSpec(expert_id="hc-expert", task=TaskKind.HC,
                   tool_ids=("head-seg-a", "head-seg-b", "head-seg-c"),
                   fusion_rule="biometry_with_fallback"),
        ExpertSpec(expert_id="ac-expert", task=TaskKind.AC,
                   tool_ids=("abdomen-coarse", "abdomen-prompt"),
                   fusion_rule="sequential_prompt_pipeline"),
        ExpertSpec(expert_id="stomach-expert", task=TaskKind.STOMACH_SEG,
                   tool_ids=("stomach-seg-a", "stomach-seg-b", "stomach-seg-c"),
                   fusion_rule="mask_majority_with_fallback"),
        ExpertSpec(expert_id="aop-expert", task=TaskKind.AOP,
                   tool_ids=("aop-a", "aop-b", "aop-c"),
                   fusion_rule="median_outlier_correct"),
        ExpertSpec(expert_id="ga-expert", task=TaskKind.GA,
                   tool_ids=("ga-a", "ga-b", "ga-c"),
                   fusion_rule="consistency_weighted"),
    )


def register_default_tools(registry: ToolRegistry, adapter) -> None:
    for tool_id, task, kind in DEFAULT_TOOL_TABLE:
        registry.register(tool_id, task, kind, adapter)


def load_caption_plan(path: str | None = None) -> dict:
    """Plane label -> expert ids run on images of that plane."""
    if path is None:
        text = resources.files("sonagent.assets").joinpath("caption_plan.json").read_text()
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    plan = json.loads(text)
    return {k: tuple(v) for k, v in plan.items() if not k.startswith("_")}


@dataclass
class Engine:
    """Everything a workflow needs, wired once and reused across queries."""

    registry: ToolRegistry
    experts: tuple
    voter_backend: object = None
    voter_profiles: tuple = ()
    knowledge: object = None
    charts: dict = field(default_factory=dict)
    lexicon: RoutingLexicon = None
    synonyms: SynonymTable = None
    caption_plan: dict = field(default_factory=load_caption_plan)
    rag_k: int = DEFAULT_TOP_K
    w_tool: int = W_TOOL_DEFAULT
    fusion_params: dict = field(default_factory=dict)
    arbiter_mode: DecisionMode = DecisionMode.DETERMINISTIC

    def __post_init__(self):
        self.experts = tuple(self.experts)
        if self.lexicon is None:
            self.lexicon = default_lexicon()
        if self.synonyms is None:
            self.synonyms = default_synonyms()
        if not self.voter_profiles and self.voter_backend is not None:
            self.voter_profiles = load_voter_profiles()
        self._by_id = {spec.expert_id: spec for spec in self.experts}

    def expert(self, expert_id: str):
        spec = self._by_id.get(expert_id)
        if spec is None:
            raise ConfigError(f"no expert registered under id {expert_id!r}")
        return spec

    def experts_for(self, task: TaskKind) -> list:
        return [spec for spec in self.experts if spec.task is task]


class _DigestContext:
    """Anything with a to_dict() works as voter context; this wraps a dict."""

    def __init__(self, payload: dict):
        self._payload = payload

    def to_dict(self) -> dict:
        return self._payload


def _retrieve_hits(engine: Engine, text: str) -> list:
    if engine.knowledge is None:
        return []
    return engine.knowledge.retrieve(text, k=engine.rag_k)


def _fused_label_confidence(evidence) -> float:
    """Mean per-tool score assigned to the fused label (1.0 when unscored)."""
    outputs = evidence.details.get("outputs", {})
    scores = [out["scores"][evidence.fused] for out in outputs.values()
              if out.get("scores") and evidence.fused in out["scores"]]
    return sum(scores) / len(scores) if scores else 1.0


def answer_vqa(
    engine: Engine,
    query: Query,
    disable_tools: bool = False,
    disable_voters: bool = False,
    run_id: str | None = None,
):
    """Answer one option question; returns (decision, report, bank).

    Requires a Specific-route query with an attached image. The ablation
    switches drop one evidence stream each; dropping both is a
    configuration error rather than a silent empty run.
    """
    if disable_tools and disable_voters:
        raise ConfigError("at least one of tools and voters must stay enabled")
    route = route_query(query)
    if route.kind is not RouteKind.SPECIFIC:
        raise ValueError("option QA requires a query with answer options")
    image = query.first_image()
    if image is None:
        raise ValueError("option QA requires an attached image")

    bank = EvidenceBank(run_id=run_id or f"vqa-{query.id}")
    context = build_context(query, image=image, lexicon=engine.lexicon)
    bank.append("context", {
        "kind": "context",
        "query_id": query.id,
        "image_id": image.id,
        "text": query.text,
        "options": [{"key": k, "text": t} for k, t in query.options],
        "task": context.hypothesis.value,
        "keywords": sorted(context.keywords),
    })

    hits = _retrieve_hits(engine, query.text)

    votes, abstentions = [], []
    if not disable_voters and engine.voter_backend is not None:
        digest = _DigestContext({
            "task": context.hypothesis.value,
            "keywords": sorted(context.keywords),
            "snippets": [{"chunk_id": c.chunk_id, "text": c.text} for c, _ in hits],
        })
        votes, abstentions = run_voters(query, image, digest, engine.voter_backend,
                                        profiles=engine.voter_profiles or None)
        for vote in votes:
            bank.append("vote", {"kind": "vote", **vote.to_dict()})
        counts: dict = {}
        for vote in votes:
            counts[vote.key] = counts.get(vote.key, 0) + 1
        bank.append("vote", {
            "kind": "tally",
            "counts": {k: counts[k] for k in sorted(counts)},
            "n_votes": len(votes),
            "abstentions": len(abstentions),
        })

    e_tool = []
    if not disable_tools:
        task, specs = allocate_task(query, context, list(engine.experts))
        for spec in specs:
            try:
                evidence = invoke_expert(engine.registry, spec, image,
                                         params=engine.fusion_params)
            except AllToolsFailed:
                bank.append("tool", {"kind": "failure", "expert_id": spec.expert_id,
                                     "task": spec.task.value, "flags": ["all_tools_failed"]})
                continue
            payload = evidence.to_bank_payload()
            bank.append("tool", payload)
            e_tool.append(evidence)

    for chunk, score in hits:
        bank.append("rag", {"kind": "rag", "chunk_id": chunk.chunk_id,
                            "doc_id": chunk.doc_id, "score": round(float(score), 6),
                            "text": chunk.text})

    decision = arbitrate(votes, e_tool, bank, list(query.options),
                         mode=engine.arbiter_mode, w_tool=engine.w_tool,
                         synonyms=engine.synonyms, backend=engine.voter_backend)
    report = generate_report(bank, decision)
    return decision, report, bank


def _mask_fallbacks(engine: Engine, spec, image: ImageRef) -> list:
    """Per-tool masks for reflective re-measurement, in priority order."""
    masks = []
    for tool_id in spec.priority:
        try:
            out = invoke_tool(engine.registry, tool_id, image)
        except (ToolUnavailable, MissingFixture, SonagentError):
            continue
        if out.kind == "mask":
            masks.append((tool_id, out.mask))
    return masks


def _run_plan_experts(engine: Engine, plane_label: str, image: ImageRef, bank,
                      ga_weeks: float | None):
    """Invoke the plane's follow-up experts; reflect, then append evidence."""
    staged = []
    for expert_id in engine.caption_plan.get(plane_label, ()):
        spec = engine.expert(expert_id)
        try:
            evidence = invoke_expert(engine.registry, spec, image,
                                         params=engine.fusion_params)
        except (AllToolsFailed, SonagentError):
            continue
        staged.append((spec, evidence))

    findings = []
    reflect_specs = {}
    for spec, evidence in staged:
        if isinstance(evidence.fused, Measurement):
            findings.append(Finding(task=spec.task, measurement=evidence.fused,
                                    flags=evidence.flags))
            reflect_specs[spec.task] = spec

    global_flags = ()
    if findings and engine.charts and ga_weeks is not None:
        fallbacks = {task: _mask_fallbacks(engine, spec, image)
                     for task, spec in reflect_specs.items()
                     if spec.fusion_rule in ("biometry_with_fallback",
                                             "sequential_prompt_pipeline")}
        findings, global_flags = consistency_check_and_reflect(
            findings, ga_weeks, engine.charts, fallbacks)

    verified = {f.task: f for f in findings}
    for spec, evidence in staged:
        payload = evidence.to_bank_payload()
        finding = verified.get(spec.task)
        if finding is not None and payload["kind"] == "measurement":
            payload["value"] = round(float(finding.measurement.value), 4)
            if finding.percentile is not None:
                payload["percentile"] = finding.percentile
            merged = sorted(set(payload.get("flags", [])) | set(finding.flags))
            if merged:
                payload["flags"] = merged
        payload["image_id"] = image.id
        bank.append("tool", payload)
    return global_flags


def _estimate_ga(engine: Engine, image: ImageRef, bank) -> float | None:
    ga_specs = engine.experts_for(TaskKind.GA)
    for spec in ga_specs:
        try:
            evidence = invoke_expert(engine.registry, spec, image,
                                         params=engine.fusion_params)
        except (AllToolsFailed, SonagentError):
            continue
        payload = evidence.to_bank_payload()
        payload["image_id"] = image.id
        bank.append("tool", payload)
        return float(evidence.fused.value)
    return None


def caption_image(engine: Engine, image: ImageRef, ga_weeks: float | None = None,
                  run_id: str | None = None):
    """Describe one still image; returns (report, bank).

    The plane is recognized first, then the plane's follow-up experts run,
    and chart-implausible measurements are re-measured before reporting.
    The bank runs in its non-deliberative mode: no vote entries exist.
    """
    bank = EvidenceBank(run_id=run_id or f"caption-{image.id}", mode="GeneralTask")
    bank.append("context", {"kind": "context", "request": "caption",
                            "image_id": image.id})
    plane_specs = engine.experts_for(TaskKind.STANDARD_PLANE)
    if not plane_specs:
        raise ConfigError("captioning needs a standard-plane expert")
    plane_evidence = invoke_expert(engine.registry, plane_specs[0], image,
                                  params=engine.fusion_params)
    plane_payload = plane_evidence.to_bank_payload()
    plane_payload["image_id"] = image.id
    bank.append("tool", plane_payload)
    plane_label = str(plane_evidence.fused)

    if ga_weeks is None:
        ga_weeks = _estimate_ga(engine, image, bank)
    _run_plan_experts(engine, plane_label, image, bank, ga_weeks)
    report = generate_report(bank)
    return report, bank


def extract_keyframes(scores: list, tau: float = KEYFRAME_TAU_DEFAULT,
                      window: int = KEYFRAME_WINDOW_DEFAULT) -> list:
    """Indices whose score passes tau and strictly dominates the +-window.

    An equal score earlier in the window suppresses the later frame, so a
    constant-score run yields only its first frame.
    """
    if not scores:
        raise EmptyVideo("cannot extract keyframes from zero frames")
    if window < 0:
        raise ValueError("window must be >= 0")
    picked = []
    n = len(scores)
    for i, s in enumerate(scores):
        if s < tau:
            continue
        lo, hi = max(0, i - window), min(n, i + window + 1)
        dominated = any(
            scores[j] > s or (scores[j] == s and j < i)
            for j in range(lo, hi) if j != i
        )
        if not dominated:
            picked.append(i)
    return picked


@dataclass(frozen=True)
class Keyframe:
    index: int
    label: str
    score: float

    def to_dict(self) -> dict:
        return {"index": self.index, "label": self.label, "score": self.score}


@dataclass(frozen=True)
class KeyframeSet:
    video_id: str
    frames: tuple

    def to_dict(self) -> dict:
        return {"video_id": self.video_id,
                "frames": [f.to_dict() for f in self.frames]}


def select_keyframes(video_id: str, labels_scores: list,
                     tau: float = KEYFRAME_TAU_DEFAULT,
                     window: int = KEYFRAME_WINDOW_DEFAULT,
                     max_per_plane: int = KEYFRAME_MAX_PER_PLANE_DEFAULT) -> KeyframeSet:
    """Local-maximum keyframes, capped per plane label by descending score."""
    indices = extract_keyframes([s for _, s in labels_scores], tau, window)
    by_label: dict = {}
    for i in indices:
        by_label.setdefault(labels_scores[i][0], []).append(i)
    chosen = []
    for label in sorted(by_label):
        ranked = sorted(by_label[label], key=lambda i: (-labels_scores[i][1], i))
        chosen.extend(ranked[:max_per_plane])
    frames = tuple(Keyframe(index=i, label=labels_scores[i][0], score=labels_scores[i][1])
                   for i in sorted(chosen))
    return KeyframeSet(video_id=video_id, frames=frames)


def _ga_from_dates(exam: dict) -> float | None:
    lmp, exam_day = exam.get("lmp_date"), exam.get("exam_date")
    if not lmp or not exam_day:
        return None
    days = (date.fromisoformat(exam_day) - date.fromisoformat(lmp)).days
    return days / 7.0


def summarize_video(engine: Engine, video: VideoRef, exam: dict | None = None,
                    run_id: str | None = None,
                    tau: float = KEYFRAME_TAU_DEFAULT,
                    window: int = KEYFRAME_WINDOW_DEFAULT,
                    max_per_plane: int = KEYFRAME_MAX_PER_PLANE_DEFAULT):
    """Summarize a sweep; returns (keyframes, report, bank).

    Every frame is plane-classified, locally maximal frames become
    keyframes, and each plane's best keyframe is measured. A sonographic
    age more than two weeks from the menstrual-date age raises a
    discrepancy flag rather than an error.
    """
    if not video.frames:
        raise EmptyVideo(f"video {video.id!r} has no frames")
    plane_specs = engine.experts_for(TaskKind.STANDARD_PLANE)
    if not plane_specs:
        raise ConfigError("video summary needs a standard-plane expert")
    plane_spec = plane_specs[0]

    bank = EvidenceBank(run_id=run_id or f"video-{video.id}", mode="GeneralTask")
    bank.append("context", {"kind": "context", "request": "video_summary",
                            "video_id": video.id, "n_frames": len(video.frames),
                            "frame_rate": video.frame_rate})

    labels_scores = []
    for idx in range(len(video.frames)):
        evidence = invoke_expert(engine.registry, plane_spec, video.frame_image(idx),
                                 params=engine.fusion_params)
        labels_scores.append((str(evidence.fused), _fused_label_confidence(evidence)))

    keyframes = select_keyframes(video.id, labels_scores, tau, window, max_per_plane)
    for kf in keyframes.frames:
        bank.append("tool", {"kind": "label", "expert_id": plane_spec.expert_id,
                             "task": plane_spec.task.value, "label": kf.label,
                             "frame_index": kf.index, "score": kf.score,
                             "image_id": video.frame_image(kf.index).id})

    best_by_label: dict = {}
    for kf in keyframes.frames:
        cur = best_by_label.get(kf.label)
        if cur is None or (kf.score, -kf.index) > (cur.score, -cur.index):
            best_by_label[kf.label] = kf

    ga_us = None
    if best_by_label:
        overall = max(best_by_label.values(), key=lambda kf: (kf.score, -kf.index))
        ga_us = _estimate_ga(engine, video.frame_image(overall.index), bank)

    for label in sorted(best_by_label):
        kf = best_by_label[label]
        _run_plan_experts(engine, label, video.frame_image(kf.index), bank, ga_us)

    if ga_us is not None and exam:
        ga_lmp = _ga_from_dates(exam)
        if ga_lmp is not None and abs(ga_us - ga_lmp) > GA_DISCREPANCY_WEEKS:
            bank.append("context", {"kind": "context", "flags": ["ga_discrepancy"],
                                    "ga_ultrasound_weeks": round(ga_us, 2),
                                    "ga_menstrual_weeks": round(ga_lmp, 2)})

    report = generate_report(bank)
    return keyframes, report, bank
