"""Tool transport, registry, and the expert execution layer.

Visual tools are reached through adapters that share one output type, so the
fusion layer never knows whether a result came from a local fixture pack or
an HTTP inference service. Experts bundle a tool subset with a fusion rule;
`invoke_expert` runs the bundle and returns one fused evidence record.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import requests

from . import fusion
from .core import (
    UNIT_FOR_TASK,
    ImageRef,
    Mask,
    Measurement,
    TaskKind,
    Unit,
    canonical_json,
    decode_mask_bits,
)
from .errors import (
    AllToolsFailed,
    DuplicateToolId,
    MalformedOutput,
    MissingFixture,
    ToolUnavailable,
    UnknownTool,
)

TOOL_KINDS = ("label", "mask", "scalar")
SCORE_SUM_TOL = 1e-6
REMOTE_TIMEOUT_S = 10.0


def _check_scores(scores, label):
    if not isinstance(scores, dict) or not scores:
        raise MalformedOutput("scores must be a non-empty mapping")
    total = 0.0
    for k, v in scores.items():
        if not isinstance(k, str) or not isinstance(v, (int, float)):
            raise MalformedOutput("scores must map labels to numbers")
        if v < 0:
            raise MalformedOutput(f"negative score for {k!r}")
        total += float(v)
    if abs(total - 1.0) > SCORE_SUM_TOL:
        raise MalformedOutput(f"scores sum to {total}, expected 1.0")
    if label not in scores:
        raise MalformedOutput(f"label {label!r} missing from scores")


@dataclass(frozen=True)
class ToolOutput:
    """One tool's reply, already decoded into package types.

    Exactly the payload fields implied by `kind` may be set; anything else
    is a transport bug and raises MalformedOutput at construction.
    """

    tool_id: str
    task: TaskKind
    kind: str
    label: str | None = None
    scores: dict | None = None
    mask: Mask | None = None
    value: float | None = None
    unit: Unit | None = None
    latency_ms: float = 0.0

    def __post_init__(self):
        if self.kind not in TOOL_KINDS:
            raise MalformedOutput(f"unknown output kind {self.kind!r}")
        if self.kind == "label":
            if not self.label or self.mask is not None or self.value is not None:
                raise MalformedOutput("label output carries a label and nothing else")
            if self.scores is not None:
                _check_scores(self.scores, self.label)
        elif self.kind == "mask":
            if self.mask is None or self.label is not None or self.value is not None:
                raise MalformedOutput("mask output carries a mask and nothing else")
        else:
            if self.value is None or self.unit is None or self.label is not None or self.mask is not None:
                raise MalformedOutput("scalar output carries value and unit and nothing else")
            object.__setattr__(self, "value", float(self.value))

    def to_dict(self) -> dict:
        d = {"tool_id": self.tool_id, "task": self.task.value, "kind": self.kind,
             "latency_ms": self.latency_ms}
        if self.kind == "label":
            d["label"] = self.label
            if self.scores is not None:
                d["scores"] = dict(self.scores)
        elif self.kind == "mask":
            d["mask_area_px"] = self.mask.area_px
        else:
            d["value"] = self.value
            d["unit"] = self.unit.value
        return d


class InProcessAdapter:
    """Plays back recorded tool outputs from a fixture directory.

    Layout: <root>/tools/<tool_id>/<image_id>.json, with mask pixels stored
    as PNG files referenced relative to the fixture root.
    """

    transport = "in_process"

    def __init__(self, fixture_root: str):
        self.fixture_root = fixture_root

    def health(self) -> bool:
        return os.path.isdir(self.fixture_root)

    def infer(self, tool_id: str, task: TaskKind, image: ImageRef, params: dict) -> ToolOutput:
        path = os.path.join(self.fixture_root, "tools", tool_id, f"{image.id}.json")
        if not os.path.isfile(path):
            raise MissingFixture(f"no fixture for tool {tool_id!r}, image {image.id!r}")
        with open(path, encoding="utf-8") as fh:
            try:
                rec = json.load(fh)
            except json.JSONDecodeError as exc:
                raise MalformedOutput(f"fixture {path} is not valid JSON: {exc}") from exc
        return self._decode(rec, tool_id, task, image, path)

    def _decode(self, rec, tool_id, task, image, path) -> ToolOutput:
        kind = rec.get("kind")
        latency = float(rec.get("latency_ms", 0.0))
        if kind == "label":
            return ToolOutput(tool_id=tool_id, task=task, kind="label",
                              label=rec.get("label"), scores=rec.get("scores"),
                              latency_ms=latency)
        if kind == "mask":
            mask_path = os.path.join(self.fixture_root, rec.get("mask_file", ""))
            if not os.path.isfile(mask_path):
                raise MissingFixture(f"mask file missing for {path}")
            from PIL import Image as PILImage

            data = (np.asarray(PILImage.open(mask_path).convert("L")) > 0).astype(np.uint8)
            if data.shape != (image.height, image.width):
                raise MalformedOutput(
                    f"mask {mask_path} is {data.shape}, image is "
                    f"{(image.height, image.width)}"
                )
            mask = Mask(width=image.width, height=image.height, data=data,
                        spacing_mm_per_px=image.spacing_mm_per_px)
            return ToolOutput(tool_id=tool_id, task=task, kind="mask", mask=mask,
                              latency_ms=latency)
        if kind == "scalar":
            try:
                unit = Unit(rec.get("unit"))
            except ValueError as exc:
                raise MalformedOutput(f"unknown unit in {path}: {exc}") from exc
            return ToolOutput(tool_id=tool_id, task=task, kind="scalar",
                              value=rec.get("value"), unit=unit, latency_ms=latency)
        raise MalformedOutput(f"fixture {path} has unknown kind {kind!r}")


def _request_id(tool_id: str, image_id: str, params: dict) -> str:
    digest = hashlib.blake2b(
        canonical_json({"tool_id": tool_id, "image_id": image_id, "params": params}).encode(),
        digest_size=8,
    )
    return digest.hexdigest()


class RemoteAdapter:
    """HTTP client for the tool inference wire protocol.

    POST {base_url}/v1/tools/{tool_id}/infer with a JSON body; transient
    transport errors surface as ToolUnavailable, unknown inputs as
    MissingFixture, and contract violations as MalformedOutput.
    """

    transport = "remote"

    def __init__(self, base_url: str, timeout_s: float = REMOTE_TIMEOUT_S, session=None):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self.session = session or requests.Session()

    def health(self) -> bool:
        try:
            resp = self.session.get(f"{self.base_url}/v1/health", timeout=self.timeout_s)
        except requests.RequestException:
            return False
        if resp.status_code != 200:
            return False
        try:
            return resp.json().get("status") == "ok"
        except ValueError:
            return False

    def infer(self, tool_id: str, task: TaskKind, image: ImageRef, params: dict) -> ToolOutput:
        body = {
            "request_id": _request_id(tool_id, image.id, params),
            "task": task.value,
            "image_id": image.id,
            "image_b64": image.to_dict()["pixels_b64"],
            "spacing_mm_per_px": image.spacing_mm_per_px,
            "params": params,
        }
        try:
            resp = self.session.post(
                f"{self.base_url}/v1/tools/{tool_id}/infer", json=body,
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise ToolUnavailable(f"{tool_id}: {exc}") from exc
        if resp.status_code == 404:
            raise MissingFixture(f"{tool_id}: server has no result for {image.id!r}")
        if resp.status_code != 200:
            raise ToolUnavailable(f"{tool_id}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            rec = resp.json()
        except ValueError as exc:
            raise MalformedOutput(f"{tool_id}: response is not JSON") from exc
        return self._decode(rec, tool_id, task, image)

    def _decode(self, rec, tool_id, task, image) -> ToolOutput:
        kind = rec.get("kind")
        latency = float(rec.get("latency_ms", 0.0))
        if kind == "label":
            return ToolOutput(tool_id=tool_id, task=task, kind="label",
                              label=rec.get("label"), scores=rec.get("scores"),
                              latency_ms=latency)
        if kind == "mask":
            try:
                data = decode_mask_bits(rec.get("mask_b64", ""), image.width, image.height)
            except (ValueError, TypeError) as exc:
                raise MalformedOutput(f"{tool_id}: bad mask payload: {exc}") from exc
            mask = Mask(width=image.width, height=image.height, data=data,
                        spacing_mm_per_px=image.spacing_mm_per_px)
            return ToolOutput(tool_id=tool_id, task=task, kind="mask", mask=mask,
                              latency_ms=latency)
        if kind == "scalar":
            try:
                unit = Unit(rec.get("unit"))
            except ValueError as exc:
                raise MalformedOutput(f"{tool_id}: unknown unit: {exc}") from exc
            return ToolOutput(tool_id=tool_id, task=task, kind="scalar",
                              value=rec.get("value"), unit=unit, latency_ms=latency)
        raise MalformedOutput(f"{tool_id}: unknown output kind {kind!r}")


@dataclass(frozen=True)
class ToolBinding:
    tool_id: str
    task: TaskKind
    kind: str
    adapter: object
    degraded: bool = False


class ToolRegistry:
    """Insertion-ordered catalogue of tool bindings."""

    def __init__(self):
        self._bindings = {}

    def register(self, tool_id: str, task: TaskKind, kind: str, adapter) -> ToolBinding:
        if tool_id in self._bindings:
            raise DuplicateToolId(f"tool {tool_id!r} already registered")
        if kind not in TOOL_KINDS:
            raise ValueError(f"unknown tool kind {kind!r}")
        degraded = False
        if getattr(adapter, "transport", "") == "remote":
            # probe once at registration so misconfigured endpoints show early
            degraded = not adapter.health()
        binding = ToolBinding(tool_id=tool_id, task=task, kind=kind,
                              adapter=adapter, degraded=degraded)
        self._bindings[tool_id] = binding
        return binding

    def get(self, tool_id: str) -> ToolBinding:
        binding = self._bindings.get(tool_id)
        if binding is None:
            raise UnknownTool(f"tool {tool_id!r} is not registered")
        return binding

    def tool_ids(self) -> list:
        return list(self._bindings)

    def bindings(self) -> list:
        return list(self._bindings.values())

    def __contains__(self, tool_id) -> bool:
        return tool_id in self._bindings

    def __len__(self) -> int:
        return len(self._bindings)


def register_tool(registry: ToolRegistry, tool_id: str, task: TaskKind, kind: str,
                  adapter) -> ToolBinding:
    return registry.register(tool_id, task, kind, adapter)


def invoke_tool(registry: ToolRegistry, tool_id: str, image: ImageRef,
                params: dict | None = None) -> ToolOutput:
    """Invoke one tool with a single retry on transient unavailability."""
    binding = registry.get(tool_id)
    params = dict(params or {})
    last_error = None
    for _ in range(2):
        try:
            out = binding.adapter.infer(tool_id, binding.task, image, params)
            break
        except ToolUnavailable as exc:
            last_error = exc
    else:
        raise ToolUnavailable(f"tool {tool_id!r} failed after retry: {last_error}")
    if out.kind != binding.kind:
        raise MalformedOutput(
            f"tool {tool_id!r} returned kind {out.kind!r}, registered as {binding.kind!r}"
        )
    return out


@dataclass(frozen=True)
class ToolEvidence:
    """Fused result of one expert run, plus the full per-tool audit trail."""

    expert_id: str
    task: TaskKind
    fused: object
    details: dict = field(default_factory=dict)
    flags: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "flags", tuple(self.flags))

    def fused_payload(self) -> dict:
        if isinstance(self.fused, Measurement):
            # 4 decimals is plenty for mm/degree/week scales; full float
            # repr would leak arithmetic noise into rendered reports
            return {"kind": "measurement", "value": round(float(self.fused.value), 4),
                    "unit": self.fused.unit.value}
        if isinstance(self.fused, Mask):
            return {"kind": "mask", "area_px": self.fused.area_px,
                    "width": self.fused.width, "height": self.fused.height}
        return {"kind": "label", "label": str(self.fused)}

    def to_bank_payload(self) -> dict:
        payload = {"expert_id": self.expert_id, "task": self.task.value}
        payload.update(self.fused_payload())
        if self.flags:
            payload["flags"] = list(self.flags)
        return payload

    def to_dict(self) -> dict:
        return {
            "expert_id": self.expert_id,
            "task": self.task.value,
            "fused": self.fused_payload(),
            "details": self.details,
            "flags": list(self.flags),
        }


def _gather(registry, expert, image, params, kind):
    """Invoke every tool of the expert, tolerating partial failure."""
    outputs, failures = [], []
    for tool_id in expert.tool_ids:
        try:
            out = invoke_tool(registry, tool_id, image, params)
            if out.kind != kind:
                raise MalformedOutput(
                    f"expert {expert.expert_id!r} needs {kind!r} outputs, "
                    f"tool {tool_id!r} returned {out.kind!r}"
                )
            outputs.append((tool_id, out))
        except (ToolUnavailable, MissingFixture, MalformedOutput) as exc:
            failures.append({"tool_id": tool_id, "error": type(exc).__name__,
                             "detail": str(exc)})
    if not outputs:
        raise AllToolsFailed(
            f"every tool of expert {expert.expert_id!r} failed: {failures}"
        )
    return outputs, failures


def _scalar_values(outputs, task):
    for tool_id, out in outputs:
        if out.unit is not UNIT_FOR_TASK[task]:
            raise MalformedOutput(
                f"tool {tool_id!r} reported {out.unit.value}, task {task.value} "
                f"expects {UNIT_FOR_TASK[task].value}"
            )
    return [out.value for _, out in outputs]


def invoke_expert(registry: ToolRegistry, expert, image: ImageRef,
                  params: dict | None = None) -> ToolEvidence:
    """Run one expert: invoke its tools, fuse, and package the evidence.

    Partial tool failure is tolerated while at least one tool succeeds
    (the two-stage prompt pipeline additionally requires its first stage).
    Raises AllToolsFailed when nothing usable comes back.
    """
    params = dict(params or {})
    rule = expert.fusion_rule
    flags = []

    if rule == "sequential_prompt_pipeline":
        if len(expert.tool_ids) != 2:
            raise ValueError("prompt pipeline needs exactly (coarse, prompt) tools")
        coarse_id, prompt_id = expert.tool_ids
        cache = {}

        def _mask_of(tool_id, img, prm):
            key = (tool_id, canonical_json(prm))
            if key not in cache:
                cache[key] = invoke_tool(registry, tool_id, img, prm).mask
            return cache[key]

        try:
            refined, trace = fusion.sequential_prompt_pipeline(
                coarse_id, prompt_id, image, _mask_of
            )
        except (ToolUnavailable, MissingFixture, MalformedOutput) as exc:
            raise AllToolsFailed(
                f"coarse stage of expert {expert.expert_id!r} failed: {exc}"
            ) from exc
        if "flag" in trace:
            flags.append(trace["flag"])
        coarse_mask = cache[(coarse_id, canonical_json({}))]
        measurement, biometry_trace = fusion.biometry_with_fallback(
            refined, [(coarse_id, coarse_mask)],
            residual_cap=params.get("residual_cap", fusion.RESIDUAL_CAP_DEFAULT),
        )
        measurement.check_task(expert.task)
        details = {"rule": rule, "invoked": list(expert.tool_ids), "failures": [],
                   "pipeline": trace, "biometry": biometry_trace}
        return ToolEvidence(expert_id=expert.expert_id, task=expert.task,
                            fused=measurement, details=details, flags=tuple(flags))

    kind = {"agreement_fusion": "label", "label_majority_vote": "label",
            "median_outlier_correct": "scalar", "consistency_weighted": "scalar"}.get(
                rule, "mask")
    outputs, failures = _gather(registry, expert, image, params, kind)
    details = {
        "rule": rule,
        "invoked": [tool_id for tool_id, _ in outputs] + [f["tool_id"] for f in failures],
        "outputs": {tool_id: out.to_dict() for tool_id, out in outputs},
        "failures": failures,
    }
    if failures:
        flags.append("partial_tool_failure")

    if rule == "pixel_majority_vote":
        fused = fusion.pixel_majority_vote([out.mask for _, out in outputs])
        details["fused_area_px"] = fused.area_px

    elif rule == "mask_majority_with_fallback":
        masks_by_tool = [(tool_id, out.mask) for tool_id, out in outputs]
        order = [t for t in expert.priority if any(t == tid for tid, _ in masks_by_tool)]
        mask, trace = fusion.mask_majority_with_fallback(
            masks_by_tool, order,
            min_area_px=params.get("min_area_px", fusion.MIN_MASK_AREA_DEFAULT),
        )
        details["fusion_trace"] = trace
        if trace["decision"] != "majority":
            flags.append("mask_fallback")
        if expert.task is TaskKind.STOMACH_SEG:
            fused = Measurement(value=mask.area_cm2, unit=Unit.CM2,
                                provenance=trace["decision"])
        else:
            fused = mask

    elif rule == "biometry_with_fallback":
        fused_mask = fusion.pixel_majority_vote([out.mask for _, out in outputs])
        per_tool = [(tool_id, out.mask) for tool_id, out in outputs]
        ordered = sorted(per_tool, key=lambda kv: expert.priority.index(kv[0]))
        fused, trace = fusion.biometry_with_fallback(
            fused_mask, ordered,
            residual_cap=params.get("residual_cap", fusion.RESIDUAL_CAP_DEFAULT),
        )
        fused.check_task(expert.task)
        details["fusion_trace"] = trace
        if trace["source"] != "fused":
            flags.append("biometry_fallback")

    elif rule == "median_outlier_correct":
        values = _scalar_values(outputs, expert.task)
        value, corrected = fusion.median_outlier_correct(
            values, delta=params.get("delta", fusion.OUTLIER_DELTA_DEFAULT)
        )
        details["corrected"] = {tool_id: flag for (tool_id, _), flag
                                in zip(outputs, corrected)}
        if any(corrected):
            flags.append("outlier_corrected")
        fused = Measurement(value=value, unit=UNIT_FOR_TASK[expert.task],
                            provenance=rule)

    elif rule == "consistency_weighted":
        values = _scalar_values(outputs, expert.task)
        value = fusion.consistency_weighted(
            values, epsilon=params.get("epsilon", fusion.CONSISTENCY_EPS_DEFAULT)
        )
        fused = Measurement(value=value, unit=UNIT_FOR_TASK[expert.task],
                            provenance=rule)

    elif rule == "agreement_fusion":
        labeled = [
            (tool_id, out.label, out.scores[out.label] if out.scores else 1.0)
            for tool_id, out in outputs
        ]
        fused, agreement = fusion.agreement_fusion(labeled, list(expert.priority))
        details["agreement_count"] = agreement

    elif rule == "label_majority_vote":
        fused = fusion.label_majority_vote([out.label for _, out in outputs])

    else:
        raise ValueError(f"unknown fusion rule {rule!r}")

    return ToolEvidence(expert_id=expert.expert_id, task=expert.task, fused=fused,
                        details=details, flags=tuple(flags))
