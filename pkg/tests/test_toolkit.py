"""Tool adapters, registry, and the expert execution layer."""

import json
import os

import numpy as np
import pytest
import requests

from oracles import ellipse_perimeter_exact, rasterize_ellipse
from sonagent.core import ImageRef, Mask, Measurement, TaskKind, Unit, canonical_json
from sonagent.errors import (
    AllToolsFailed,
    DuplicateToolId,
    MalformedOutput,
    MissingFixture,
    ToolUnavailable,
    UnknownTool,
)
from sonagent.orchestration import ExpertSpec
from sonagent.toolkit import (
    InProcessAdapter,
    RemoteAdapter,
    ToolOutput,
    ToolRegistry,
    invoke_expert,
    invoke_tool,
    register_tool,
)


def make_image(image_id="img-1", size=96, spacing=0.5):
    return ImageRef(id=image_id, pixels=np.zeros((size, size), dtype=np.uint8),
                    spacing_mm_per_px=spacing)


def write_fixture(root, tool_id, image_id, record):
    tool_dir = os.path.join(root, "tools", tool_id)
    os.makedirs(tool_dir, exist_ok=True)
    with open(os.path.join(tool_dir, f"{image_id}.json"), "w") as fh:
        json.dump(record, fh)


def write_mask_fixture(root, tool_id, image_id, data, latency=0.0):
    from PIL import Image as PILImage

    rel = os.path.join("masks", f"{tool_id}-{image_id}.png")
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    PILImage.fromarray((data > 0).astype(np.uint8) * 255).save(os.path.join(root, rel))
    write_fixture(root, tool_id, image_id, {"kind": "mask", "mask_file": rel,
                                            "latency_ms": latency})


def ellipse_with_hole(size, hole_x):
    """Shared base ellipse, with a tool-specific 2x2 interior hole."""
    base = rasterize_ellipse(size, size, size // 2, size // 2, 30, 24, 0.3)
    data = base.astype(np.uint8).copy()
    data[size // 2: size // 2 + 2, hole_x: hole_x + 2] = 0
    return base.astype(np.uint8), data


# ---------------------------------------------------------------- ToolOutput

def test_tool_output_score_sum_enforced():
    with pytest.raises(MalformedOutput):
        ToolOutput(tool_id="t", task=TaskKind.STANDARD_PLANE, kind="label",
                   label="head", scores={"head": 0.5, "abdomen": 0.3})
    out = ToolOutput(tool_id="t", task=TaskKind.STANDARD_PLANE, kind="label",
                     label="head", scores={"head": 0.7, "abdomen": 0.3})
    assert out.label == "head"


def test_tool_output_exactly_one_payload():
    with pytest.raises(MalformedOutput):
        ToolOutput(tool_id="t", task=TaskKind.GA, kind="scalar", value=20.0,
                   unit=Unit.WEEKS, label="oops")
    with pytest.raises(MalformedOutput):
        ToolOutput(tool_id="t", task=TaskKind.GA, kind="scalar", value=None, unit=Unit.WEEKS)
    with pytest.raises(MalformedOutput):
        ToolOutput(tool_id="t", task=TaskKind.HC, kind="mask", mask=None)
    with pytest.raises(MalformedOutput):
        ToolOutput(tool_id="t", task=TaskKind.HC, kind="picture")


def test_tool_output_label_missing_from_scores():
    with pytest.raises(MalformedOutput):
        ToolOutput(tool_id="t", task=TaskKind.STANDARD_PLANE, kind="label",
                   label="femur", scores={"head": 1.0})


# ------------------------------------------------------------------ adapters

def test_in_process_adapter_round_trips_all_kinds(tmp_path):
    root = str(tmp_path)
    image = make_image()
    write_fixture(root, "clf", image.id,
                  {"kind": "label", "label": "head", "scores": {"head": 0.9, "other": 0.1},
                   "latency_ms": 12.5})
    data = np.zeros((96, 96), dtype=np.uint8)
    data[10:20, 10:30] = 1
    write_mask_fixture(root, "seg", image.id, data)
    write_fixture(root, "ga", image.id, {"kind": "scalar", "value": 20.1, "unit": "weeks"})

    adapter = InProcessAdapter(root)
    label_out = adapter.infer("clf", TaskKind.STANDARD_PLANE, image, {})
    assert label_out.label == "head" and label_out.latency_ms == 12.5
    mask_out = adapter.infer("seg", TaskKind.HEAD_SEG, image, {})
    assert mask_out.mask.area_px == 200
    assert mask_out.mask.spacing_mm_per_px == image.spacing_mm_per_px
    scalar_out = adapter.infer("ga", TaskKind.GA, image, {})
    assert scalar_out.value == 20.1 and scalar_out.unit is Unit.WEEKS


def test_in_process_adapter_missing_fixture(tmp_path):
    adapter = InProcessAdapter(str(tmp_path))
    with pytest.raises(MissingFixture):
        adapter.infer("clf", TaskKind.STANDARD_PLANE, make_image(), {})


def test_in_process_adapter_rejects_wrong_mask_dims(tmp_path):
    root = str(tmp_path)
    image = make_image(size=96)
    write_mask_fixture(root, "seg", image.id, np.ones((40, 40), dtype=np.uint8))
    with pytest.raises(MalformedOutput):
        InProcessAdapter(root).infer("seg", TaskKind.HEAD_SEG, image, {})


def test_in_process_adapter_rejects_bad_unit(tmp_path):
    root = str(tmp_path)
    image = make_image()
    write_fixture(root, "ga", image.id, {"kind": "scalar", "value": 20.1, "unit": "furlongs"})
    with pytest.raises(MalformedOutput):
        InProcessAdapter(root).infer("ga", TaskKind.GA, image, {})


# ------------------------------------------------------------------ registry

def test_registry_rejects_duplicate_and_unknown(tmp_path):
    registry = ToolRegistry()
    adapter = InProcessAdapter(str(tmp_path))
    register_tool(registry, "clf", TaskKind.STANDARD_PLANE, "label", adapter)
    with pytest.raises(DuplicateToolId):
        register_tool(registry, "clf", TaskKind.STANDARD_PLANE, "label", adapter)
    with pytest.raises(UnknownTool):
        registry.get("nope")
    assert "clf" in registry and len(registry) == 1


class _FlakyAdapter:
    transport = "in_process"

    def __init__(self, fail_times, error=ToolUnavailable):
        self.fail_times = fail_times
        self.error = error
        self.calls = 0

    def infer(self, tool_id, task, image, params):
        self.calls += 1
        if self.calls <= self.fail_times:
            raise self.error("injected")
        return ToolOutput(tool_id=tool_id, task=task, kind="scalar", value=1.0,
                          unit=Unit.WEEKS)


def test_invoke_tool_retries_transient_failure_once():
    registry = ToolRegistry()
    adapter = _FlakyAdapter(fail_times=1)
    register_tool(registry, "ga", TaskKind.GA, "scalar", adapter)
    out = invoke_tool(registry, "ga", make_image())
    assert out.value == 1.0 and adapter.calls == 2

    registry2 = ToolRegistry()
    adapter2 = _FlakyAdapter(fail_times=2)
    register_tool(registry2, "ga", TaskKind.GA, "scalar", adapter2)
    with pytest.raises(ToolUnavailable):
        invoke_tool(registry2, "ga", make_image())
    assert adapter2.calls == 2


def test_invoke_tool_does_not_retry_missing_fixture():
    registry = ToolRegistry()
    adapter = _FlakyAdapter(fail_times=5, error=MissingFixture)
    register_tool(registry, "ga", TaskKind.GA, "scalar", adapter)
    with pytest.raises(MissingFixture):
        invoke_tool(registry, "ga", make_image())
    assert adapter.calls == 1


def test_invoke_tool_checks_registered_kind(tmp_path):
    root = str(tmp_path)
    image = make_image()
    write_fixture(root, "clf", image.id, {"kind": "label", "label": "head"})
    registry = ToolRegistry()
    register_tool(registry, "clf", TaskKind.STANDARD_PLANE, "scalar", InProcessAdapter(root))
    with pytest.raises(MalformedOutput):
        invoke_tool(registry, "clf", image)


# ------------------------------------------------------------- remote client

class _FakeResponse:
    def __init__(self, status_code, payload=None, text=""):
        self.status_code = status_code
        self._payload = payload
        self.text = text

    def json(self):
        if self._payload is None:
            raise ValueError("no json")
        return self._payload


class _FakeSession:
    def __init__(self, response=None, error=None):
        self.response = response
        self.error = error
        self.posts = []

    def post(self, url, json=None, timeout=None):
        self.posts.append((url, json))
        if self.error:
            raise self.error
        return self.response

    def get(self, url, timeout=None):
        if self.error:
            raise self.error
        return self.response


def test_remote_adapter_request_shape_and_scalar_decode():
    session = _FakeSession(_FakeResponse(200, {
        "tool_id": "ga-a", "task": "GA", "kind": "scalar",
        "value": 20.1, "unit": "weeks", "latency_ms": 3.0,
    }))
    adapter = RemoteAdapter("http://tools.local", session=session)
    out = adapter.infer("ga-a", TaskKind.GA, make_image("img-7"), {"p": 1})
    assert out.value == 20.1 and out.latency_ms == 3.0
    url, body = session.posts[0]
    assert url == "http://tools.local/v1/tools/ga-a/infer"
    assert body["task"] == "GA" and body["image_id"] == "img-7"
    assert set(body) == {"request_id", "task", "image_id", "image_b64",
                         "spacing_mm_per_px", "params"}


def test_remote_adapter_request_ids_are_deterministic():
    responses = _FakeSession(_FakeResponse(200, {
        "kind": "scalar", "value": 1.0, "unit": "weeks", "latency_ms": 0.0}))
    adapter = RemoteAdapter("http://x", session=responses)
    adapter.infer("t", TaskKind.GA, make_image("a"), {"k": 2})
    adapter.infer("t", TaskKind.GA, make_image("a"), {"k": 2})
    adapter.infer("t", TaskKind.GA, make_image("a"), {"k": 3})
    ids = [body["request_id"] for _, body in responses.posts]
    assert ids[0] == ids[1] and ids[0] != ids[2]


def test_remote_adapter_error_mapping():
    image = make_image()
    with pytest.raises(MissingFixture):
        RemoteAdapter("http://x", session=_FakeSession(_FakeResponse(404))).infer(
            "t", TaskKind.GA, image, {})
    with pytest.raises(ToolUnavailable):
        RemoteAdapter("http://x", session=_FakeSession(_FakeResponse(500, text="boom"))).infer(
            "t", TaskKind.GA, image, {})
    with pytest.raises(ToolUnavailable):
        RemoteAdapter("http://x", session=_FakeSession(
            error=requests.ConnectionError("down"))).infer("t", TaskKind.GA, image, {})
    with pytest.raises(MalformedOutput):
        RemoteAdapter("http://x", session=_FakeSession(_FakeResponse(200, {
            "kind": "label", "label": "head",
            "scores": {"head": 0.5, "other": 0.3}}))).infer(
                "t", TaskKind.STANDARD_PLANE, image, {})


def test_remote_health_and_degraded_registration():
    ok = _FakeSession(_FakeResponse(200, {"status": "ok"}))
    assert RemoteAdapter("http://x", session=ok).health()
    down = _FakeSession(error=requests.ConnectionError("down"))
    adapter = RemoteAdapter("http://x", session=down)
    assert not adapter.health()
    registry = ToolRegistry()
    binding = register_tool(registry, "t", TaskKind.GA, "scalar", adapter)
    assert binding.degraded


# ------------------------------------------------------------ expert running

def seg_trio_pack(tmp_path, image, tool_ids=("seg-a", "seg-b", "seg-c")):
    """Three tools sharing one ellipse, each with a different interior hole."""
    root = str(tmp_path)
    base, _ = ellipse_with_hole(image.width, 20)
    for i, tool_id in enumerate(tool_ids):
        _, holed = ellipse_with_hole(image.width, 20 + 6 * i)
        write_mask_fixture(root, tool_id, image.id, holed)
    return root, base


def test_expert_pixel_majority_covers_single_tool_holes(tmp_path):
    image = make_image()
    root, base = seg_trio_pack(tmp_path, image)
    registry = ToolRegistry()
    for tool_id in ("seg-a", "seg-b", "seg-c"):
        register_tool(registry, tool_id, TaskKind.HEAD_SEG, "mask", InProcessAdapter(root))
    expert = ExpertSpec(expert_id="head-seg-expert", task=TaskKind.HEAD_SEG,
                        tool_ids=("seg-a", "seg-b", "seg-c"),
                        fusion_rule="pixel_majority_vote")
    evidence = invoke_expert(registry, expert, image)
    assert isinstance(evidence.fused, Mask)
    assert np.array_equal(evidence.fused.data, base)
    assert sorted(evidence.details["invoked"]) == ["seg-a", "seg-b", "seg-c"]
    assert evidence.flags == ()


def test_expert_biometry_measures_circumference(tmp_path):
    image = make_image()
    root, base = seg_trio_pack(tmp_path, image)
    registry = ToolRegistry()
    for tool_id in ("seg-a", "seg-b", "seg-c"):
        register_tool(registry, tool_id, TaskKind.HC, "mask", InProcessAdapter(root))
    expert = ExpertSpec(expert_id="hc-expert", task=TaskKind.HC,
                        tool_ids=("seg-a", "seg-b", "seg-c"),
                        fusion_rule="biometry_with_fallback")
    evidence = invoke_expert(registry, expert, image)
    assert isinstance(evidence.fused, Measurement)
    assert evidence.fused.unit is Unit.MM
    expected_mm = ellipse_perimeter_exact(30, 24) * image.spacing_mm_per_px
    assert evidence.fused.value == pytest.approx(expected_mm, rel=0.03)
    assert evidence.details["fusion_trace"]["source"] == "fused"


def test_expert_tolerates_one_corrupted_tool(tmp_path):
    image = make_image()
    root, base = seg_trio_pack(tmp_path, image)
    # corrupt one tool to an empty mask; the 2-of-3 majority still holds
    write_mask_fixture(root, "seg-c", image.id, np.zeros((96, 96), dtype=np.uint8))
    registry = ToolRegistry()
    for tool_id in ("seg-a", "seg-b", "seg-c"):
        register_tool(registry, tool_id, TaskKind.HC, "mask", InProcessAdapter(root))
    expert = ExpertSpec(expert_id="hc-expert", task=TaskKind.HC,
                        tool_ids=("seg-a", "seg-b", "seg-c"),
                        fusion_rule="biometry_with_fallback")
    clean = invoke_expert(registry, expert, image)
    # with one empty tool the majority is the intersection of the two others
    assert clean.fused.value == pytest.approx(
        ellipse_perimeter_exact(30, 24) * image.spacing_mm_per_px, rel=0.03)


def test_expert_partial_failure_flag_and_all_failed(tmp_path):
    image = make_image()
    root, _ = seg_trio_pack(tmp_path, image, tool_ids=("seg-a", "seg-b"))
    registry = ToolRegistry()
    for tool_id in ("seg-a", "seg-b", "seg-c"):
        register_tool(registry, tool_id, TaskKind.HEAD_SEG, "mask", InProcessAdapter(root))
    expert = ExpertSpec(expert_id="head-seg-expert", task=TaskKind.HEAD_SEG,
                        tool_ids=("seg-a", "seg-b", "seg-c"),
                        fusion_rule="pixel_majority_vote")
    evidence = invoke_expert(registry, expert, image)
    assert "partial_tool_failure" in evidence.flags
    assert evidence.details["failures"][0]["tool_id"] == "seg-c"
    assert sorted(evidence.details["invoked"]) == ["seg-a", "seg-b", "seg-c"]

    other = make_image("img-without-fixtures")
    with pytest.raises(AllToolsFailed):
        invoke_expert(registry, expert, other)


def test_expert_stomach_area_measurement(tmp_path):
    image = make_image()
    root = str(tmp_path)
    blob = np.zeros((96, 96), dtype=np.uint8)
    blob[30:50, 30:60] = 1  # 600 px at 0.5 mm -> 1.5 cm2
    for tool_id in ("st-a", "st-b", "st-c"):
        write_mask_fixture(root, tool_id, image.id, blob)
    registry = ToolRegistry()
    for tool_id in ("st-a", "st-b", "st-c"):
        register_tool(registry, tool_id, TaskKind.STOMACH_SEG, "mask", InProcessAdapter(root))
    expert = ExpertSpec(expert_id="stomach-expert", task=TaskKind.STOMACH_SEG,
                        tool_ids=("st-a", "st-b", "st-c"),
                        fusion_rule="mask_majority_with_fallback")
    evidence = invoke_expert(registry, expert, image)
    assert evidence.fused.unit is Unit.CM2
    assert evidence.fused.value == pytest.approx(1.5)
    assert evidence.flags == ()


def test_expert_sequential_pipeline_refines_then_measures(tmp_path):
    image = make_image()
    root = str(tmp_path)
    coarse = rasterize_ellipse(96, 96, 48, 48, 26, 20, 0.1).astype(np.uint8)
    refined = rasterize_ellipse(96, 96, 48, 48, 28, 22, 0.1).astype(np.uint8)
    write_mask_fixture(root, "ab-coarse", image.id, coarse)
    write_mask_fixture(root, "ab-prompt", image.id, refined)
    registry = ToolRegistry()
    register_tool(registry, "ab-coarse", TaskKind.AC, "mask", InProcessAdapter(root))
    register_tool(registry, "ab-prompt", TaskKind.AC, "mask", InProcessAdapter(root))
    expert = ExpertSpec(expert_id="ac-expert", task=TaskKind.AC,
                        tool_ids=("ab-coarse", "ab-prompt"),
                        fusion_rule="sequential_prompt_pipeline")
    evidence = invoke_expert(registry, expert, image)
    expected_mm = ellipse_perimeter_exact(28, 22) * image.spacing_mm_per_px
    assert evidence.fused.value == pytest.approx(expected_mm, rel=0.03)
    assert evidence.details["pipeline"]["prompt"]["box"]  # prompt stage ran
    assert evidence.flags == ()


def test_expert_sequential_pipeline_degrades_to_coarse(tmp_path):
    image = make_image()
    root = str(tmp_path)
    coarse = rasterize_ellipse(96, 96, 48, 48, 26, 20, 0.1).astype(np.uint8)
    write_mask_fixture(root, "ab-coarse", image.id, coarse)  # no prompt fixture
    registry = ToolRegistry()
    register_tool(registry, "ab-coarse", TaskKind.AC, "mask", InProcessAdapter(root))
    register_tool(registry, "ab-prompt", TaskKind.AC, "mask", InProcessAdapter(root))
    expert = ExpertSpec(expert_id="ac-expert", task=TaskKind.AC,
                        tool_ids=("ab-coarse", "ab-prompt"),
                        fusion_rule="sequential_prompt_pipeline")
    evidence = invoke_expert(registry, expert, image)
    assert "prompt_failed" in evidence.flags
    expected_mm = ellipse_perimeter_exact(26, 20) * image.spacing_mm_per_px
    assert evidence.fused.value == pytest.approx(expected_mm, rel=0.03)


def scalar_pack(tmp_path, image, values, unit, tool_ids):
    root = str(tmp_path)
    for tool_id, value in zip(tool_ids, values):
        write_fixture(root, tool_id, image.id, {"kind": "scalar", "value": value, "unit": unit})
    registry = ToolRegistry()
    task = TaskKind.AOP if unit == "degrees" else TaskKind.GA
    for tool_id in tool_ids:
        register_tool(registry, tool_id, task, "scalar", InProcessAdapter(root))
    return registry


def test_expert_median_outlier_correct(tmp_path):
    image = make_image()
    registry = scalar_pack(tmp_path, image, [62.0, 62.3, 120.0], "degrees",
                           ("aop-a", "aop-b", "aop-c"))
    expert = ExpertSpec(expert_id="aop-expert", task=TaskKind.AOP,
                        tool_ids=("aop-a", "aop-b", "aop-c"),
                        fusion_rule="median_outlier_correct")
    evidence = invoke_expert(registry, expert, image)
    assert evidence.fused.value == pytest.approx((62.0 + 62.3 + 62.3) / 3)
    assert "outlier_corrected" in evidence.flags
    assert evidence.details["corrected"] == {"aop-a": False, "aop-b": False, "aop-c": True}


def test_expert_consistency_weighted_frozen_value(tmp_path):
    image = make_image()
    registry = scalar_pack(tmp_path, image, [20.0, 20.0, 30.0], "weeks",
                           ("ga-a", "ga-b", "ga-c"))
    expert = ExpertSpec(expert_id="ga-expert", task=TaskKind.GA,
                        tool_ids=("ga-a", "ga-b", "ga-c"),
                        fusion_rule="consistency_weighted")
    evidence = invoke_expert(registry, expert, image)
    assert evidence.fused.value == pytest.approx(20.232558139534884, abs=1e-12)


def test_expert_rejects_wrong_scalar_unit(tmp_path):
    image = make_image()
    root = str(tmp_path)
    for tool_id in ("ga-a", "ga-b"):
        write_fixture(root, tool_id, image.id, {"kind": "scalar", "value": 20.0, "unit": "mm"})
    registry = ToolRegistry()
    for tool_id in ("ga-a", "ga-b"):
        register_tool(registry, tool_id, TaskKind.GA, "scalar", InProcessAdapter(root))
    expert = ExpertSpec(expert_id="ga-expert", task=TaskKind.GA,
                        tool_ids=("ga-a", "ga-b"), fusion_rule="consistency_weighted")
    with pytest.raises(MalformedOutput):
        invoke_expert(registry, expert, image)


def label_pack(tmp_path, image, labels, tool_ids, task=TaskKind.STANDARD_PLANE):
    root = str(tmp_path)
    for tool_id, label in zip(tool_ids, labels):
        write_fixture(root, tool_id, image.id, {"kind": "label", "label": label})
    registry = ToolRegistry()
    for tool_id in tool_ids:
        register_tool(registry, tool_id, task, "label", InProcessAdapter(root))
    return registry


def test_expert_agreement_fusion_tie_goes_to_priority(tmp_path):
    image = make_image()
    tool_ids = ("p-a", "p-b", "p-c", "p-d")
    registry = label_pack(tmp_path, image, ["head", "abdomen", "abdomen", "head"], tool_ids)
    expert = ExpertSpec(expert_id="plane-expert", task=TaskKind.STANDARD_PLANE,
                        tool_ids=tool_ids, fusion_rule="agreement_fusion",
                        priority=("p-b", "p-a", "p-c", "p-d"))
    evidence = invoke_expert(registry, expert, image)
    assert evidence.fused == "abdomen"
    assert evidence.details["agreement_count"] == 2


def test_expert_label_majority(tmp_path):
    image = make_image()
    tool_ids = ("b-a", "b-b", "b-c", "b-d")
    registry = label_pack(tmp_path, image,
                          ["trans-thalamic", "trans-thalamic", "trans-cerebellar",
                           "trans-thalamic"], tool_ids, task=TaskKind.BRAIN_SUBPLANE)
    expert = ExpertSpec(expert_id="brain-expert", task=TaskKind.BRAIN_SUBPLANE,
                        tool_ids=tool_ids, fusion_rule="label_majority_vote")
    evidence = invoke_expert(registry, expert, image)
    assert evidence.fused == "trans-thalamic"


def test_expert_runs_are_byte_identical(tmp_path):
    image = make_image()
    root, _ = seg_trio_pack(tmp_path, image)
    registry = ToolRegistry()
    for tool_id in ("seg-a", "seg-b", "seg-c"):
        register_tool(registry, tool_id, TaskKind.HC, "mask", InProcessAdapter(root))
    expert = ExpertSpec(expert_id="hc-expert", task=TaskKind.HC,
                        tool_ids=("seg-a", "seg-b", "seg-c"),
                        fusion_rule="biometry_with_fallback")
    first = canonical_json(invoke_expert(registry, expert, image).to_dict())
    second = canonical_json(invoke_expert(registry, expert, image).to_dict())
    assert first == second


def test_evidence_bank_payload_shapes(tmp_path):
    image = make_image()
    registry = scalar_pack(tmp_path, image, [62.0, 62.2, 62.4], "degrees",
                           ("aop-a", "aop-b", "aop-c"))
    expert = ExpertSpec(expert_id="aop-expert", task=TaskKind.AOP,
                        tool_ids=("aop-a", "aop-b", "aop-c"),
                        fusion_rule="median_outlier_correct")
    payload = invoke_expert(registry, expert, image).to_bank_payload()
    assert payload["kind"] == "measurement"
    assert payload["expert_id"] == "aop-expert"
    assert payload["unit"] == "degrees"
