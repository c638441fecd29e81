"""Tests for the synthetic fixture bundle generator."""

import hashlib
import json
import math
import os
from collections import Counter

import pytest

from sonagent.bench import BIN_INTERVALS, read_items_jsonl
from sonagent.core import TaskKind
from sonagent.deliberation import PROFILE_IDS
from sonagent.fixtures import (
    MEASUREMENT_FAMILIES,
    build_demo_bundle,
    ellipse_axes_for_target,
    load_case_image,
    load_image_by_id,
    load_manifest,
    load_video,
)
from sonagent.toolkit import InProcessAdapter, ToolRegistry, invoke_expert
from sonagent.workflows import DEFAULT_TOOL_TABLE, default_experts, register_default_tools


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("bundle"))
    manifest = build_demo_bundle(root, seed=7)
    return root, manifest


def _tree_hash(root):
    digest = hashlib.blake2b(digest_size=16)
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            digest.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()


def test_bundle_is_deterministic_and_seed_sensitive(tmp_path):
    a, b, c = (str(tmp_path / n) for n in "abc")
    build_demo_bundle(a, seed=7)
    build_demo_bundle(b, seed=7)
    build_demo_bundle(c, seed=8)
    assert _tree_hash(a) == _tree_hash(b)
    assert _tree_hash(a) != _tree_hash(c)


def test_bundle_inventory(bundle):
    root, manifest = bundle
    assert len(manifest["cases"]) == 22
    items = read_items_jsonl(os.path.join(root, "bench", "items.jsonl"))
    assert len(items) == 30
    by_family = Counter(item.task_id for item in items)
    assert by_family == {1: 4, 2: 3, 3: 3, 4: 3, 5: 3, 6: 3, 7: 2, 8: 2, 9: 4, 10: 3}
    for tool_id, _, _ in DEFAULT_TOOL_TABLE:
        assert os.path.isdir(os.path.join(root, "tools", tool_id)), tool_id
        assert os.path.isdir(os.path.join(root, "corrupt", "tools", tool_id)), tool_id
    for rel in ("charts.csv", "config.json", "manifest.json",
                manifest["voter_scripts"]["correct"],
                manifest["voter_scripts"]["tool_reliant"]):
        assert os.path.isfile(os.path.join(root, rel)), rel


def test_every_case_image_loads(bundle):
    root, manifest = bundle
    for case in manifest["cases"]:
        image = load_case_image(root, manifest, case["image_id"])
        assert image.pixels.shape[0] == image.pixels.shape[1]
        assert image.spacing_mm_per_px == manifest["spacing_mm_per_px"]


EXPERT_FOR_TASK = {
    "HC": "hc-expert",
    "AC": "ac-expert",
    "StomachSeg": "stomach-expert",
    "AoP": "aop-expert",
    "GA": "ga-expert",
}


def _measured_values(root, manifest, fixture_root):
    registry = ToolRegistry()
    register_default_tools(registry, InProcessAdapter(fixture_root))
    experts = {e.expert_id: e for e in default_experts()}
    out = {}
    for case in manifest["cases"]:
        if case["value"] is None:
            continue
        expert = experts[EXPERT_FOR_TASK[case["task"]]]
        image = load_case_image(root, manifest, case["image_id"])
        evidence = invoke_expert(registry, expert, image)
        out[case["image_id"]] = (case["task"], case["value"], evidence.fused.value)
    return out


def _bin_of(value, interval):
    lo = math.floor(value / interval) * interval
    return lo, lo + interval


@pytest.mark.parametrize("fixture_subdir", ["", "corrupt"])
def test_measured_values_land_in_the_truth_bin(bundle, fixture_subdir):
    root, manifest = bundle
    fixture_root = os.path.join(root, fixture_subdir) if fixture_subdir else root
    task_kind = {t.value: t for t in TaskKind}
    for image_id, (task, truth, measured) in _measured_values(
            root, manifest, fixture_root).items():
        interval = BIN_INTERVALS[task_kind[task]]
        lo, hi = _bin_of(truth, interval)
        assert lo <= measured < hi, (image_id, fixture_subdir, truth, measured)


def test_clean_measurements_sit_close_to_target(bundle):
    root, manifest = bundle
    for image_id, (task, truth, measured) in _measured_values(
            root, manifest, root).items():
        assert measured == pytest.approx(truth, abs=0.5), (image_id, measured)


def test_voter_scripts_cover_every_item_and_profile(bundle):
    root, manifest = bundle
    items = read_items_jsonl(os.path.join(root, "bench", "items.jsonl"))
    with open(os.path.join(root, manifest["voter_scripts"]["correct"])) as fh:
        correct = json.load(fh)
    with open(os.path.join(root, manifest["voter_scripts"]["tool_reliant"])) as fh:
        reliant = json.load(fh)
    for item in items:
        assert set(correct[item.item_id]) == set(PROFILE_IDS)
        for profile in PROFILE_IDS:
            assert correct[item.item_id][profile]["key"] == item.answer
            got = reliant[item.item_id][profile]["key"]
            if item.task_id in MEASUREMENT_FAMILIES:
                assert got != item.answer
            else:
                assert got == item.answer


def test_video_and_caption_frames_load(bundle):
    root, manifest = bundle
    video = load_video(root, manifest)
    assert len(video.frames) == manifest["video"]["frame_count"]
    assert video.id == manifest["video"]["video_id"]
    for frame_id in manifest["video"]["caption_frames"]:
        image = load_image_by_id(root, manifest, frame_id)
        assert image.id == frame_id
        assert image.pixels.shape == video.frames[0].shape


def test_ellipse_axes_hit_requested_scale():
    a, b = ellipse_axes_for_target(175.0)
    # Ramanujan circumference of the chosen axes, in mm, before raster inset
    h = ((a - b) / (a + b)) ** 2
    per = math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))
    assert per * 0.5 == pytest.approx(175.0 + math.pi * 0.5, abs=1e-9)
    assert b / a == pytest.approx(0.88)
