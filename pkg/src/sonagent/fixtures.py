"""Deterministic synthetic fixture bundles.

`build_demo_bundle` writes a self-contained directory that exercises every
pipeline path: display images, per-tool fixture files in the playback
schema, a growth chart table, a small knowledge base, a benchmark item
set with matching scripted voter answers, a frame sequence for the video
workflow, and a run configuration. A sibling `corrupt/` fixture root holds
the same tool outputs with one member of each redundant tool group broken,
for robustness runs. Everything is a pure function of the seed.
"""

import json
import math
import os

import numpy as np
from PIL import Image as PILImage

from .bench import LabeledCase, generate_vqa_items, write_items_jsonl
from .core import ImageRef, TaskKind, Unit, VideoRef
from .deliberation import PROFILE_IDS
from .workflows import DEFAULT_TOOL_TABLE

SPACING_MM_PER_PX = 0.5
# a fitted raster boundary sits about half a pixel inside the ideal ellipse,
# shrinking the recovered circumference by roughly pi pixels
FIT_INSET_PX = math.pi

HC_TARGETS_MM = (155.0, 165.0, 175.0, 185.0)
AC_TARGETS_MM = (225.0, 235.0, 245.0, 255.0)
STOMACH_TARGETS_CM2 = (1.5, 2.5, 3.5)
AOP_TARGETS_DEG = (65.0, 85.0, 95.0)
GA_TARGETS_WK = (19.0, 21.0)
PLANE_CASE_LABELS = ("head", "abdomen", "femur")
BRAIN_CASE_LABELS = ("trans-thalamic", "trans-ventricular", "trans-cerebellar")

IMAGE_SIZE = {TaskKind.HC: 192, TaskKind.AC: 224}
DEFAULT_IMAGE_SIZE = 160

VIDEO_ID = "sweep-0001"
VIDEO_PLANE_SCORES = (
    ("head", 0.30), ("head", 0.55), ("head", 0.90), ("head", 0.60),
    ("head", 0.30), ("head", 0.20), ("head", 0.50), ("head", 0.40),
    ("abdomen", 0.20), ("abdomen", 0.40), ("abdomen", 0.85), ("abdomen", 0.50),
    ("abdomen", 0.30), ("abdomen", 0.60), ("abdomen", 0.20), ("abdomen", 0.10),
)

MEASUREMENT_FAMILIES = (1, 2, 7, 8, 9, 10)


def ellipse_axes_for_target(target_mm: float, spacing: float = SPACING_MM_PER_PX,
                            ratio: float = 0.88) -> tuple:
    """Pick ellipse semi-axes (px) whose fitted circumference lands on target."""
    h = ((1.0 - ratio) / (1.0 + ratio)) ** 2
    factor = 1.0 + 3.0 * h / (10.0 + math.sqrt(4.0 - 3.0 * h))
    total = (target_mm / spacing + FIT_INSET_PX) / (math.pi * factor)  # a + b
    a = total / (1.0 + ratio)
    return a, a * ratio


def _ellipse_mask(size: int, a: float, b: float, theta: float) -> np.ndarray:
    cy = cx = size / 2.0 - 0.5
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    dx, dy = xx - cx, yy - cy
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _punch_hole(mask: np.ndarray, slot: int) -> np.ndarray:
    """Clear a 2x2 interior patch; distinct per slot so no two tools agree on it."""
    out = mask.copy()
    cy, cx = (int(round(c)) for c in np.argwhere(mask).mean(axis=0))
    r = cy - 6, cy - 4
    c = cx - 8 + 6 * slot, cx - 6 + 6 * slot
    out[r[0]:r[1], c[0]:c[1]] = False
    return out


def _rect_mask(size: int, height: int, width: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    top, left = (size - height) // 2, (size - width) // 2
    mask[top:top + height, left:left + width] = True
    return mask


def _display_image(size: int, rng: np.random.Generator, mask=None) -> np.ndarray:
    img = rng.integers(20, 70, size=(size, size), dtype=np.int64)
    if mask is not None:
        img = img + np.where(mask, 120, 0)
    return np.clip(img, 0, 255).astype(np.uint8)


def _save_png(path: str, arr: np.ndarray) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    PILImage.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")


def _write_json(path: str, obj) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


class _ToolPack:
    """Writes tool fixture files under one fixture root."""

    def __init__(self, root: str):
        self.root = root

    def _fixture_path(self, tool_id: str, image_id: str) -> str:
        return os.path.join(self.root, "tools", tool_id, f"{image_id}.json")

    def label(self, tool_id, image_id, label, scores, latency_ms=4.0):
        self._write(tool_id, image_id,
                    {"kind": "label", "label": label, "scores": scores,
                     "latency_ms": latency_ms})

    def scalar(self, tool_id, image_id, value, unit, latency_ms=6.0):
        self._write(tool_id, image_id,
                    {"kind": "scalar", "value": value, "unit": unit,
                     "latency_ms": latency_ms})

    def mask(self, tool_id, image_id, mask, latency_ms=9.0):
        safe = image_id.replace("#", "_")
        rel = os.path.join("masks", tool_id, f"{safe}.png")
        _save_png(os.path.join(self.root, rel),
                  mask.astype(np.uint8) * 255)
        self._write(tool_id, image_id,
                    {"kind": "mask", "mask_file": rel, "latency_ms": latency_ms})

    def _write(self, tool_id, image_id, payload):
        _write_json(self._fixture_path(tool_id, image_id), payload)


def _label_scores(label: str, inventory: tuple) -> dict:
    rest = [c for c in inventory if c != label]
    scores = {label: 0.85}
    share = round(0.15 / len(rest), 6)
    for i, c in enumerate(rest):
        scores[c] = share if i < len(rest) - 1 else round(0.15 - share * (len(rest) - 1), 6)
    return scores


def _write_label_quad(pack, prefix, image_id, label, inventory, corrupt):
    for i, suffix in enumerate("abcd"):
        tool_label = label
        if corrupt and suffix == "a":
            tool_label = next(c for c in inventory if c != label)
        pack.label(f"{prefix}-{suffix}", image_id,
                   tool_label, _label_scores(tool_label, inventory))


def _write_seg_trio(pack, prefix, image_id, base_mask, corrupt):
    for slot, suffix in enumerate("abc"):
        if corrupt and suffix == "a":
            mask = np.zeros_like(base_mask)
        else:
            mask = _punch_hole(base_mask, slot)
        pack.mask(f"{prefix}-{suffix}", image_id, mask)


def _write_scalar_trio(pack, prefix, image_id, value, unit, spread, corrupt):
    offsets = (-spread, 0.0, spread)
    for slot, suffix in enumerate("abc"):
        v = value + offsets[slot]
        if corrupt and suffix == "a":
            v += 50.0
        pack.scalar(f"{prefix}-{suffix}", image_id, round(v, 4), unit)


def _case_specs():
    """All labeled cases with the recipe for their tool fixtures."""
    specs = []
    for i, target in enumerate(HC_TARGETS_MM):
        specs.append(("hc-%04d" % (i + 1), TaskKind.HC, None, target, Unit.MM))
    for i, target in enumerate(AC_TARGETS_MM):
        specs.append(("ac-%04d" % (i + 1), TaskKind.AC, None, target, Unit.MM))
    for i, target in enumerate(STOMACH_TARGETS_CM2):
        specs.append(("st-%04d" % (i + 1), TaskKind.STOMACH_SEG, None, target, Unit.CM2))
    for i, target in enumerate(AOP_TARGETS_DEG):
        specs.append(("aop-%04d" % (i + 1), TaskKind.AOP, None, target, Unit.DEGREES))
    for i, target in enumerate(GA_TARGETS_WK):
        specs.append(("ga-%04d" % (i + 1), TaskKind.GA, None, target, Unit.WEEKS))
    for i, label in enumerate(PLANE_CASE_LABELS):
        specs.append(("plane-%04d" % (i + 1), TaskKind.STANDARD_PLANE, label, None, None))
    for i, label in enumerate(BRAIN_CASE_LABELS):
        specs.append(("brain-%04d" % (i + 1), TaskKind.BRAIN_SUBPLANE, label, None, None))
    return specs


def _stomach_rect(target_cm2: float, size: int) -> np.ndarray:
    area_px = int(round(target_cm2 * 100.0 / (SPACING_MM_PER_PX ** 2)))
    height = 20 + 4 * int(target_cm2)
    width = area_px // height
    if height * width != area_px:  # keep the area exact
        height = 20
        width = area_px // height
    assert height * width == area_px, (target_cm2, area_px)
    return _rect_mask(size, height, width)


def _write_case_tools(pack: _ToolPack, spec, corrupt: bool) -> None:
    image_id, task, label, value, _unit = spec
    size = IMAGE_SIZE.get(task, DEFAULT_IMAGE_SIZE)
    if task is TaskKind.HC:
        a, b = ellipse_axes_for_target(value)
        base = _ellipse_mask(size, a, b, theta=0.3)
        _write_seg_trio(pack, "head-seg", image_id, base, corrupt)
    elif task is TaskKind.AC:
        a, b = ellipse_axes_for_target(value)
        refined = _ellipse_mask(size, a, b, theta=0.1)
        coarse = _ellipse_mask(size, a - 3.0, b - 3.0, theta=0.1)
        # the two-stage pipeline has no redundancy, so it is never corrupted
        pack.mask("abdomen-coarse", image_id, coarse)
        pack.mask("abdomen-prompt", image_id, refined)
    elif task is TaskKind.STOMACH_SEG:
        base = _stomach_rect(value, size)
        _write_seg_trio(pack, "stomach-seg", image_id, base, corrupt)
    elif task is TaskKind.AOP:
        _write_scalar_trio(pack, "aop", image_id, value, "degrees", 0.2, corrupt)
    elif task is TaskKind.GA:
        _write_scalar_trio(pack, "ga", image_id, value, "weeks", 0.1, corrupt)
    elif task is TaskKind.STANDARD_PLANE:
        _write_label_quad(pack, "plane-clf", image_id, label,
                          ("head", "abdomen", "femur", "thorax"), corrupt)
    elif task is TaskKind.BRAIN_SUBPLANE:
        _write_label_quad(pack, "brain-clf", image_id, label,
                          ("trans-thalamic", "trans-ventricular", "trans-cerebellar"),
                          corrupt)
    else:
        raise ValueError(f"no fixture recipe for task {task}")


def _case_display_mask(spec):
    image_id, task, label, value, _unit = spec
    size = IMAGE_SIZE.get(task, DEFAULT_IMAGE_SIZE)
    if task in (TaskKind.HC, TaskKind.AC):
        a, b = ellipse_axes_for_target(value)
        ring = _ellipse_mask(size, a, b, 0.3) & ~_ellipse_mask(size, a - 3, b - 3, 0.3)
        return size, ring
    if task is TaskKind.STOMACH_SEG:
        return size, _stomach_rect(value, size)
    return size, None


def _write_charts_csv(path: str) -> None:
    rows = ["measure,ga_weeks,mean_mm,sd_mm"]
    for ga in range(12, 41, 2):
        mean = 10.0 + 9.5 * ga - 0.05 * ga * ga
        rows.append(f"HC,{ga},{mean:.2f},{6.0 + 0.2 * ga:.2f}")
    for ga in range(12, 41, 2):
        mean = 5.0 + 11.0 * ga - 0.03 * ga * ga
        rows.append(f"AC,{ga},{mean:.2f},{8.0 + 0.3 * ga:.2f}")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")


KNOWLEDGE_DOCS = {
    "plane_checklist.txt": (
        "Standard plane checklist.\n\n"
        "A trans-thalamic view should show the thalami, the cavum septi"
        " pellucidi, and a continuous midline echo. The trans-ventricular"
        " view adds the atrium of the lateral ventricle, while the"
        " trans-cerebellar view angles back through the posterior fossa to"
        " include the cerebellum and cisterna magna.\n\n"
        "For the abdomen, an acceptable circumference plane shows the"
        " stomach bubble and the umbilical vein at the level of the portal"
        " sinus, with the kidneys excluded. Femur views should capture the"
        " full diaphysis with both ends visible.\n"
    ),
    "biometry_reference.txt": (
        "Biometry reference notes.\n\n"
        "Head and abdominal circumference are read from fitted ellipses"
        " rather than traced outlines, which keeps the measurement stable"
        " when the boundary is noisy. Values are compared against"
        " gestational-age charts; a reading outside the 0.1 to 99.9"
        " percentile band is treated as suspect and re-measured from a"
        " fallback contour before it is reported.\n\n"
        "Gestational age from biometry should agree with menstrual dating"
        " within about two weeks. Larger gaps are flagged for review"
        " instead of silently averaged.\n"
    ),
    "labor_progress.txt": (
        "Intrapartum measurement notes.\n\n"
        "The angle of progression is measured on a translabial view"
        " between the long axis of the pubic symphysis and a line to the"
        " leading part of the fetal skull. Readings near 120 degrees or"
        " more are associated with easier operative delivery. Repeated"
        " measurements are combined with an outlier check because a single"
        " mis-traced symphysis can swing the angle by tens of degrees.\n"
    ),
}


def _write_knowledge(root: str) -> None:
    for name, text in KNOWLEDGE_DOCS.items():
        path = os.path.join(root, "knowledge", name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _voter_key(item, wrong: bool) -> str:
    keys = [k for k, _ in item.options]
    if not wrong:
        return item.answer
    idx = keys.index(item.answer)
    return keys[(idx + 1) % len(keys)]


def _voter_script(items, wrong_families=()) -> dict:
    script = {}
    for item in items:
        wrong = item.task_id in wrong_families
        key = _voter_key(item, wrong)
        script[item.item_id] = {
            profile: {"key": key,
                      "rationale": f"{profile} sided with option {key}."}
            for profile in PROFILE_IDS
        }
    return script


def _write_video(root: str, rng: np.random.Generator, pack: _ToolPack,
                 corrupt_pack: _ToolPack) -> dict:
    size = DEFAULT_IMAGE_SIZE
    frame_dir = os.path.join(root, "video", VIDEO_ID)
    hc_axes = ellipse_axes_for_target(175.0, ratio=0.88)
    ac_axes = ellipse_axes_for_target(195.0, ratio=0.88)
    stomach = _stomach_rect(2.5, size)
    for index, (label, score) in enumerate(VIDEO_PLANE_SCORES):
        frame_id = f"{VIDEO_ID}#{index:04d}"
        shape = None
        if label == "head":
            shape = _ellipse_mask(size, *hc_axes, theta=0.2)
        elif label == "abdomen":
            shape = _ellipse_mask(size, *ac_axes, theta=0.1) & ~stomach
        frame = _display_image(size, rng, shape)
        _save_png(os.path.join(frame_dir, f"frame-{index:04d}.png"), frame)
        scores = {label: score}
        rest = [c for c in ("head", "abdomen", "femur", "thorax") if c != label]
        for i, c in enumerate(rest):
            scores[c] = round((1.0 - score) / len(rest), 6)
        scores[rest[-1]] = round(1.0 - sum(scores[k] for k in list(scores)[:-1]), 6)
        for p in (pack, corrupt_pack):
            for suffix in "abcd":
                p.label(f"plane-clf-{suffix}", frame_id, label, scores)
    head_best = f"{VIDEO_ID}#0002"
    abdomen_best = f"{VIDEO_ID}#0010"
    head_mask = _ellipse_mask(size, *hc_axes, theta=0.2)
    ac_refined = _ellipse_mask(size, *ac_axes, theta=0.1)
    ac_coarse = _ellipse_mask(size, ac_axes[0] - 3.0, ac_axes[1] - 3.0, theta=0.1)
    for p, corrupt in ((pack, False), (corrupt_pack, True)):
        _write_seg_trio(p, "head-seg", head_best, head_mask, corrupt)
        _write_label_quad(p, "brain-clf", head_best, "trans-thalamic",
                          BRAIN_CASE_LABELS, corrupt)
        _write_scalar_trio(p, "ga", head_best, 21.0, "weeks", 0.1, corrupt)
        p.mask("abdomen-coarse", abdomen_best, ac_coarse)
        p.mask("abdomen-prompt", abdomen_best, ac_refined)
        _write_seg_trio(p, "stomach-seg", abdomen_best, stomach, corrupt)
        _write_scalar_trio(p, "ga", abdomen_best, 21.0, "weeks", 0.1, corrupt)
    return {
        "video_id": VIDEO_ID,
        "frame_dir": os.path.join("video", VIDEO_ID),
        "frame_count": len(VIDEO_PLANE_SCORES),
        "frame_rate": 2.0,
        "spacing_mm_per_px": SPACING_MM_PER_PX,
        "caption_frames": [head_best, abdomen_best],
    }


def build_demo_bundle(root: str, seed: int = 7) -> dict:
    """Write the full bundle under `root` and return its manifest."""
    rng = np.random.default_rng(seed)
    pack = _ToolPack(root)
    corrupt_pack = _ToolPack(os.path.join(root, "corrupt"))

    specs = _case_specs()
    cases = []
    for spec in specs:
        image_id, task, label, value, unit = spec
        size, shape = _case_display_mask(spec)
        _save_png(os.path.join(root, "images", f"{image_id}.png"),
                  _display_image(size, rng, shape))
        _write_case_tools(pack, spec, corrupt=False)
        _write_case_tools(corrupt_pack, spec, corrupt=True)
        cases.append(LabeledCase(image_id=image_id, task=task, label=label,
                                 value=value, unit=unit))

    items = generate_vqa_items(cases, seed=seed)
    os.makedirs(os.path.join(root, "bench"), exist_ok=True)
    write_items_jsonl(items, os.path.join(root, "bench", "items.jsonl"))
    _write_json(os.path.join(root, "voters", "correct.json"),
                _voter_script(items))
    _write_json(os.path.join(root, "voters", "tool_reliant.json"),
                _voter_script(items, wrong_families=MEASUREMENT_FAMILIES))

    _write_charts_csv(os.path.join(root, "charts.csv"))
    _write_knowledge(root)
    video_meta = _write_video(root, rng, pack, corrupt_pack)

    manifest = {
        "seed": seed,
        "spacing_mm_per_px": SPACING_MM_PER_PX,
        "cases": [
            {"image_id": c.image_id, "task": c.task.value, "label": c.label,
             "value": c.value, "unit": c.unit.value if c.unit else None,
             "image_file": os.path.join("images", f"{c.image_id}.png")}
            for c in cases
        ],
        "video": video_meta,
        "bench_items": os.path.join("bench", "items.jsonl"),
        "voter_scripts": {
            "correct": os.path.join("voters", "correct.json"),
            "tool_reliant": os.path.join("voters", "tool_reliant.json"),
        },
        "corrupt_fixture_root": "corrupt",
        "tool_ids": [tool_id for tool_id, _, _ in DEFAULT_TOOL_TABLE],
        "exam": {"lmp_date": "2026-03-10", "exam_date": "2026-08-05"},
    }
    _write_json(os.path.join(root, "manifest.json"), manifest)

    config = {
        "fixture_root": ".",
        "charts_csv": "charts.csv",
        "knowledge_dir": "knowledge",
        "voter_script": os.path.join("voters", "correct.json"),
        "tools": {"transport": "in_process"},
        "constants": {
            "rag_k": 5,
            "w_tool": 3,
            "keyframe_tau": 0.5,
            "keyframe_window": 3,
            "max_per_plane": 3,
        },
        "exam": {"lmp_date": "2026-03-10", "exam_date": "2026-08-05"},
    }
    _write_json(os.path.join(root, "config.json"), config)
    return manifest


def load_manifest(root: str) -> dict:
    with open(os.path.join(root, "manifest.json"), encoding="utf-8") as fh:
        return json.load(fh)


def load_case_image(root: str, manifest: dict, image_id: str) -> ImageRef:
    """Load one manifest case image as an ImageRef."""
    for case in manifest["cases"]:
        if case["image_id"] == image_id:
            path = os.path.join(root, case["image_file"])
            pixels = np.asarray(PILImage.open(path).convert("L"), dtype=np.uint8)
            return ImageRef(id=image_id, pixels=pixels,
                            spacing_mm_per_px=manifest["spacing_mm_per_px"],
                            source_path=path)
    raise KeyError(f"image id {image_id!r} not in manifest")


def load_image_by_id(root: str, manifest: dict, image_id: str) -> ImageRef:
    """Resolve a case image or a `<video_id>#<index>` frame id."""
    meta = manifest["video"]
    if image_id.startswith(meta["video_id"] + "#"):
        index = int(image_id.rsplit("#", 1)[1])
        path = os.path.join(root, meta["frame_dir"], f"frame-{index:04d}.png")
        pixels = np.asarray(PILImage.open(path).convert("L"), dtype=np.uint8)
        return ImageRef(id=image_id, pixels=pixels,
                        spacing_mm_per_px=meta["spacing_mm_per_px"],
                        source_path=path)
    return load_case_image(root, manifest, image_id)


def load_video(root: str, manifest: dict) -> VideoRef:
    meta = manifest["video"]
    frame_dir = os.path.join(root, meta["frame_dir"])
    frames = []
    for index in range(meta["frame_count"]):
        path = os.path.join(frame_dir, f"frame-{index:04d}.png")
        frames.append(np.asarray(PILImage.open(path).convert("L"), dtype=np.uint8))
    return VideoRef(id=meta["video_id"], frames=tuple(frames),
                    frame_rate=meta["frame_rate"],
                    spacing_mm_per_px=meta["spacing_mm_per_px"])
