"""Deterministic fusion rules and biometric geometry.

Covers the ensemble rules the expert agents apply (pixel/label voting,
outlier correction, consistency weighting, prompt pipelines, priority
fallbacks) plus direct least-squares ellipse fitting and perimeter math
for circumference measurements. Everything here is a pure function.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import Mask, Measurement, Unit
from .errors import (
    AllFitsFailed,
    DegenerateFit,
    DimensionMismatch,
    EmptyMask,
)

# Defaults; the underlying rules come from the literature, the constants are ours.
OUTLIER_DELTA_DEFAULT = 15.0      # degrees, AoP outlier gate
CONSISTENCY_EPS_DEFAULT = 0.5     # weeks, GA weighting floor
MIN_MASK_AREA_DEFAULT = 64        # px, stomach-mask reliability floor
RESIDUAL_CAP_DEFAULT = 2.0        # px, mean gradient-normalized fit residual

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=int)


@dataclass(frozen=True)
class EllipseParams:
    """Fitted conic: center and semi-axes in pixels, orientation in [0, pi)."""

    cx: float
    cy: float
    a: float  # semi-major
    b: float  # semi-minor
    theta: float
    residual: float  # mean gradient-normalized algebraic distance, px scale

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise ValueError("requires a >= b > 0")
        if not (0.0 <= self.theta < math.pi):
            raise ValueError("theta must lie in [0, pi)")
        if self.residual < 0:
            raise ValueError("residual must be >= 0")

    def to_dict(self) -> dict:
        return {
            "cx": self.cx, "cy": self.cy, "a": self.a, "b": self.b,
            "theta": self.theta, "residual": self.residual,
        }


@dataclass(frozen=True)
class PromptGeometry:
    """Bounding box plus an interior point, both in pixel coordinates."""

    box: tuple  # (x, y, w, h)
    point: tuple  # (px, py)

    def __post_init__(self):
        x, y, w, h = self.box
        px, py = self.point
        if w < 1 or h < 1:
            raise ValueError("box must have positive extent")
        if not (x <= px < x + w and y <= py < y + h):
            raise ValueError("point must lie inside box")

    def to_dict(self) -> dict:
        return {"box": list(self.box), "point": list(self.point)}


def _check_same_dims(masks) -> None:
    if not masks:
        raise ValueError("need at least one mask")
    shape = masks[0].data.shape
    spacing = masks[0].spacing_mm_per_px
    for m in masks[1:]:
        if m.data.shape != shape:
            raise DimensionMismatch(f"mask shapes differ: {m.data.shape} vs {shape}")
        if m.spacing_mm_per_px != spacing:
            raise DimensionMismatch("mask spacings differ")


def pixel_majority_vote(masks: list) -> Mask:
    """Fuse masks per pixel: foreground iff strictly more than half agree.

    Even-count ties resolve to background (conservative segmentation).
    """
    _check_same_dims(masks)
    counts = np.zeros(masks[0].data.shape, dtype=np.int32)
    for m in masks:
        counts += m.data
    fused = counts * 2 > len(masks)
    return Mask(
        width=masks[0].width,
        height=masks[0].height,
        data=fused,
        spacing_mm_per_px=masks[0].spacing_mm_per_px,
    )


def mask_majority_with_fallback(
    masks_by_tool: list,
    fallback_order: list,
    min_area_px: int = MIN_MASK_AREA_DEFAULT,
) -> tuple:
    """Pixel-majority fusion with ordered per-tool fallback for unreliable results.

    `masks_by_tool` is an ordered list of (tool_id, Mask). If the fused
    foreground area falls below `min_area_px`, the first fallback tool
    whose own mask meets the floor wins; failing that, the largest mask.
    Returns (mask, trace).
    """
    by_tool = dict(masks_by_tool)
    masks = [m for _, m in masks_by_tool]
    fused = pixel_majority_vote(masks)
    trace = {
        "rule": "mask_majority_with_fallback",
        "min_area_px": min_area_px,
        "fused_area_px": fused.area_px,
        "tool_areas_px": {tid: m.area_px for tid, m in masks_by_tool},
    }
    if fused.area_px >= min_area_px:
        trace["decision"] = "majority"
        return fused, trace
    for tool_id in fallback_order:
        m = by_tool.get(tool_id)
        if m is not None and m.area_px >= min_area_px:
            trace["decision"] = f"fallback:{tool_id}"
            return m, trace
    tool_id, m = max(masks_by_tool, key=lambda kv: kv[1].area_px)
    trace["decision"] = "fallback:largest"
    trace["fallback_tool"] = tool_id
    return m, trace


def _round_half_down(v: float) -> int:
    # keeps the prompt point on the lattice and inside the component box
    return int(math.ceil(v - 0.5))


def largest_component_prompt(mask: Mask) -> PromptGeometry:
    """Bounding box and centroid of the largest 4-connected component.

    Size ties resolve to the component labeled first in raster order;
    the centroid rounds half-down onto the pixel lattice.
    """
    if mask.area_px == 0:
        raise EmptyMask("mask has no foreground pixels")
    labels, n = ndimage.label(mask.data, structure=_FOUR_CONN)
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, n + 1))
    best = int(np.argmax(sizes)) + 1  # argmax returns the first (raster-order) max
    ys, xs = np.nonzero(labels == best)
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    point = (_round_half_down(float(xs.mean())), _round_half_down(float(ys.mean())))
    return PromptGeometry(box=(x0, y0, x1 - x0 + 1, y1 - y0 + 1), point=point)


def sequential_prompt_pipeline(
    coarse_tool_id: str,
    prompt_tool_id: str,
    image,
    invoke_mask,
) -> tuple:
    """Two-stage segmentation: coarse mask -> geometry prompt -> refined mask.

    `invoke_mask(tool_id, image, params)` must return a Mask (the caller
    adapts its tool transport). An empty coarse mask or a failing prompt
    stage degrades to the coarse mask with a flag rather than erroring.
    Returns (mask, trace).
    """
    coarse = invoke_mask(coarse_tool_id, image, {})
    trace = {
        "rule": "sequential_prompt_pipeline",
        "stages": [{"tool_id": coarse_tool_id, "role": "coarse", "area_px": coarse.area_px}],
    }
    if coarse.area_px == 0:
        trace["flag"] = "prompt_skipped"
        return coarse, trace
    geometry = largest_component_prompt(coarse)
    trace["prompt"] = geometry.to_dict()
    try:
        refined = invoke_mask(prompt_tool_id, image, geometry.to_dict())
    except Exception as exc:
        trace["flag"] = "prompt_failed"
        trace["stages"].append({"tool_id": prompt_tool_id, "role": "prompt", "error": str(exc)})
        return coarse, trace
    trace["stages"].append(
        {"tool_id": prompt_tool_id, "role": "prompt", "area_px": refined.area_px}
    )
    return refined, trace


def agreement_fusion(outputs: list, priority: list) -> tuple:
    """Label fusion by agreement count; count ties go to the highest-priority tool.

    `outputs` is a list of (tool_id, label, confidence); `priority` must
    cover every tool id. Returns (label, agreement_count).
    """
    if not outputs:
        raise ValueError("need at least one labeled output")
    rank = {tid: i for i, tid in enumerate(priority)}
    for tid, _, _ in outputs:
        if tid not in rank:
            raise ValueError(f"priority list does not cover tool {tid!r}")
    counts = Counter(label for _, label, _ in outputs)
    top = max(counts.values())
    tied = {label for label, c in counts.items() if c == top}
    if len(tied) == 1:
        return tied.pop(), top
    best_rank = {
        label: min(rank[tid] for tid, lab, _ in outputs if lab == label)
        for label in tied
    }
    winner = min(tied, key=lambda lab: best_rank[lab])
    return winner, top


def label_majority_vote(labels: list) -> str:
    """Plurality label; ties resolve to the lexicographically smallest."""
    if not labels:
        raise ValueError("need at least one label")
    counts = Counter(labels)
    top = max(counts.values())
    return min(label for label, c in counts.items() if c == top)


def _median(values) -> float:
    s = sorted(values)
    n = len(s)
    mid = n // 2
    return float(s[mid]) if n % 2 else (s[mid - 1] + s[mid]) / 2.0


def median_outlier_correct(values: list, delta: float = OUTLIER_DELTA_DEFAULT) -> tuple:
    """Replace values further than `delta` from the median by the median, then average.

    Returns (fused_value, corrected_flags).
    """
    if not values:
        raise ValueError("need at least one value")
    if not (delta > 0):
        raise ValueError("delta must be > 0")
    m = _median(values)
    corrected = [m if abs(v - m) > delta else float(v) for v in values]
    flags = [abs(v - m) > delta for v in values]
    return sum(corrected) / len(corrected), flags


def consistency_weighted(values: list, epsilon: float = CONSISTENCY_EPS_DEFAULT) -> float:
    """Weighted mean with weights 1 / (epsilon + |v - median|)."""
    if not values:
        raise ValueError("need at least one value")
    if not (epsilon > 0):
        raise ValueError("epsilon must be > 0")
    m = _median(values)
    weights = [1.0 / (epsilon + abs(v - m)) for v in values]
    return sum(w * v for w, v in zip(weights, values)) / sum(weights)


def _boundary_points(data: np.ndarray) -> tuple:
    """Outer boundary of the largest 4-connected component, as (xs, ys)."""
    labels, n = ndimage.label(data, structure=_FOUR_CONN)
    if n == 0:
        raise EmptyMask("mask has no foreground pixels")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, n + 1))
    comp = labels == (int(np.argmax(sizes)) + 1)
    # interior holes do not belong to the outer boundary
    comp = ndimage.binary_fill_holes(comp)
    pad = np.pad(comp, 1, constant_values=False)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    edge = comp & ~interior
    ys, xs = np.nonzero(edge)
    return xs.astype(float), ys.astype(float)


def _fit_conic_direct(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Direct least-squares conic fit constrained to an ellipse (4ac - b^2 > 0).

    Data is centered first for conditioning; coefficients are mapped back.
    """
    mx, my = xs.mean(), ys.mean()
    x, y = xs - mx, ys - my
    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1, s2, s3 = d1.T @ d1, d1.T @ d2, d2.T @ d2
    t = -np.linalg.solve(s3, s2.T)
    m = s1 + s2 @ t
    m = np.array([m[2] / 2.0, -m[1], m[0] / 2.0])
    _, vec = np.linalg.eig(m)
    vec = np.real(vec)
    cond = 4.0 * vec[0] * vec[2] - vec[1] ** 2
    good = np.nonzero(cond > 0)[0]
    if good.size == 0:
        raise DegenerateFit("no elliptical solution")
    a1 = np.real(vec[:, good[0]])
    a2 = t @ a1
    A, B, C = a1
    D, E, F = a2
    # undo the centering shift
    D0 = D - 2 * A * mx - B * my
    E0 = E - 2 * C * my - B * mx
    F0 = F + A * mx * mx + B * mx * my + C * my * my - D * mx - E * my
    return np.array([A, B, C, D0, E0, F0])


def _conic_to_ellipse(c: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> EllipseParams:
    A, B, C, D, E, F = c
    den = 4 * A * C - B * B
    if den <= 0:
        raise DegenerateFit("conic is not an ellipse")
    cx = (B * E - 2 * C * D) / den
    cy = (B * D - 2 * A * E) / den
    if A < 0:
        A, B, C, D, E, F = -A, -B, -C, -D, -E, -F
    k = -(A * cx * cx + B * cx * cy + C * cy * cy + D * cx + E * cy + F)
    if k <= 0:
        raise DegenerateFit("degenerate conic constant")
    quad = np.array([[A, B / 2.0], [B / 2.0, C]])
    evals, evecs = np.linalg.eigh(quad)
    if evals[0] <= 0:
        raise DegenerateFit("quadratic form not positive definite")
    a = math.sqrt(k / evals[0])  # smaller eigenvalue -> longer axis
    b = math.sqrt(k / evals[1])
    theta = math.atan2(evecs[1, 0], evecs[0, 0]) % math.pi
    # mean |Q| / |grad Q|: algebraic distance normalized to pixel scale
    q = A * xs * xs + B * xs * ys + C * ys * ys + D * xs + E * ys + F
    gx = 2 * A * xs + B * ys + D
    gy = B * xs + 2 * C * ys + E
    grad = np.sqrt(gx * gx + gy * gy)
    grad = np.where(grad > 0, grad, 1.0)
    residual = float(np.mean(np.abs(q) / grad))
    params = EllipseParams(
        cx=float(cx), cy=float(cy), a=float(a), b=float(b),
        theta=float(theta), residual=residual,
    )
    if not all(np.isfinite([params.cx, params.cy, params.a, params.b])):
        raise DegenerateFit("non-finite ellipse parameters")
    return params


def fit_ellipse(mask: Mask) -> EllipseParams:
    """Fit an ellipse to the outer boundary of the mask's largest component."""
    if mask.area_px == 0:
        raise EmptyMask("mask has no foreground pixels")
    xs, ys = _boundary_points(mask.data)
    if xs.size < 6:
        raise DegenerateFit(f"only {xs.size} boundary pixels; need >= 6")
    try:
        conic = _fit_conic_direct(xs, ys)
    except np.linalg.LinAlgError as exc:
        raise DegenerateFit(f"singular system: {exc}") from exc
    return _conic_to_ellipse(conic, xs, ys)


def ellipse_circumference(params: EllipseParams, spacing_mm_per_px: float,
                          provenance: str = "ellipse_fit") -> Measurement:
    """Perimeter via Ramanujan's second approximation, scaled to millimeters.

    Relative error stays below 1e-4 for axis ratios up to 20.
    """
    if not (spacing_mm_per_px > 0):
        raise ValueError("spacing must be > 0")
    a, b = params.a, params.b
    h = ((a - b) / (a + b)) ** 2
    c_px = math.pi * (a + b) * (1.0 + 3.0 * h / (10.0 + math.sqrt(4.0 - 3.0 * h)))
    return Measurement(value=c_px * spacing_mm_per_px, unit=Unit.MM, provenance=provenance)


def biometry_with_fallback(
    fused_mask,
    per_tool_masks: list,
    residual_cap: float = RESIDUAL_CAP_DEFAULT,
    spacing_mm_per_px: float | None = None,
) -> tuple:
    """Circumference from the fused mask, falling back per tool on bad fits.

    `per_tool_masks` is an ordered list of (tool_id, Mask) tried in priority
    order whenever the preceding candidate errors or exceeds `residual_cap`.
    `fused_mask` may be None to start directly from the per-tool masks.
    Returns (Measurement, trace).
    """
    candidates = []
    if fused_mask is not None:
        candidates.append(("fused", fused_mask))
    candidates.extend((f"fallback:{tid}", m) for tid, m in per_tool_masks)
    if not candidates:
        raise ValueError("need at least one candidate mask")
    attempts = []
    for source, mask in candidates:
        try:
            params = fit_ellipse(mask)
        except (EmptyMask, DegenerateFit) as exc:
            attempts.append({"source": source, "status": "fit_failed", "error": str(exc)})
            continue
        if params.residual > residual_cap:
            attempts.append(
                {"source": source, "status": "residual_exceeded", "residual": params.residual}
            )
            continue
        spacing = spacing_mm_per_px or mask.spacing_mm_per_px
        measurement = ellipse_circumference(params, spacing, provenance=source)
        attempts.append({"source": source, "status": "ok", "residual": params.residual})
        trace = {
            "rule": "biometry_with_fallback",
            "residual_cap": residual_cap,
            "source": source,
            "ellipse": params.to_dict(),
            "attempts": attempts,
        }
        return measurement, trace
    raise AllFitsFailed(f"no candidate produced an acceptable fit: {attempts}")
