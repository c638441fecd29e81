"""Ellipse fitting and circumference math against independent oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ellipse_perimeter_exact, rasterize_ellipse
from sonagent.core import Mask, Unit
from sonagent.errors import AllFitsFailed, DegenerateFit, EmptyMask
from sonagent.fusion import (
    EllipseParams,
    biometry_with_fallback,
    ellipse_circumference,
    fit_ellipse,
)


def mk_mask(data, spacing=0.2):
    h, w = data.shape
    return Mask(width=w, height=h, data=data, spacing_mm_per_px=spacing)


def test_circle_circumference_is_algebraically_exact():
    p = EllipseParams(cx=0, cy=0, a=10.0, b=10.0, theta=0.0, residual=0.0)
    m = ellipse_circumference(p, spacing_mm_per_px=0.5)
    expected = 2.0 * math.pi * 10.0 * 0.5
    assert m.unit is Unit.MM
    assert abs(m.value - expected) / expected < 1e-9


def test_circumference_matches_quadrature_up_to_ratio_20():
    worst = 0.0
    for ratio in np.linspace(1.0, 20.0, 96):
        a, b = 50.0 * ratio, 50.0
        p = EllipseParams(cx=0, cy=0, a=a, b=b, theta=0.0, residual=0.0)
        approx = ellipse_circumference(p, 1.0).value
        exact = ellipse_perimeter_exact(a, b)
        worst = max(worst, abs(approx - exact) / exact)
    assert worst < 1e-4


@given(
    a=st.floats(min_value=1.0, max_value=500.0),
    ratio=st.floats(min_value=1.0, max_value=20.0),
)
def test_circumference_bounded_by_circle_equivalents(a, ratio):
    # perimeter of an ellipse lies between the perimeters of its in/circumscribed circles
    b = a / ratio
    p = EllipseParams(cx=0, cy=0, a=a, b=b, theta=0.0, residual=0.0)
    c = ellipse_circumference(p, 1.0).value
    assert 2 * math.pi * b - 1e-9 <= c <= 2 * math.pi * a + 1e-9


def test_fit_recovers_fifty_rasterized_ellipses():
    rng = np.random.default_rng(7)
    for _ in range(50):
        a = rng.uniform(25, 60)
        b = rng.uniform(12, a / 1.2)
        theta = rng.uniform(0, math.pi)
        cx, cy = rng.uniform(70, 90), rng.uniform(70, 90)
        data = rasterize_ellipse(160, 160, cx, cy, a, b, theta)
        fit = fit_ellipse(mk_mask(data))
        assert abs(fit.a - a) < 2.0 and abs(fit.b - b) < 2.0
        assert math.hypot(fit.cx - cx, fit.cy - cy) < 2.0
        d = abs(fit.theta - theta) % math.pi
        assert min(d, math.pi - d) < math.radians(3.0)
        assert fit.residual < 2.0, "clean rasterization must fit under the residual cap"


def test_fit_ignores_smaller_secondary_component():
    data = rasterize_ellipse(160, 160, 80, 80, 40, 25, 0.3)
    data[5:10, 5:10] = True  # small distractor blob
    fit = fit_ellipse(mk_mask(data))
    assert math.hypot(fit.cx - 80, fit.cy - 80) < 2.0


def test_fit_error_contracts():
    empty = np.zeros((20, 20), dtype=bool)
    with pytest.raises(EmptyMask):
        fit_ellipse(mk_mask(empty))

    single = empty.copy()
    single[10, 10] = True
    with pytest.raises(DegenerateFit):
        fit_ellipse(mk_mask(single))

    line = np.zeros((20, 20), dtype=bool)
    line[10, 2:18] = True
    with pytest.raises(DegenerateFit):
        fit_ellipse(mk_mask(line))


def test_ellipse_params_invariants():
    with pytest.raises(ValueError):
        EllipseParams(cx=0, cy=0, a=3.0, b=5.0, theta=0.0, residual=0.0)
    with pytest.raises(ValueError):
        EllipseParams(cx=0, cy=0, a=5.0, b=3.0, theta=math.pi, residual=0.0)
    with pytest.raises(ValueError):
        EllipseParams(cx=0, cy=0, a=5.0, b=3.0, theta=0.0, residual=-1.0)


def test_biometry_prefers_fused_mask():
    data = rasterize_ellipse(160, 160, 80, 80, 40, 25, 0.3)
    fused = mk_mask(data)
    other = mk_mask(rasterize_ellipse(160, 160, 80, 80, 30, 20, 0.3))
    measurement, trace = biometry_with_fallback(fused, [("t1", other)])
    assert trace["source"] == "fused"
    expected = ellipse_circumference(fit_ellipse(fused), fused.spacing_mm_per_px).value
    assert measurement.value == pytest.approx(expected, rel=1e-12)


def test_biometry_falls_back_when_fused_fit_degenerates():
    bad = np.zeros((160, 160), dtype=bool)
    bad[80, 10:150] = True  # line: unfittable
    good = rasterize_ellipse(160, 160, 80, 80, 40, 25, 0.3)
    measurement, trace = biometry_with_fallback(mk_mask(bad), [("t1", mk_mask(good))])
    assert trace["source"] == "fallback:t1"
    assert trace["attempts"][0]["status"] == "fit_failed"
    assert measurement.value > 0


def test_biometry_falls_back_on_high_residual():
    # two disjoint blobs fuse into one "component set" whose best single
    # component is clean, so corrupt the largest component itself instead
    rng = np.random.default_rng(3)
    noisy = rasterize_ellipse(160, 160, 80, 80, 40, 25, 0.3)
    noise = rng.random(noisy.shape) < 0.35
    noisy = noisy ^ (noise & noisy)  # chew holes and ragged edges
    noisy[70:90, 70:90] = True  # keep it one big ugly component
    good = rasterize_ellipse(160, 160, 80, 80, 40, 25, 0.3)
    measurement, trace = biometry_with_fallback(
        mk_mask(noisy), [("t1", mk_mask(good))], residual_cap=0.5
    )
    assert trace["source"] == "fallback:t1"
    assert measurement.value > 0


def test_biometry_accepts_missing_fused_mask():
    good = rasterize_ellipse(160, 160, 80, 80, 40, 25, 0.3)
    measurement, trace = biometry_with_fallback(None, [("t1", mk_mask(good))])
    assert trace["source"] == "fallback:t1"
    assert measurement.provenance == "fallback:t1"


def test_biometry_raises_when_every_candidate_fails():
    bad = np.zeros((40, 40), dtype=bool)
    bad[20, 5:35] = True
    with pytest.raises(AllFitsFailed):
        biometry_with_fallback(mk_mask(bad), [("t1", mk_mask(bad.copy()))])


@settings(deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_fit_theta_and_axis_ordering_invariants(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(15, 50)
    b = rng.uniform(8, a)
    data = rasterize_ellipse(128, 128, 64, 64, a, b, rng.uniform(0, math.pi))
    fit = fit_ellipse(mk_mask(data))
    assert fit.a >= fit.b > 0
    assert 0.0 <= fit.theta < math.pi
