import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remgrasp.geometry import (Grasp, angle_distance, grasp_success, normalize_angle,
                               polygon_area, rect_vertices, rotated_iou)
from remgrasp.oracles import monte_carlo_iou


def as_set(v, nd=9):
    return {(round(float(x), nd) + 0.0, round(float(y), nd) + 0.0) for x, y in v}


def test_axis_aligned_vertices():
    v = rect_vertices(Grasp(0, 0, 0, 2, 1))
    assert as_set(v) == {(1, -0.5), (1, 0.5), (-1, 0.5), (-1, -0.5)}
    assert polygon_area(v) > 0  # counter-clockwise


def test_quarter_turn_swaps_extents():
    v = rect_vertices(Grasp(0, 0, 90, 2, 1))
    assert np.ptp(v[:, 0]) == pytest.approx(1.0)
    assert np.ptp(v[:, 1]) == pytest.approx(2.0)


def test_diamond():
    v = rect_vertices(Grasp(0, 0, 45, math.sqrt(2), math.sqrt(2)))
    assert as_set(v) == {(1, 0), (0, 1), (-1, 0), (0, -1)}


def test_theta_normalized():
    assert Grasp(0, 0, 190, 1, 1).theta == pytest.approx(10)
    assert Grasp(0, 0, -30, 1, 1).theta == pytest.approx(150)
    assert 0 <= normalize_angle(-1e-17) < 180
    with pytest.raises(ValueError):
        Grasp(0, 0, 0, 0, 1)


def test_iou_examples():
    sq = Grasp(0, 0, 0, 1, 1)
    assert rotated_iou(sq, sq) == 1.0
    assert rotated_iou(sq, Grasp(2, 0, 0, 1, 1)) == 0.0
    rot = Grasp(0, 0, 45, 1, 1)
    assert rotated_iou(sq, rot) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert abs(rotated_iou(sq, rot) - monte_carlo_iou(sq, rot)) < 2e-3


def test_touching_is_zero():
    assert rotated_iou(Grasp(0, 0, 0, 1, 1), Grasp(1, 0, 0, 1, 1)) == 0.0


grasps = st.builds(
    Grasp,
    st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 180, exclude_max=True),
    st.floats(0.2, 4), st.floats(0.2, 4),
)


@settings(max_examples=200, deadline=None)
@given(grasps, grasps)
def test_iou_symmetric_and_bounded(a, b):
    v = rotated_iou(a, b)
    assert v == rotated_iou(b, a)
    assert 0.0 <= v <= 1.0


@settings(max_examples=200, deadline=None)
@given(grasps, grasps, st.floats(-10, 10), st.floats(-10, 10), st.floats(-180, 180))
def test_iou_rigid_motion_invariant(a, b, tx, ty, phi):
    t = math.radians(phi)
    c, s = math.cos(t), math.sin(t)

    def move(g):
        return Grasp(c * g.x - s * g.y + tx, s * g.x + c * g.y + ty, g.theta + phi, g.w, g.h)

    assert abs(rotated_iou(a, b) - rotated_iou(move(a), move(b))) <= 1e-9


def axis_iou(a, b):
    ix = max(0.0, min(a.x + a.w / 2, b.x + b.w / 2) - max(a.x - a.w / 2, b.x - b.w / 2))
    iy = max(0.0, min(a.y + a.h / 2, b.y + b.h / 2) - max(a.y - a.h / 2, b.y - b.h / 2))
    inter = ix * iy
    return inter / (a.w * a.h + b.w * b.h - inter)


def test_axis_aligned_closed_form(rng):
    for _ in range(200):
        x1, y1, x2, y2 = rng.uniform(-2, 2, 4)
        w1, h1, w2, h2 = rng.uniform(0.5, 3, 4)
        a, b = Grasp(x1, y1, 0, w1, h1), Grasp(x2, y2, 0, w2, h2)
        assert abs(rotated_iou(a, b) - axis_iou(a, b)) <= 1e-12


def test_iou_against_monte_carlo(rng):
    for k in range(5):
        a = Grasp(*rng.uniform(-1, 1, 2), rng.uniform(0, 180), *rng.uniform(0.5, 2.5, 2))
        b = Grasp(*rng.uniform(-1, 1, 2), rng.uniform(0, 180), *rng.uniform(0.5, 2.5, 2))
        assert abs(rotated_iou(a, b) - monte_carlo_iou(a, b, seed=k)) < 2e-3


def test_success_rule():
    g = Grasp(10, 10, 20, 8, 4)
    assert grasp_success(g, g, 0.99)
    # IOU well above threshold but 40 degrees apart
    assert not grasp_success(Grasp(10, 10, 60, 8, 4), g, 0.1)
    assert angle_distance(175, 5) == pytest.approx(10)
    assert grasp_success(Grasp(0, 0, 175, 4, 4), Grasp(0, 0, 5, 4, 4), 0.25)


def test_success_iou_boundary():
    a = Grasp(0, 0, 0, 2, 1)
    b = Grasp(0.5, 0, 0, 2, 1)  # IOU 1.5 / 2.5 = 0.6
    assert grasp_success(a, b, 0.6)
    assert not grasp_success(a, b, 0.61)
