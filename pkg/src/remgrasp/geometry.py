"""Oriented grasp rectangles, exact rotated IOU and the Jaccard success rule."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


def normalize_angle(theta: float) -> float:
    """Map an angle in degrees into [0, 180)."""
    t = math.fmod(theta, 180.0)
    if t < 0:
        t += 180.0
    # fmod of e.g. -1e-17 lands on 180.0 after the shift
    return 0.0 if t >= 180.0 else t


def angle_distance(a: float, b: float) -> float:
    """Distance between two grasp angles modulo 180 degrees, in [0, 90]."""
    d = abs(normalize_angle(a) - normalize_angle(b))
    return min(d, 180.0 - d)


@dataclass(frozen=True)
class Grasp:
    """5D grasp rectangle plus graspable probability.

    ``w`` is the gripper opening, measured along the direction ``theta``
    (degrees, counter-clockwise from +x); ``h`` is the plate size.
    """

    x: float
    y: float
    theta: float
    w: float
    h: float
    z: float = 1.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"grasp sides must be positive, got w={self.w}, h={self.h}")
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @property
    def area(self) -> float:
        return self.w * self.h

    def scaled(self, factor: float) -> "Grasp":
        return replace(self, x=self.x * factor, y=self.y * factor,
                       w=self.w * factor, h=self.h * factor)

    def as_tuple(self):
        return (self.x, self.y, self.theta, self.w, self.h, self.z)


def rect_vertices(g: Grasp) -> np.ndarray:
    """Four counter-clockwise corners of the grasp rectangle, shape (4, 2).

    The first edge runs along ``theta`` and has length ``w``, matching the
    vertex order read from label files.
    """
    t = math.radians(g.theta)
    c, s = math.cos(t), math.sin(t)
    hw, hh = g.w / 2.0, g.h / 2.0
    local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([g.x, g.y])


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counter-clockwise order)."""
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject, clip):
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return out


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def intersection_area(p: Grasp, g: Grasp) -> float:
    # cheap reject on circumscribed circles
    rp = 0.5 * math.hypot(p.w, p.h)
    rg = 0.5 * math.hypot(g.w, g.h)
    if math.hypot(p.x - g.x, p.y - g.y) >= rp + rg:
        return 0.0
    poly = clip_convex(rect_vertices(p), rect_vertices(g))
    return max(polygon_area(poly), 0.0)


def rotated_iou(p: Grasp, g: Grasp) -> float:
    """Exact area IOU of two oriented rectangles."""
    if p.area <= 0 or g.area <= 0:
        raise ValueError("degenerate rectangle")
    a, b = (p, g) if _order_key(p) <= _order_key(g) else (g, p)
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return min(max(inter / union, 0.0), 1.0)


def _order_key(g: Grasp):
    # canonical argument order keeps the result exactly symmetric
    return (g.x, g.y, g.theta, g.w, g.h)


def grasp_success(pred: Grasp, truth: Grasp, iou_threshold: float = 0.25,
                  max_angle: float = 30.0) -> bool:
    """Jaccard rule: IOU at least the threshold and angle gap under 30 degrees."""
    if angle_distance(pred.theta, truth.theta) >= max_angle:
        return False
    return rotated_iou(pred, truth) >= iou_threshold


def any_success(pred: Grasp, truths, iou_threshold: float = 0.25) -> bool:
    return any(grasp_success(pred, t, iou_threshold) for t in truths)
