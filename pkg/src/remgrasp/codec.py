"""Encode ground-truth grasps into grid targets and decode raw head outputs.

Per anchor the head emits ``[t_x, t_y, t_w, t_h, t_z, *angle]`` where the
angle block depends on the angle mode:

* ``reg``: one channel, theta = 180 * sigmoid(t)
* ``cls``: 18 logits over the bins 0, 10, ..., 170 degrees
* ``rot``: 3 logits over rotation anchors (30, 90, 150) followed by 3
  residual channels, theta = anchor + 30 * t_residual

All geometry in this module is in grid-cell units; ``cell_pixels`` converts
to image pixels at the boundary.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from .geometry import Grasp, angle_distance, normalize_angle
from .numerics import ShapeError, logit, sigmoid

log = logging.getLogger(__name__)

MULTI_ANCHORS = ((0.76, 1.99), (0.76, 3.2), (1.99, 0.76), (1.99, 1.99),
                 (1.99, 3.2), (3.2, 3.2), (3.2, 0.76))
SINGLE_ANCHORS = ((1.99, 1.99),)

CLS_STEP = 10.0
N_CLS = 18
ROT_ANCHORS = np.array([30.0, 90.0, 150.0])
ROT_SPAN = 30.0
COARSE_BINS = np.array([0.0, 45.0, 90.0, 135.0])
N_BASE = 5  # t_x, t_y, t_w, t_h, t_z
_OFFSET_EPS = 1e-12


@dataclass(frozen=True)
class AnchorSet:
    boxes: tuple

    def __post_init__(self):
        boxes = tuple((float(pw), float(ph)) for pw, ph in self.boxes)
        if not boxes:
            raise ValueError("anchor set must be nonempty")
        if any(pw <= 0 or ph <= 0 for pw, ph in boxes):
            raise ValueError("anchor sides must be positive")
        object.__setattr__(self, "boxes", boxes)

    @classmethod
    def multi(cls):
        return cls(MULTI_ANCHORS)

    @classmethod
    def single(cls):
        return cls(SINGLE_ANCHORS)

    @classmethod
    def named(cls, name: str):
        if name == "multi":
            return cls.multi()
        if name == "single":
            return cls.single()
        raise ValueError(f"unknown anchor preset {name!r}")

    def __len__(self):
        return len(self.boxes)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.boxes)


@dataclass(frozen=True)
class AngleMode:
    variant: str = "cls"

    def __post_init__(self):
        if self.variant not in ("reg", "cls", "rot"):
            raise ValueError(f"angle mode must be reg, cls or rot, got {self.variant!r}")

    @property
    def angle_channels(self) -> int:
        return {"reg": 1, "cls": N_CLS, "rot": 2 * len(ROT_ANCHORS)}[self.variant]

    @property
    def depth(self) -> int:
        return N_BASE + self.angle_channels


def split_head(raw, n_anchors: int, mode: AngleMode) -> np.ndarray:
    """View raw (..., S, S, A*D) output as (..., S, S, A, D)."""
    raw = np.asarray(raw, dtype=np.float64)
    d = mode.depth
    if raw.ndim < 3 or raw.shape[-1] != n_anchors * d:
        raise ShapeError(f"head has {raw.shape[-1] if raw.ndim else 0} channels, "
                         f"expected {n_anchors} anchors x {d}")
    return raw.reshape(raw.shape[:-1] + (n_anchors, d))


def _cell_offsets(shape):
    # shape (..., S, S, A): row index is c_y, column index is c_x
    s_rows, s_cols = shape[-3], shape[-2]
    cy = np.arange(s_rows, dtype=np.float64)[:, None, None]
    cx = np.arange(s_cols, dtype=np.float64)[None, :, None]
    return cx, cy


def decode_angle(angle, mode: AngleMode) -> np.ndarray:
    """Angle block (..., angle_channels) to degrees in [0, 180)."""
    if mode.variant == "reg":
        theta = 180.0 * sigmoid(angle[..., 0])
    elif mode.variant == "cls":
        theta = CLS_STEP * np.argmax(angle, axis=-1)
    else:
        n = len(ROT_ANCHORS)
        pick = np.argmax(angle[..., :n], axis=-1)
        resid = np.take_along_axis(angle[..., n:], pick[..., None], axis=-1)[..., 0]
        theta = ROT_ANCHORS[pick] + ROT_SPAN * resid
    return np.mod(np.mod(theta, 180.0), 180.0)


def decode_arrays(raw, anchors: AnchorSet, mode: AngleMode) -> dict:
    """Vectorised decode; every array has shape (..., S, S, A), grid units."""
    h = split_head(raw, len(anchors), mode)
    cx, cy = _cell_offsets(h.shape[:-1])
    pw, ph = anchors.array[:, 0], anchors.array[:, 1]
    return {
        "x": sigmoid(h[..., 0]) + cx,
        "y": sigmoid(h[..., 1]) + cy,
        "w": pw * np.exp(h[..., 2]),
        "h": ph * np.exp(h[..., 3]),
        "z": sigmoid(h[..., 4]),
        "theta": decode_angle(h[..., N_BASE:], mode),
    }


def decode(raw, anchors: AnchorSet, mode: AngleMode, cell_pixels: float = 1.0) -> list:
    """One Grasp per (cell, anchor) of a single (S, S, A*D) output, image units."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3:
        raise ShapeError(f"decode expects a single (S, S, C) output, got {raw.shape}")
    d = decode_arrays(raw, anchors, mode)
    cols = [d[k].ravel() for k in ("x", "y", "theta", "w", "h", "z")]
    return [Grasp(x * cell_pixels, y * cell_pixels, t, w * cell_pixels, h * cell_pixels, z)
            for x, y, t, w, h, z in zip(*cols)]


def select_grasps(detections, threshold: float = 0.25) -> list:
    """Detections with z >= threshold, most probable first."""
    kept = [g for g in detections if g.z >= threshold]
    return sorted(kept, key=lambda g: -g.z)


def best_grasp(detections):
    """The argmax-z detection, or None for an empty list."""
    best = None
    for g in detections:
        if best is None or g.z > best.z:
            best = g
    return best


def top_grasps(raw, anchors: AnchorSet, mode: AngleMode, cell_pixels: float = 1.0,
               prob_threshold: float = 0.25) -> list:
    """Argmax-z grasp of each (B, S, S, A*D) output in image units, or None
    when no slot reaches ``prob_threshold``."""
    raw = np.asarray(raw, dtype=np.float64)
    dec = decode_arrays(raw, anchors, mode)
    out = []
    for b in range(raw.shape[0]):
        z = dec["z"][b]
        k = np.unravel_index(np.argmax(z), z.shape)
        if z[k] < prob_threshold:
            out.append(None)
            continue
        cp = cell_pixels
        out.append(Grasp(dec["x"][b][k] * cp, dec["y"][b][k] * cp, dec["theta"][b][k],
                         dec["w"][b][k] * cp, dec["h"][b][k] * cp, float(z[k])))
    return out


# -- angle targets -----------------------------------------------------------

def cls_bin(theta: float) -> int:
    return int(round(normalize_angle(theta) / CLS_STEP)) % N_CLS


def coarse_bin(theta: float) -> int:
    """Nearest of the four intermediate bins 0/45/90/135 (mod 180)."""
    return int(round(normalize_angle(theta) / 45.0)) % len(COARSE_BINS)


def rot_split(theta: float):
    """Nearest rotation anchor index and signed residual in [-30, 30]."""
    theta = normalize_angle(theta)
    dists = [angle_distance(theta, a) for a in ROT_ANCHORS]
    k = int(np.argmin(dists))
    resid = theta - ROT_ANCHORS[k]
    resid = (resid + 90.0) % 180.0 - 90.0
    return k, float(resid)


def reg_target(theta: float) -> float:
    """Regression target as a fraction of the half turn, in [0, 1)."""
    return normalize_angle(theta) / 180.0


# -- targets -----------------------------------------------------------------

@dataclass
class TargetGrid:
    """Per (cell, anchor) training targets, arrays shaped (..., S, S, A).

    ``x, y, w, h, theta`` hold the assigned ground truth (grid units) and
    ``tx, ty, tw, th`` its encoding. ``zg`` starts at 1 and is refreshed from
    the live prediction during training. ``cell_anchor`` (..., S, S) names the
    anchor that owns each cell for the anchor-free intermediate head (-1 if
    the cell is empty).
    """

    mask: np.ndarray
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    h: np.ndarray
    theta: np.ndarray
    tx: np.ndarray
    ty: np.ndarray
    tw: np.ndarray
    th: np.ndarray
    zg: np.ndarray
    cls_bin: np.ndarray
    rot_anchor: np.ndarray
    rot_resid: np.ndarray
    reg: np.ndarray
    cell_anchor: np.ndarray
    coarse_bin: np.ndarray

    @property
    def grid_size(self) -> int:
        return self.mask.shape[-3]

    @classmethod
    def empty(cls, s: int, n_anchors: int):
        shape = (s, s, n_anchors)
        zeros = lambda: np.zeros(shape)
        return cls(
            mask=np.zeros(shape, dtype=bool), x=zeros(), y=zeros(), w=np.ones(shape),
            h=np.ones(shape), theta=zeros(), tx=zeros(), ty=zeros(), tw=zeros(), th=zeros(),
            zg=np.ones(shape), cls_bin=np.zeros(shape, dtype=int),
            rot_anchor=np.zeros(shape, dtype=int), rot_resid=zeros(), reg=zeros(),
            cell_anchor=np.full((s, s), -1, dtype=int), coarse_bin=np.zeros((s, s), dtype=int),
        )

    @classmethod
    def stack(cls, grids):
        return cls(**{f.name: np.stack([getattr(g, f.name) for g in grids])
                      for f in fields(cls)})

    def copy(self):
        return TargetGrid(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def truths(self):
        """Assigned ground truths as (index tuple, Grasp) pairs."""
        out = []
        for idx in zip(*np.nonzero(self.mask)):
            out.append((idx, Grasp(self.x[idx], self.y[idx], self.theta[idx],
                                   self.w[idx], self.h[idx])))
        return out


def _wh_iou(w, h, pw, ph):
    inter = np.minimum(w, pw) * np.minimum(h, ph)
    return inter / (w * h + pw * ph - inter)


def responsible_anchor(g: Grasp, anchors: AnchorSet) -> int:
    a = anchors.array
    return int(np.argmax(_wh_iou(g.w, g.h, a[:, 0], a[:, 1])))


def encode(truths, s: int, anchors: AnchorSet, mode: AngleMode | None = None) -> TargetGrid:
    """Targets for grasps given in grid units on an S x S grid.

    All angle targets are filled regardless of ``mode`` so one grid can feed
    any head; ``mode`` is accepted for symmetry with :func:`decode`.
    """
    if s < 1:
        raise ValueError("grid size must be >= 1")
    tg = TargetGrid.empty(s, len(anchors))
    for g in sorted(truths, key=lambda g: -g.area):
        if not (0.0 <= g.x < s and 0.0 <= g.y < s):
            raise ValueError(f"grasp center ({g.x}, {g.y}) outside the {s}x{s} grid")
        cx, cy = int(np.floor(g.x)), int(np.floor(g.y))
        a = responsible_anchor(g, anchors)
        idx = (cy, cx, a)
        if tg.mask[idx]:
            # larger rectangles were placed first
            log.warning("dropping grasp %s: cell (%d, %d) anchor %d already assigned", g, cx, cy, a)
            continue
        pw, ph = anchors.boxes[a]
        ox = np.clip(g.x - cx, _OFFSET_EPS, 1 - _OFFSET_EPS)
        oy = np.clip(g.y - cy, _OFFSET_EPS, 1 - _OFFSET_EPS)
        tg.mask[idx] = True
        tg.x[idx], tg.y[idx], tg.w[idx], tg.h[idx], tg.theta[idx] = g.x, g.y, g.w, g.h, g.theta
        tg.tx[idx], tg.ty[idx] = logit(ox), logit(oy)
        tg.tw[idx], tg.th[idx] = np.log(g.w / pw), np.log(g.h / ph)
        tg.cls_bin[idx] = cls_bin(g.theta)
        tg.rot_anchor[idx], tg.rot_resid[idx] = rot_split(g.theta)
        tg.reg[idx] = reg_target(g.theta)
        if tg.cell_anchor[cy, cx] < 0:
            tg.cell_anchor[cy, cx] = a
            tg.coarse_bin[cy, cx] = coarse_bin(g.theta)
    return tg


def raw_from_targets(tg: TargetGrid, anchors: AnchorSet, mode: AngleMode,
                     tz: float = 0.0, off: float = -30.0) -> np.ndarray:
    """Build a raw head output that decodes to the targets exactly.

    Assigned slots get the encoded values with t_z = ``tz``; unassigned slots
    get ``off`` in every channel. Used by oracle models and tests.
    """
    s, _, a = tg.mask.shape
    h = np.full((s, s, a, mode.depth), off)
    m = tg.mask
    h[m, 0], h[m, 1], h[m, 2], h[m, 3], h[m, 4] = tg.tx[m], tg.ty[m], tg.tw[m], tg.th[m], tz
    block = np.full((int(m.sum()), mode.angle_channels), -30.0)
    rows = np.arange(block.shape[0])
    if mode.variant == "reg":
        frac = np.clip(tg.reg[m], _OFFSET_EPS, 1 - _OFFSET_EPS)
        block[:, 0] = logit(frac)
    elif mode.variant == "cls":
        block[rows, tg.cls_bin[m]] = 30.0
    else:
        n = len(ROT_ANCHORS)
        block[rows, tg.rot_anchor[m]] = 30.0
        block[:, n:] = 0.0
        block[rows, n + tg.rot_anchor[m]] = tg.rot_resid[m] / ROT_SPAN
    h[m, N_BASE:] = block
    return h.reshape(s, s, a * mode.depth)
