"""Composite grasp loss over the final head and the REM intermediate head.

Residuals are taken in decoded grid units (x = sigmoid(t_x) + c_x, w =
p_w exp(t_w), ...) and the squared L2 norm is used for every ``||.||``
term. The graspable-probability target z^g is the IOU between the current
prediction and its ground truth; it is a constant as far as gradients go.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import codec
from .codec import N_BASE, ROT_ANCHORS, ROT_SPAN, AnchorSet, AngleMode, TargetGrid
from .geometry import Grasp, rotated_iou
from .numerics import CE_FLOOR, ShapeError, sigmoid, softmax

INTER_ANCHOR = (1.99, 1.99)


@dataclass(frozen=True)
class LossWeights:
    lambda_cd: float = 1.0
    lambda_pr: float = 5.0
    lambda_ag: float = 1.0
    # extension: penalise z on unassigned slots (off by default)
    lambda_noobj: float = 0.0


@dataclass
class LossResult:
    value: float
    grad_raw: np.ndarray
    grad_inter: np.ndarray | None
    terms: dict = field(default_factory=dict)


def iou_target(pred: Grasp, truth: Grasp) -> float:
    return rotated_iou(pred, truth)


def assign_iou_targets(targets: TargetGrid, raw, anchors: AnchorSet,
                       mode: AngleMode) -> TargetGrid:
    """Copy of ``targets`` with z^g set to IOU(decoded prediction, truth)."""
    out = targets.copy()
    dec = codec.decode_arrays(raw, anchors, mode)
    for idx in zip(*np.nonzero(targets.mask)):
        pred = Grasp(dec["x"][idx], dec["y"][idx], dec["theta"][idx],
                     dec["w"][idx], dec["h"][idx])
        truth = Grasp(targets.x[idx], targets.y[idx], targets.theta[idx],
                      targets.w[idx], targets.h[idx])
        out.zg[idx] = iou_target(pred, truth)
    return out


def _ce(logits, target_idx):
    """Clamped CE per row and its gradient w.r.t. the logits."""
    p = softmax(logits)
    rows = np.arange(len(target_idx))
    pk = p[rows, target_idx]
    ce = -np.log(np.maximum(pk, CE_FLOOR))
    grad = p.copy()
    grad[rows, target_idx] -= 1.0
    grad[pk < CE_FLOOR] = 0.0
    return ce, grad


def _box_terms(t, cx, cy, pw, ph, gx, gy, gw, gh, zg, lam_cd, lam_pr):
    """Masked coordinate + probability terms for rows ``t`` (n, >=5).

    Returns (coord_loss, prob_loss, grad rows for the first 5 channels).
    """
    g = np.zeros((len(t), N_BASE))
    sx, sy = sigmoid(t[:, 0]), sigmoid(t[:, 1])
    w, h = pw * np.exp(t[:, 2]), ph * np.exp(t[:, 3])
    z = sigmoid(t[:, 4])
    rx, ry = sx + cx - gx, sy + cy - gy
    rw, rh, rz = w - gw, h - gh, z - zg
    coord = lam_cd * float((rx ** 2).sum() + (ry ** 2).sum() + (rw ** 2).sum() + (rh ** 2).sum())
    prob = lam_pr * float((rz ** 2).sum())
    g[:, 0] = lam_cd * 2 * rx * sx * (1 - sx)
    g[:, 1] = lam_cd * 2 * ry * sy * (1 - sy)
    g[:, 2] = lam_cd * 2 * rw * w
    g[:, 3] = lam_cd * 2 * rh * h
    g[:, 4] = lam_pr * 2 * rz * z * (1 - z)
    return coord, prob, g


def _angle_terms(a, tg: TargetGrid, m, mode: AngleMode, lam):
    """Final-head angle loss on masked rows ``a`` (n, angle_channels)."""
    g = np.zeros_like(a)
    if mode.variant == "cls":
        ce, gc = _ce(a, tg.cls_bin[m])
        return lam * float(ce.sum()), lam * gc
    if mode.variant == "reg":
        s = sigmoid(a[:, 0])
        r = s - tg.reg[m]
        g[:, 0] = lam * 2 * r * s * (1 - s)
        return lam * float((r ** 2).sum()), g
    n = len(ROT_ANCHORS)
    k = tg.rot_anchor[m]
    ce, gc = _ce(a[:, :n], k)
    rows = np.arange(len(k))
    r = a[rows, n + k] - tg.rot_resid[m] / ROT_SPAN
    g[:, :n] = lam * gc
    g[rows, n + k] = lam * 2 * r
    return lam * float(ce.sum() + (r ** 2).sum()), g


def grasp_loss(raw, inter, targets: TargetGrid, anchors: AnchorSet, mode: AngleMode,
               weights: LossWeights = LossWeights(), rem: bool | None = None,
               inter_anchor=INTER_ANCHOR) -> LossResult:
    """Loss and gradients w.r.t. the raw final head and intermediate head.

    ``raw`` is (..., S, S, A*D), ``inter`` (..., S, S, 9) or None. ``targets``
    must carry the same leading shape. When ``rem`` is True the intermediate
    output is required.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if rem is None:
        rem = inter is not None
    if rem and inter is None:
        raise ValueError("REM enabled but no intermediate output supplied")
    hd = codec.split_head(raw, len(anchors), mode)
    if hd.shape[:-1] != targets.mask.shape:
        raise ShapeError(f"head {hd.shape[:-1]} does not match targets {targets.mask.shape}")
    grad = np.zeros_like(hd)
    m = targets.mask
    terms = {}
    idx = np.nonzero(m)
    cy, cx, ai = idx[-3].astype(float), idx[-2].astype(float), idx[-1]
    pw, ph = anchors.array[ai, 0], anchors.array[ai, 1]
    t = hd[m]
    coord, prob, gb = _box_terms(t, cx, cy, pw, ph, targets.x[m], targets.y[m],
                                 targets.w[m], targets.h[m], targets.zg[m],
                                 weights.lambda_cd, weights.lambda_pr)
    ang, ga = _angle_terms(t[:, N_BASE:], targets, m, mode, weights.lambda_ag)
    grad[m] = np.concatenate([gb, ga], axis=1)
    terms.update(coord=coord, prob=prob, angle=ang)
    if weights.lambda_noobj:
        zo = sigmoid(hd[~m][:, 4])
        terms["noobj"] = weights.lambda_noobj * float((zo ** 2).sum())
        gn = np.zeros((len(zo), hd.shape[-1]))
        gn[:, 4] = weights.lambda_noobj * 2 * zo * zo * (1 - zo)
        grad[~m] = gn
    grad_inter = None
    if rem:
        inter = np.asarray(inter, dtype=np.float64)
        if inter.shape[:-1] != m.shape[:-1] or inter.shape[-1] != 9:
            raise ShapeError(f"intermediate head {inter.shape} does not match grid {m.shape[:-1]}")
        grad_inter = np.zeros_like(inter)
        cm = targets.cell_anchor >= 0
        cidx = np.nonzero(cm)
        own = targets.cell_anchor[cm]
        slot = tuple(cidx) + (own,)
        half = LossWeights(weights.lambda_cd / 2, weights.lambda_pr / 2, weights.lambda_ag / 2)
        ti = inter[cm]
        icoord, iprob, gib = _box_terms(
            ti, cidx[-1].astype(float), cidx[-2].astype(float), inter_anchor[0],
            inter_anchor[1], targets.x[slot], targets.y[slot], targets.w[slot],
            targets.h[slot], targets.zg[slot], half.lambda_cd, half.lambda_pr)
        ce, gce = _ce(ti[:, 5:9], targets.coarse_bin[cm])
        grad_inter[cm] = np.concatenate([gib, half.lambda_ag * gce], axis=1)
        terms.update(inter_coord=icoord, inter_prob=iprob,
                     inter_angle=half.lambda_ag * float(ce.sum()))
        if weights.lambda_noobj:
            zo = sigmoid(inter[~cm][:, 4])
            lam = weights.lambda_noobj / 2
            terms["inter_noobj"] = lam * float((zo ** 2).sum())
            gn = np.zeros((len(zo), 9))
            gn[:, 4] = lam * 2 * zo * zo * (1 - zo)
            grad_inter[~cm] = gn
    value = float(sum(terms.values()))
    return LossResult(value, grad.reshape(raw.shape), grad_inter, terms)
