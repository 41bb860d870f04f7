import math

import numpy as np
import pytest

from remgrasp.codec import AnchorSet, AngleMode, encode, raw_from_targets
from remgrasp.geometry import Grasp
from remgrasp.loss import LossWeights, assign_iou_targets, grasp_loss
from remgrasp.net import gradient_check
from remgrasp.numerics import ShapeError

SINGLE = AnchorSet.single()
CLS = AngleMode("cls")


def single_cell_case():
    """One owned slot at cell (1, 1): x off by 0.1, z - z^g = 0.2, angle CE = ln 2."""
    tg = encode([Grasp(1.4, 1.5, 0.0, 1.99, 1.99)], 3, SINGLE, CLS)
    tg.zg[1, 1, 0] = 0.3
    raw = np.zeros((3, 3, CLS.depth))
    raw[1, 1, 5:] = -1e3
    raw[1, 1, 5 + 0] = 0.0   # target bin
    raw[1, 1, 5 + 7] = 0.0   # a rival with equal score
    return raw, tg


def test_hand_computed_example():
    raw, tg = single_cell_case()
    res = grasp_loss(raw, None, tg, SINGLE, CLS, LossWeights(1, 5, 1))
    assert res.value == pytest.approx(0.01 + 5 * 0.04 + math.log(2), abs=1e-6)
    assert res.value == pytest.approx(0.9031, abs=1e-4)


def test_zero_mask_is_zero(rng):
    tg = encode([], 4, SINGLE, CLS)
    res = grasp_loss(rng.normal(size=(4, 4, CLS.depth)), None, tg, SINGLE, CLS)
    assert res.value == 0.0
    assert not res.grad_raw.any()


@pytest.mark.parametrize("variant", ["reg", "cls", "rot"])
def test_zero_residual(variant):
    mode = AngleMode(variant)
    truths = [Grasp(1.3, 2.6, 40.0, 1.2, 0.7), Grasp(3.5, 0.5, 120.0, 2.5, 1.0)]
    tg = encode(truths, 4, AnchorSet.multi(), mode)
    raw = raw_from_targets(tg, AnchorSet.multi(), mode, tz=0.0)
    tg.zg[tg.mask] = 0.5
    res = grasp_loss(raw, None, tg, AnchorSet.multi(), mode)
    assert 0.0 <= res.value < 1e-9


def test_linear_in_weights():
    raw, tg = single_cell_case()
    a = grasp_loss(raw, None, tg, SINGLE, CLS, LossWeights(1, 5, 1))
    b = grasp_loss(raw, None, tg, SINGLE, CLS, LossWeights(1, 10, 1))
    assert b.terms["prob"] == pytest.approx(2 * a.terms["prob"], rel=1e-15)
    assert b.value - a.value == pytest.approx(a.terms["prob"], rel=1e-12)


def test_intermediate_half_weight():
    raw, tg = single_cell_case()
    inter = np.zeros((3, 3, 9))
    inter[1, 1, 5:9] = [0.0, -1e3, 0.0, -1e3]  # CE ln 2 against coarse bin 0
    res = grasp_loss(raw, inter, tg, SINGLE, CLS, rem=True)
    t = res.terms
    assert t["inter_coord"] == pytest.approx(t["coord"] / 2, rel=1e-12)
    assert t["inter_prob"] == pytest.approx(t["prob"] / 2, rel=1e-12)
    assert t["inter_angle"] == pytest.approx(t["angle"] / 2, rel=1e-12)


def test_missing_intermediate():
    raw, tg = single_cell_case()
    with pytest.raises(ValueError):
        grasp_loss(raw, None, tg, SINGLE, CLS, rem=True)
    with pytest.raises(ShapeError):
        grasp_loss(raw[..., :-1], None, tg, SINGLE, CLS)


def test_iou_targets():
    tg = encode([Grasp(1.3, 2.6, 40.0, 1.2, 0.7)], 4, SINGLE, CLS)
    raw = raw_from_targets(tg, SINGLE, CLS)
    out = assign_iou_targets(tg, raw, SINGLE, CLS)
    assert out.zg[2, 1, 0] == pytest.approx(1.0, abs=1e-9)
    raw[2, 1, 2] += 1.0  # widen the prediction by e
    out = assign_iou_targets(tg, raw, SINGLE, CLS)
    assert out.zg[2, 1, 0] == pytest.approx(1 / math.e, abs=1e-9)
    assert tg.zg[2, 1, 0] == 1.0  # input untouched


@pytest.mark.parametrize("variant", ["reg", "cls", "rot"])
def test_gradient_matches_finite_differences(rng, variant):
    mode = AngleMode(variant)
    anchors = AnchorSet.multi()
    truths = [Grasp(*rng.uniform(0, 4, 2), rng.uniform(0, 180), *rng.uniform(0.5, 3, 2))
              for _ in range(3)]
    raw = rng.normal(size=(4, 4, len(anchors) * mode.depth))
    inter = rng.normal(size=(4, 4, 9))
    tg = assign_iou_targets(encode(truths, 4, anchors, mode), raw, anchors, mode)
    w = LossWeights(1, 5, 1, lambda_noobj=0.5)

    def f():
        return grasp_loss(raw, inter, tg, anchors, mode, w, rem=True).value

    res = grasp_loss(raw, inter, tg, anchors, mode, w, rem=True)
    assert gradient_check(f, raw, res.grad_raw) <= 1e-4
    assert gradient_check(f, inter, res.grad_inter) <= 1e-4


def test_nonnegative(rng):
    for variant in ("reg", "cls", "rot"):
        mode = AngleMode(variant)
        tg = encode([Grasp(1.5, 1.5, 77, 1, 2)], 3, SINGLE, mode)
        for _ in range(20):
            raw = rng.normal(scale=3, size=(3, 3, mode.depth))
            assert grasp_loss(raw, None, assign_iou_targets(tg, raw, SINGLE, mode),
                              SINGLE, mode).value >= 0
