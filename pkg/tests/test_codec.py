import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remgrasp.codec import (AnchorSet, AngleMode, best_grasp, cls_bin, decode, decode_arrays,
                            encode, raw_from_targets, rot_split, select_grasps)
from remgrasp.geometry import Grasp
from remgrasp.numerics import ShapeError

S = 6


def blank(mode, anchors=AnchorSet.single()):
    return np.zeros((S, S, len(anchors) * mode.depth))


def grasp_at(raw, cx, cy, mode, anchors=AnchorSet.single(), a=0):
    gs = decode(raw, anchors, mode)
    return gs[(cy * S + cx) * len(anchors) + a]


def test_anchor_presets():
    assert len(AnchorSet.multi()) == 7
    assert AnchorSet.single().boxes == ((1.99, 1.99),)
    assert (3.2, 0.76) in AnchorSet.multi().boxes
    with pytest.raises(ValueError):
        AnchorSet(())
    with pytest.raises(ValueError):
        AnchorSet(((1.0, 0.0),))


@pytest.mark.parametrize("variant,depth", [("reg", 6), ("cls", 23), ("rot", 11)])
def test_depths(variant, depth):
    assert AngleMode(variant).depth == depth


def test_decode_center_and_size():
    mode = AngleMode("cls")
    g = grasp_at(blank(mode), 2, 3, mode)
    assert (g.x, g.y) == (2.5, 3.5)
    assert g.w == 1.99 and g.h == 1.99
    assert g.z == 0.5


def test_decode_cls_argmax():
    mode = AngleMode("cls")
    raw = blank(mode)
    raw[1, 1, 5 + 3] = 4.0
    assert grasp_at(raw, 1, 1, mode).theta == 30.0


def test_decode_rot():
    mode = AngleMode("rot")
    raw = blank(mode)
    raw[0, 0, 5 + 1] = 3.0        # anchor 90
    raw[0, 0, 5 + 3 + 1] = -10 / 30
    assert grasp_at(raw, 0, 0, mode).theta == pytest.approx(80.0, abs=1e-12)


def test_decode_pixels():
    mode = AngleMode("reg")
    g = decode(blank(mode), AnchorSet.single(), mode, cell_pixels=8.0)[0]
    assert (g.x, g.y, g.w) == (4.0, 4.0, 1.99 * 8)
    assert g.theta == 90.0


def test_decode_shape_mismatch():
    with pytest.raises(ShapeError):
        decode(np.zeros((S, S, 22)), AnchorSet.single(), AngleMode("cls"))


def test_encode_example():
    tg = encode([Grasp(2.5, 3.5, 0, 1.99, 1.99)], S, AnchorSet.single())
    assert tg.mask[3, 2, 0] and tg.mask.sum() == 1
    assert tg.tx[3, 2, 0] == pytest.approx(0, abs=1e-15)
    assert tg.ty[3, 2, 0] == pytest.approx(0, abs=1e-15)
    assert tg.tw[3, 2, 0] == 0 and tg.th[3, 2, 0] == 0
    assert tg.zg[3, 2, 0] == 1.0


def test_angle_bins():
    assert cls_bin(33) == 3
    assert cls_bin(176) == 0
    assert rot_split(33) == (0, pytest.approx(3.0))
    assert rot_split(0) == (0, pytest.approx(-30.0))
    assert rot_split(179) == (2, pytest.approx(29.0))


def test_encode_errors_and_duplicates(caplog):
    with pytest.raises(ValueError):
        encode([Grasp(S + 0.5, 1, 0, 1, 1)], S, AnchorSet.single())
    small, big = Grasp(1.2, 1.2, 0, 1.5, 1.5), Grasp(1.7, 1.6, 10, 2.2, 2.2)
    with caplog.at_level(logging.WARNING):
        tg = encode([small, big], S, AnchorSet.single())
    assert tg.mask.sum() == 1
    assert tg.w[1, 1, 0] == 2.2
    assert "dropping" in caplog.text


def test_responsible_anchor_multi():
    tg = encode([Grasp(0.5, 0.5, 0, 3.1, 0.8)], S, AnchorSet.multi())
    assert np.nonzero(tg.mask[0, 0])[0].tolist() == [6]  # (3.2, 0.76)


def test_select_grasps():
    gs = [Grasp(0, 0, 0, 1, 1, z) for z in (0.1, 0.9, 0.3)]
    assert select_grasps([Grasp(0, 0, 0, 1, 1, 0.0)] * 3, 0.25) == []
    assert [g.z for g in select_grasps(gs, 0.25)] == [0.9, 0.3]
    assert len(select_grasps(gs, 0.0)) == 3
    assert best_grasp(gs).z == 0.9
    assert select_grasps([], 0.5) == [] and best_grasp([]) is None


def representable(theta, variant):
    if variant == "cls":
        return 10.0 * round(theta / 10.0) % 180.0
    return theta


@settings(max_examples=150, deadline=None)
@given(st.sampled_from(["reg", "cls", "rot"]), st.sampled_from(["single", "multi"]),
       st.floats(0, S, exclude_max=True), st.floats(0, S, exclude_max=True),
       st.floats(0, 180, exclude_max=True), st.floats(0.3, 4), st.floats(0.3, 4))
def test_round_trip(variant, anchors, x, y, theta, w, h):
    mode, an = AngleMode(variant), AnchorSet.named(anchors)
    g = Grasp(x, y, representable(theta, variant), w, h)
    raw = raw_from_targets(encode([g], S, an), an, mode)
    d = decode_arrays(raw, an, mode)
    k = np.unravel_index(np.argmax(d["z"]), d["z"].shape)
    for name in ("x", "y", "w", "h"):
        assert abs(d[name][k] - getattr(g, name)) <= 1e-9
    dt = abs(d["theta"][k] - g.theta)
    assert min(dt, 180 - dt) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_decode_ranges(seed):
    r = np.random.default_rng(seed)
    for variant in ("reg", "cls", "rot"):
        mode = AngleMode(variant)
        raw = r.normal(scale=5, size=(S, S, 7 * mode.depth))
        d = decode_arrays(raw, AnchorSet.multi(), mode)
        cx = np.arange(S)[None, :, None]
        cy = np.arange(S)[:, None, None]
        assert ((d["x"] >= cx) & (d["x"] <= cx + 1)).all()
        assert ((d["y"] >= cy) & (d["y"] <= cy + 1)).all()
        assert (d["w"] > 0).all() and (d["h"] > 0).all()
        assert ((d["theta"] >= 0) & (d["theta"] < 180)).all()


def test_cls_shift_invariance(rng):
    mode = AngleMode("cls")
    raw = rng.normal(size=(S, S, mode.depth))
    shifted = raw.copy()
    shifted[..., 5:] += 123.0
    np.testing.assert_array_equal(decode_arrays(raw, AnchorSet.single(), mode)["theta"],
                                  decode_arrays(shifted, AnchorSet.single(), mode)["theta"])
