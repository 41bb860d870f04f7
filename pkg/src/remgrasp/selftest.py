"""Oracle suites shared by ``remgrasp selftest`` and the acceptance tests.

Each suite returns ``(ok, detail)``. Sizes are parameters so the CLI can run
a quicker pass than the acceptance suite.
"""
from __future__ import annotations

import math
import time

import numpy as np

from .codec import AnchorSet, AngleMode, decode_arrays, encode, raw_from_targets, rot_split
from .geometry import Grasp, rotated_iou
from .loss import LossWeights, assign_iou_targets, grasp_loss
from .net import GraspNet, LayerSpec, NetworkSpec, gradient_check
from .numerics import conv2d
from .oracles import monte_carlo_iou, rot90_oracle
from .rem import RemConfig, rotate_kernel

MODES = ("reg", "cls", "rot")


def rotation_suite(n: int = 1000, seed: int = 0):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        g = rng.normal(size=(5, 5, int(rng.integers(1, 9))))
        bad += not np.array_equal(rotate_kernel(g, 2), rot90_oracle(g))
    return bad == 0, f"{n - bad}/{n} kernels match the index permutation"


def toy_problem(mode: str, seed: int = 0):
    """3-layer net (conv, REM, head) on an 8x8x2 input with three targets."""
    spec = NetworkSpec(input_size=(8, 8, 2), layers=(LayerSpec(3, 2, 3),), rem_position=1,
                       rem=RemConfig(kernel=3, n_f=3, decompress=2), anchors="multi",
                       angle_mode=mode)
    rng = np.random.default_rng(seed)
    net = GraspNet(spec, seed=seed)
    x = rng.normal(size=(1, 8, 8, 2))
    s = spec.grid_size
    truths = [Grasp(*rng.uniform(0, s, 2), rng.uniform(0, 180), *rng.uniform(0.5, 3, 2))
              for _ in range(3)]
    tg = encode(truths, s, spec.anchor_set, spec.mode)
    tg = type(tg).stack([tg])
    raw, _ = net.forward(x)
    tg = assign_iou_targets(tg, raw, spec.anchor_set, spec.mode)  # then held fixed
    return net, x, tg


def network_gradient_error(mode: str, seed: int = 0, fault: bool = False,
                           weights: LossWeights = LossWeights()) -> float:
    """Worst relative error over every parameter of the toy net."""
    net, x, tg = toy_problem(mode, seed)
    spec = net.spec

    def loss():
        raw, inter = net.forward(x)
        return grasp_loss(raw, inter, tg, spec.anchor_set, spec.mode, weights, rem=True).value

    raw, inter = net.forward(x)
    res = grasp_loss(raw, inter, tg, spec.anchor_set, spec.mode, weights, rem=True)
    grads = net.backward(res.grad_raw, res.grad_inter)
    if fault:
        k = next(iter(grads))
        grads[k] = grads[k].copy()
        grads[k].flat[0] *= 1.01
    return max(gradient_check(loss, p, grads[k]) for k, p in net.params.items())


def gradient_suite(seed: int = 0, fault: bool = False, tol: float = 1e-4):
    errs = {m: network_gradient_error(m, seed, fault) for m in MODES}
    ok = all(e <= tol for e in errs.values())
    return ok, ", ".join(f"{m} {e:.1e}" for m, e in errs.items()) + f" (tol {tol:g})"


def random_grasp(rng, lo=-1.0, hi=1.0):
    return Grasp(*rng.uniform(lo, hi, 2), rng.uniform(0, 180), *rng.uniform(0.5, 2.5, 2))


def iou_suite(n_mc: int = 100, samples: int = 1_000_000, n_axis: int = 100, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst_mc = 0.0
    for k in range(n_mc):
        a, b = random_grasp(rng), random_grasp(rng)
        worst_mc = max(worst_mc, abs(rotated_iou(a, b) - monte_carlo_iou(a, b, samples, seed=k)))
    worst_ax = 0.0
    for _ in range(n_axis):
        a = Grasp(*rng.uniform(-2, 2, 2), 0.0, *rng.uniform(0.5, 3, 2))
        b = Grasp(*rng.uniform(-2, 2, 2), 0.0, *rng.uniform(0.5, 3, 2))
        ix = max(0.0, min(a.x + a.w / 2, b.x + b.w / 2) - max(a.x - a.w / 2, b.x - b.w / 2))
        iy = max(0.0, min(a.y + a.h / 2, b.y + b.h / 2) - max(a.y - a.h / 2, b.y - b.h / 2))
        inter = ix * iy
        want = inter / (a.w * a.h + b.w * b.h - inter)
        worst_ax = max(worst_ax, abs(rotated_iou(a, b) - want))
    diamond = rotated_iou(Grasp(0, 0, 0, 1, 1), Grasp(0, 0, 45, 1, 1))
    ok = worst_mc < 2e-3 and worst_ax <= 1e-12 and abs(diamond - 1 / math.sqrt(2)) < 1e-12
    return ok, (f"monte carlo {worst_mc:.1e} on {n_mc} pairs, axis-aligned {worst_ax:.1e}, "
                f"square vs 45 deg {diamond:.6f}")


def codec_suite(n: int = 10_000, seed: int = 0, s: int = 12):
    """decode(encode(g)) per mode; angles checked against the representable value."""
    rng = np.random.default_rng(seed)
    worst = {m: 0.0 for m in MODES}
    for m in MODES:
        mode = AngleMode(m)
        for an_name in ("single", "multi"):
            an = AnchorSet.named(an_name)
            for _ in range(n // 2):
                g = Grasp(*rng.uniform(0, s, 2), rng.uniform(0, 180), *rng.uniform(0.3, 4, 2))
                raw = raw_from_targets(encode([g], s, an, mode), an, mode)
                d = decode_arrays(raw, an, mode)
                k = np.unravel_index(np.argmax(d["z"]), d["z"].shape)
                err = max(abs(d[c][k] - getattr(g, c)) for c in ("x", "y", "w", "h"))
                if m == "cls":
                    want = 10.0 * (round(g.theta / 10.0) % 18)
                    err = max(err, abs(d["theta"][k] - want))
                elif m == "rot":
                    ai, resid = rot_split(g.theta)
                    want = (30.0, 90.0, 150.0)[ai] + resid
                    err = max(err, abs(d["theta"][k] - want % 180.0))
                else:
                    dt = abs(d["theta"][k] - g.theta)
                    err = max(err, min(dt, 180 - dt))
                worst[m] = max(worst[m], err)
    ok = all(e <= 1e-9 for e in worst.values())
    return ok, ", ".join(f"{m} {e:.1e}" for m, e in worst.items()) + f" over {n} grasps each"


def equivariance_suite(n: int = 100, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        size = int(rng.integers(5, 13))
        c = int(rng.integers(1, 4))
        f = rng.normal(size=(size, size, c))
        g = rng.normal(size=(5, 5, c, int(rng.integers(1, 4))))
        lhs = conv2d(np.rot90(f), rotate_kernel(g, 2))
        rhs = np.rot90(conv2d(f, g))
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst <= 1e-9, f"max deviation {worst:.1e} on {n} inputs"


def loss_example():
    """The single-cell example: x off by 0.1, z - z^g = 0.2, angle CE = ln 2."""
    an, mode = AnchorSet.single(), AngleMode("cls")
    tg = encode([Grasp(1.4, 1.5, 0.0, 1.99, 1.99)], 3, an, mode)
    tg.zg[1, 1, 0] = 0.3
    raw = np.zeros((3, 3, mode.depth))
    raw[1, 1, 5:] = -1e3
    raw[1, 1, 5] = raw[1, 1, 5 + 9] = 0.0
    return grasp_loss(raw, None, tg, an, mode, LossWeights(1, 5, 1)).value


def loss_suite():
    v = loss_example()
    want = 0.01 + 5 * 0.04 + math.log(2)
    return abs(v - want) <= 1e-6, f"single-cell loss {v:.6f} (hand value {want:.6f})"


def run_all(quick: bool = True, fault: str | None = None, seed: int = 0, out=print) -> bool:
    suites = [
        ("rotation", lambda: rotation_suite(1000, seed)),
        ("gradient", lambda: gradient_suite(seed, fault == "gradient")),
        ("iou", lambda: iou_suite(20 if quick else 100, seed=seed)),
        ("codec", lambda: codec_suite(2000 if quick else 10_000, seed)),
        ("equivariance", lambda: equivariance_suite(100, seed)),
        ("loss", loss_suite),
    ]
    all_ok = True
    for name, fn in suites:
        t0 = time.perf_counter()
        ok, detail = fn()
        all_ok &= ok
        out(f"{name:<13} {'PASS' if ok else 'FAIL'}  {detail}  [{time.perf_counter() - t0:.1f}s]")
    return all_ok
