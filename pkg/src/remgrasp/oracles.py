"""Independent reference implementations used by tests and ``remgrasp selftest``.

None of these share code with the paths they check.
"""
import numpy as np

from .geometry import rect_vertices


def conv_oracle(x, k, padding="same", stride=1):
    """Direct-summation cross-correlation, one output channel per kernel."""
    h, w, c = x.shape
    kk = k.shape[0]
    pad = kk // 2 if padding == "same" else 0
    ho = (h + 2 * pad - kk) // stride + 1
    wo = (w + 2 * pad - kk) // stride + 1
    out = np.zeros((ho, wo, k.shape[3]))
    for o in range(k.shape[3]):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for a in range(kk):
                    for b in range(kk):
                        r, s = i * stride + a - pad, j * stride + b - pad
                        if 0 <= r < h and 0 <= s < w:
                            for ch in range(c):
                                acc += x[r, s, ch] * k[a, b, ch, o]
                out[i, j, o] = acc
    return out


def monte_carlo_iou(p, g, n=1_000_000, seed=0):
    """IOU estimate from uniform samples over the joint bounding box."""
    vp, vg = rect_vertices(p), rect_vertices(g)
    pts = np.vstack([vp, vg])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    s = np.random.default_rng(seed).uniform(lo, hi, size=(n, 2))

    def inside(r):
        t = np.radians(r.theta)
        d = s - [r.x, r.y]
        u = d[:, 0] * np.cos(t) + d[:, 1] * np.sin(t)
        v = -d[:, 0] * np.sin(t) + d[:, 1] * np.cos(t)
        return (np.abs(u) <= r.w / 2) & (np.abs(v) <= r.h / 2)

    a, b = inside(p), inside(g)
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def rot90_oracle(k):
    """Counter-clockwise quarter turn by explicit index remapping."""
    n = k.shape[0]
    out = np.empty_like(k)
    for i in range(n):
        for j in range(n):
            out[i, j] = k[j, n - 1 - i]
    return out
