"""Rotation ensemble block.

Each base kernel is resampled at 0, 45, 90 and 135 degrees (bilinear, zero
outside the K x K support), the input is correlated with all four copies,
and the four responses are blended per pixel by the softmax of a coarse
4-bin angle prediction from an intermediate 1x1 head. The raw intermediate
map is also projected by a 1x1 conv and concatenated to the output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numerics import (ShapeError, bilinear_weights, conv2d, conv2d_backward, conv2d_forward,
                       conv2d_grad, leaky_relu, leaky_relu_grad, sigmoid, softmax)

N_ROT = 4
INTER_CHANNELS = 9  # t_x, t_y, t_w, t_h, t_z + 4 coarse angle logits
_SNAP = 1e-9


@lru_cache(maxsize=None)
def rotation_operator(k: int, r: int) -> np.ndarray:
    """(K*K, K*K) matrix mapping a flattened kernel to its rotation by r*45 deg.

    Rotation is counter-clockwise as displayed (row 0 at the top), so r = 2
    coincides with ``np.rot90``.
    """
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd to rotate about a centre element, got {k}")
    c = (k - 1) / 2.0
    phi = r * math.pi / 4.0
    cs, sn = math.cos(phi), math.sin(phi)
    op = np.zeros((k * k, k * k))
    for i in range(k):
        for j in range(k):
            # target in y-up centred coords, pulled back by R(-phi)
            X, Y = j - c, c - i
            sx = cs * X + sn * Y
            sy = -sn * X + cs * Y
            u, v = c - sy, c + sx
            ru, rv = round(u), round(v)
            if abs(u - ru) < _SNAP:
                u = float(ru)
            if abs(v - rv) < _SNAP:
                v = float(rv)
            for row, col, wgt in bilinear_weights((k, k), u, v):
                op[i * k + j, row * k + col] += wgt
    op.setflags(write=False)
    return op


def rotate_kernel(g, r: int) -> np.ndarray:
    """Rotate a (K, K, ...) kernel by r * 45 degrees about its centre element."""
    g = np.asarray(g, dtype=np.float64)
    k = g.shape[0]
    if g.shape[1] != k:
        raise ShapeError(f"kernel must be square, got {g.shape[:2]}")
    if r % N_ROT == 0 and k % 2 == 1:
        return g.copy()
    op = rotation_operator(k, r % 8)
    return (op @ g.reshape(k * k, -1)).reshape(g.shape)


def rotate_kernel_transpose(dg_r, r: int) -> np.ndarray:
    """Adjoint of :func:`rotate_kernel`; routes rotated-kernel gradients to the base."""
    dg_r = np.asarray(dg_r, dtype=np.float64)
    k = dg_r.shape[0]
    op = rotation_operator(k, r % 8)
    return (op.T @ dg_r.reshape(k * k, -1)).reshape(dg_r.shape)


@dataclass
class KernelBank:
    """Base kernels (K, K, C, n_f); rotated copies are derived on access."""

    base: np.ndarray

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=np.float64)
        if self.base.ndim == 3:
            self.base = self.base[..., None]
        if self.base.shape[0] % 2 == 0:
            raise ValueError("kernel size must be odd")

    @property
    def n_f(self) -> int:
        return self.base.shape[-1]

    @property
    def rotated(self) -> list:
        return [rotate_kernel(self.base, r) for r in range(N_ROT)]

    def stacked(self) -> np.ndarray:
        """All rotations as one (K, K, C, 4*n_f) kernel, rotation-major."""
        return np.concatenate(self.rotated, axis=-1)


def rotation_convolution(f, bank: KernelBank, bias=None) -> np.ndarray:
    """Responses of ``f`` to every rotated kernel, shape (..., H, W, 4, n_f)."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != bank.base.shape[2]:
        raise ShapeError(f"input has {f.shape[-1]} channels, kernels expect {bank.base.shape[2]}")
    b = None if bias is None else np.tile(np.asarray(bias, dtype=np.float64), N_ROT)
    d = conv2d(f, bank.stacked(), padding="same", stride=1, bias=b)
    return d.reshape(d.shape[:-1] + (N_ROT, bank.n_f))


def _match_resolution(theta_probs, spatial):
    h, w = spatial
    th, tw = theta_probs.shape[-3:-1]
    if (th, tw) == (h, w):
        return theta_probs
    if h % th or w % tw:
        raise ShapeError(f"angle map {th}x{tw} cannot be upsampled to {h}x{w}")
    return np.repeat(np.repeat(theta_probs, h // th, axis=-3), w // tw, axis=-2)


def rotation_activation(d, theta_probs) -> np.ndarray:
    """Per-pixel blend sum_i d^i * theta^i / 4 -> (..., H, W, n_f).

    ``theta_probs`` is (..., h, w, 4); a coarser map is nearest-upsampled.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-2] != N_ROT:
        raise ShapeError(f"expected {N_ROT} rotation responses, got {d.shape[-2]}")
    tp = _match_resolution(np.asarray(theta_probs, dtype=np.float64), d.shape[-4:-2])
    if tp.shape[-1] != N_ROT or tp.shape[:-1] != d.shape[:-2]:
        raise ShapeError(f"angle map {tp.shape} does not match responses {d.shape}")
    return np.einsum("...in,...i->...n", d, tp) / N_ROT


@dataclass(frozen=True)
class RemConfig:
    """REM switches. ``rc``: rotated kernels; ``ra``: angle-weighted blend
    (plain mean of the four responses when off); ``rl``: also weight the
    blend by the intermediate graspable probability."""

    enabled: bool = True
    rc: bool = True
    ra: bool = True
    rl: bool = False
    kernel: int = 5
    n_f: int = 16
    decompress: int = 16
    slope: float = 0.1

    @property
    def out_channels(self) -> int:
        return self.n_f + self.decompress


def init_rem_params(rng, c_in: int, cfg: RemConfig) -> dict:
    k = cfg.kernel

    def uni(shape, fan_in):
        lim = math.sqrt(6.0 / fan_in)
        return rng.uniform(-lim, lim, size=shape)

    return {
        "head_w": uni((1, 1, c_in, INTER_CHANNELS), c_in) * 0.1,
        "head_b": np.zeros(INTER_CHANNELS),
        "rot_w": uni((k, k, c_in, cfg.n_f), k * k * c_in),
        "rot_b": np.zeros(cfg.n_f),
        "dec_w": uni((1, 1, INTER_CHANNELS, cfg.decompress), INTER_CHANNELS),
        "dec_b": np.zeros(cfg.decompress),
    }


class RemBlock:
    """Forward/backward for the block on (B, H, W, C) batches."""

    def __init__(self, params: dict, cfg: RemConfig):
        self.params = params
        self.cfg = cfg
        self.cache = None

    def forward(self, f):
        p, cfg = self.params, self.cfg
        inter = conv2d(f, p["head_w"], bias=p["head_b"])
        cache = {"f": f, "inter": inter}
        if cfg.rc:
            w_stack = KernelBank(p["rot_w"]).stacked()
            d, cols = conv2d_forward(f, w_stack, bias=np.tile(p["rot_b"], N_ROT))
            d = d.reshape(d.shape[:-1] + (N_ROT, cfg.n_f))
            cache["w_stack"], cache["d"], cache["cols"] = w_stack, d, cols
            if cfg.ra:
                probs = softmax(inter[..., 5:9])
                weights = probs
                if cfg.rl:
                    zm = sigmoid(inter[..., 4])
                    weights = probs * zm[..., None]
                    cache["zm"] = zm
                cache["probs"], cache["weights"] = probs, weights
                dhat = rotation_activation(d, weights)
            else:
                dhat = d.mean(axis=-2)
        else:
            dhat = conv2d(f, p["rot_w"], bias=p["rot_b"])
        dec = conv2d(inter, p["dec_w"], bias=p["dec_b"])
        cache["dhat"], cache["dec"] = dhat, dec
        self.cache = cache
        out = np.concatenate([leaky_relu(dhat, cfg.slope), leaky_relu(dec, cfg.slope)], axis=-1)
        return out, inter

    def backward(self, dout, dinter_ext=None):
        if self.cache is None:
            raise RuntimeError("backward called before forward")
        p, cfg, c = self.params, self.cfg, self.cache
        f, inter = c["f"], c["inter"]
        grads = {}
        ddhat = leaky_relu_grad(c["dhat"], dout[..., :cfg.n_f], cfg.slope)
        ddec = leaky_relu_grad(c["dec"], dout[..., cfg.n_f:], cfg.slope)
        dinter, grads["dec_w"], grads["dec_b"] = conv2d_grad(inter, p["dec_w"], ddec)
        if dinter_ext is not None:
            dinter = dinter + dinter_ext
        if cfg.rc:
            d = c["d"]
            if cfg.ra:
                w = c["weights"]
                dd = ddhat[..., None, :] * w[..., :, None] / N_ROT
                dw = np.einsum("...n,...in->...i", ddhat, d) / N_ROT
                dprobs = dw
                if cfg.rl:
                    zm = c["zm"]
                    dprobs = dw * zm[..., None]
                    dz = (dw * c["probs"]).sum(axis=-1)
                    dinter[..., 4] += dz * zm * (1.0 - zm)
                pr = c["probs"]
                dinter[..., 5:9] += pr * (dprobs - (pr * dprobs).sum(axis=-1, keepdims=True))
            else:
                dd = np.repeat(ddhat[..., None, :] / N_ROT, N_ROT, axis=-2)
            dd = dd.reshape(dd.shape[:-2] + (N_ROT * cfg.n_f,))
            df, dstack, db = conv2d_backward(c["cols"], f.shape, c["w_stack"], dd)
            n = cfg.n_f
            grads["rot_w"] = sum(rotate_kernel_transpose(dstack[..., r * n:(r + 1) * n], r)
                                 for r in range(N_ROT))
            grads["rot_b"] = db.reshape(N_ROT, n).sum(axis=0)
        else:
            df, grads["rot_w"], grads["rot_b"] = conv2d_grad(f, p["rot_w"], ddhat)
        dfh, grads["head_w"], grads["head_b"] = conv2d_grad(f, p["head_w"], dinter)
        return df + dfh, grads


def rem_forward(f, params: dict, cfg: RemConfig = RemConfig()):
    """Block output (..., H, W, n_f + decompress) and the raw intermediate map."""
    f = np.asarray(f, dtype=np.float64)
    batched = f.ndim == 4
    out, inter = RemBlock(params, cfg).forward(f if batched else f[None])
    return (out, inter) if batched else (out[0], inter[0])
