"""Dense tensor helpers: convolution, nonlinearities, softmax/CE, bilinear sampling.

Tensors are plain float64 numpy arrays laid out as (H, W, C), optionally with
a leading batch axis (B, H, W, C). Convolution kernels are (K, K, C, O); a
single (K, K, C) kernel is treated as O = 1.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

CE_FLOOR = 1e-12
PADDING_MODES = ("same", "valid")


class ShapeError(ValueError):
    """Raised when tensor shapes disagree."""


def as_tensor(data, shape=None) -> np.ndarray:
    """Build an (H, W, C) float64 tensor, optionally from flat row-major data."""
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"data length {arr.size} does not match shape {tuple(shape)}")
        arr = arr.reshape(shape)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def _normalize_kernel(kernel):
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim == 3:
        return kernel[..., None], True
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be (K,K,C) or (K,K,C,O), got {kernel.shape}")
    return kernel, False


def _conv_geometry(h, w, k, padding, stride):
    if padding not in PADDING_MODES:
        raise ValueError(f"padding must be one of {PADDING_MODES}, got {padding!r}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    pad = k // 2 if padding == "same" else 0
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} too small for kernel {k} with {padding} padding")
    return pad, ho, wo


def im2col(x: np.ndarray, k: int, padding: str = "same", stride: int = 1):
    """Unfold a (B, H, W, C) batch into rows of K*K*C patch values.

    Returns ``(cols, (ho, wo))`` with ``cols`` shaped (B*ho*wo, K*K*C) and the
    patch ordered (row, col, channel) to match a (K, K, C, O) kernel reshape.
    """
    b, h, w, c = x.shape
    pad, ho, wo = _conv_geometry(h, w, k, padding, stride)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    x = np.ascontiguousarray(x)
    sb, sh, sw, sc = x.strides
    win = as_strided(
        x,
        shape=(b, ho, wo, k, k, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return win.reshape(b * ho * wo, k * k * c), (ho, wo)


def col2im(dcols: np.ndarray, x_shape, k: int, padding: str = "same", stride: int = 1):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the input."""
    b, h, w, c = x_shape
    pad, ho, wo = _conv_geometry(h, w, k, padding, stride)
    dcols = dcols.reshape(b, ho, wo, k, k, c)
    dxp = np.zeros((b, h + 2 * pad, w + 2 * pad, c))
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + hspan:stride, j:j + wspan:stride, :] += dcols[:, :, :, i, j, :]
    if pad:
        dxp = dxp[:, pad:pad + h, pad:pad + w, :]
    return dxp


def conv2d_forward(x, kernel, padding: str = "same", stride: int = 1, bias=None):
    """Batched (B, H, W, C) x (K, K, C, O) correlation; also returns the patches."""
    k, k2, c, o = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {k}x{k2}")
    if x.shape[-1] != c:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel expects {c}")
    cols, (ho, wo) = im2col(x, k, padding, stride)
    out = cols @ kernel.reshape(k * k * c, o)
    if bias is not None:
        out += bias
    return out.reshape(x.shape[0], ho, wo, o), cols


def conv2d_backward(cols, x_shape, kernel, grad_out, padding: str = "same",
                    stride: int = 1, need_dx: bool = True):
    """Gradients from cached patches; ``dx`` is None when not requested."""
    k, _, c, o = kernel.shape
    g2 = grad_out.reshape(-1, o)
    dk = (cols.T @ g2).reshape(kernel.shape)
    db = g2.sum(axis=0)
    dx = None
    if need_dx:
        dx = col2im(g2 @ kernel.reshape(k * k * c, o).T, x_shape, k, padding, stride)
    return dx, dk, db


def conv2d(x, kernel, padding: str = "same", stride: int = 1, bias=None) -> np.ndarray:
    """2D cross-correlation (no kernel flip) with zero padding.

    ``x`` is (H, W, C) or (B, H, W, C). The output keeps the batch axis if the
    input had one; a (K, K, C) kernel yields a single output channel.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel, _ = _normalize_kernel(kernel)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    b = None if bias is None else np.asarray(bias, dtype=np.float64)
    out, _ = conv2d_forward(x, kernel, padding, stride, b)
    return out if batched else out[0]


def conv2d_grad(x, kernel, grad_out, padding: str = "same", stride: int = 1):
    """Gradients of :func:`conv2d` w.r.t. input, kernel and bias.

    Shapes follow the forward call; returns ``(dx, dkernel, dbias)``.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel, squeezed = _normalize_kernel(kernel)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
        grad_out = np.asarray(grad_out)[None]
    cols, _ = im2col(x, kernel.shape[0], padding, stride)
    dx, dk, db = conv2d_backward(cols, x.shape, kernel, grad_out, padding, stride)
    if squeezed:
        dk = dk[..., 0]
    return (dx if batched else dx[0]), dk, db


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def leaky_relu(x, slope: float = 0.1):
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, grad, slope: float = 0.1):
    return np.where(x > 0, grad, slope * grad)


def softmax(v, axis: int = -1):
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(target, predicted, axis: int = -1):
    """-sum(target * log(predicted)) with predicted clamped to [1e-12, 1]."""
    p = np.clip(np.asarray(predicted, dtype=np.float64), CE_FLOOR, 1.0)
    out = -(np.asarray(target, dtype=np.float64) * np.log(p)).sum(axis=axis)
    return out if np.ndim(out) else float(out)


def bilinear_weights(grid_shape, u: float, v: float):
    """Neighbour indices and weights for sampling a (rows, cols) grid at (u, v).

    ``u`` indexes rows and ``v`` columns. Neighbours outside the grid are
    omitted, which is the same as zero padding.
    """
    rows, cols = grid_shape
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    fu, fv = u - u0, v - v0
    taps = []
    for du, wu in ((0, 1.0 - fu), (1, fu)):
        for dv, wv in ((0, 1.0 - fv), (1, fv)):
            r, c = u0 + du, v0 + dv
            wgt = wu * wv
            if wgt != 0.0 and 0 <= r < rows and 0 <= c < cols:
                taps.append((r, c, wgt))
    return taps


def bilinear_sample(grid, u: float, v: float):
    """Sample ``grid`` (H, W) or (H, W, C) at real coordinate (row u, col v).

    Out-of-support neighbours read as zero.
    """
    grid = np.asarray(grid, dtype=np.float64)
    out = np.zeros(grid.shape[2:])
    for r, c, wgt in bilinear_weights(grid.shape[:2], u, v):
        out = out + wgt * grid[r, c]
    return out if out.ndim else float(out)
