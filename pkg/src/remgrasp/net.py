"""Small conv backbone with an optional REM block and a grasp head.

Everything runs on (B, H, W, C) float64 batches with hand-written backward
passes. The head is a linear 1x1 conv emitting ``A * D`` channels per cell.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .codec import AnchorSet, AngleMode
from .numerics import ShapeError, conv2d_backward, conv2d_forward, leaky_relu, leaky_relu_grad
from .rem import RemBlock, RemConfig, init_rem_params


@dataclass(frozen=True)
class LayerSpec:
    kernel: int = 3
    stride: int = 1
    channels: int = 32
    act: str = "leaky"  # or "linear"


DEFAULT_BODY = (
    LayerSpec(3, 2, 16), LayerSpec(3, 2, 24), LayerSpec(3, 2, 32),
    LayerSpec(3, 1, 32), LayerSpec(3, 1, 32), LayerSpec(3, 1, 32),
    LayerSpec(3, 1, 32), LayerSpec(3, 1, 32),
)


@dataclass(frozen=True)
class NetworkSpec:
    """Backbone layout. ``rem_position`` counts layers after the REM block,
    the head included, so the default 6 places it right after the stem."""

    input_size: tuple = (96, 96, 3)
    layers: tuple = DEFAULT_BODY
    rem_position: int = 6
    rem: RemConfig = field(default_factory=RemConfig)
    anchors: str = "single"
    angle_mode: str = "cls"
    slope: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(
            l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers))
        if isinstance(self.rem, dict):
            object.__setattr__(self, "rem", RemConfig(**self.rem))
        object.__setattr__(self, "input_size", tuple(self.input_size))
        if self.rem.enabled and not (1 <= self.rem_position <= self.n_layers):
            raise ValueError(f"rem_position {self.rem_position} outside 1..{self.n_layers}")
        h, w, _ = self.input_size
        if h % self.stride or w % self.stride:
            raise ValueError(f"input {h}x{w} not divisible by total stride {self.stride}")

    @property
    def n_layers(self) -> int:
        return len(self.layers) + 1

    @property
    def stride(self) -> int:
        return math.prod(l.stride for l in self.layers)

    @property
    def grid_size(self) -> int:
        return self.input_size[0] // self.stride

    @property
    def cell_pixels(self) -> float:
        return float(self.stride)

    @property
    def anchor_set(self) -> AnchorSet:
        return AnchorSet.named(self.anchors)

    @property
    def mode(self) -> AngleMode:
        return AngleMode(self.angle_mode)

    @property
    def head_channels(self) -> int:
        return len(self.anchor_set) * self.mode.depth

    @property
    def rem_index(self) -> int:
        """Index into ``layers`` before which the REM block runs."""
        return self.n_layers - self.rem_position

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


class ConvLayer:
    def __init__(self, params, prefix, spec: LayerSpec, slope: float):
        self.params, self.prefix, self.spec, self.slope = params, prefix, spec, slope
        self.cache = None

    def forward(self, x):
        p = self.params
        pre, cols = conv2d_forward(x, p[self.prefix + "w"], stride=self.spec.stride,
                                   bias=p[self.prefix + "b"])
        self.cache = (x.shape, cols, pre)
        return leaky_relu(pre, self.slope) if self.spec.act == "leaky" else pre

    def backward(self, dout, need_dx: bool = True):
        if self.cache is None:
            raise RuntimeError("backward called before forward")
        x_shape, cols, pre = self.cache
        if self.spec.act == "leaky":
            dout = leaky_relu_grad(pre, dout, self.slope)
        dx, dw, db = conv2d_backward(cols, x_shape, self.params[self.prefix + "w"], dout,
                                     stride=self.spec.stride, need_dx=need_dx)
        return dx, {self.prefix + "w": dw, self.prefix + "b": db}


class GraspNet:
    """Network holding an ordered parameter dict keyed by layer prefix."""

    def __init__(self, spec: NetworkSpec, params: dict | None = None, seed: int = 0):
        self.spec = spec
        self.params = params if params is not None else init_params(spec, np.random.default_rng(seed))
        self._build()
        self._cached = False

    def _build(self):
        spec, p = self.spec, self.params
        self.stages = []
        for i, ls in enumerate(spec.layers + (self._head_spec(),)):
            if spec.rem.enabled and i == spec.rem_index:
                self.stages.append(("rem", RemBlock(_sub(p, "rem."), spec.rem)))
            self.stages.append(("conv", ConvLayer(p, f"l{i}.", ls, spec.slope)))

    def _head_spec(self):
        return LayerSpec(1, 1, self.spec.head_channels, "linear")

    def forward(self, images):
        """Raw head (B, S, S, A*D) and intermediate head (B, S, S, 9) or None."""
        x = np.asarray(images, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if tuple(x.shape[1:]) != tuple(self.spec.input_size):
            raise ShapeError(f"image shape {x.shape[1:]} does not match {self.spec.input_size}")
        inter = None
        for kind, stage in self.stages:
            if kind == "rem":
                x, inter = stage.forward(x)
            else:
                x = stage.forward(x)
        self._cached = True
        if single:
            return x[0], (None if inter is None else inter[0])
        return x, inter

    def backward(self, grad_raw, grad_inter=None) -> dict:
        """Parameter gradients for the most recent forward batch."""
        if not self._cached:
            raise RuntimeError("backward called before forward")
        g = np.asarray(grad_raw, dtype=np.float64)
        if g.ndim == 3:
            g = g[None]
            if grad_inter is not None:
                grad_inter = np.asarray(grad_inter)[None]
        grads = {}
        for i, (kind, stage) in reversed(list(enumerate(self.stages))):
            if kind == "rem":
                g, gr = stage.backward(g, grad_inter)
                grads.update({"rem." + k: v for k, v in gr.items()})
            else:
                g, gc = stage.backward(g, need_dx=i > 0)
                grads.update(gc)
        return {k: grads[k] for k in self.params}

    # -- flat parameter views -------------------------------------------------
    def get_flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ShapeError(f"expected {self.n_params} parameters, got {flat.size}")
        off = 0
        for v in self.params.values():
            v[...] = flat[off:off + v.size].reshape(v.shape)
            off += v.size

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


class _sub(dict):
    """Live prefixed view into the parent parameter dict."""

    def __init__(self, parent, prefix):
        super().__init__()
        self.parent, self.prefix = parent, prefix

    def __getitem__(self, k):
        return self.parent[self.prefix + k]


def init_params(spec: NetworkSpec, rng) -> dict:
    params = {}
    c = spec.input_size[2]
    layers = spec.layers + (LayerSpec(1, 1, spec.head_channels, "linear"),)
    for i, ls in enumerate(layers):
        if spec.rem.enabled and i == spec.rem_index:
            for k, v in init_rem_params(rng, c, spec.rem).items():
                params["rem." + k] = v
            c = spec.rem.out_channels
        fan_in = ls.kernel * ls.kernel * c
        lim = math.sqrt(6.0 / fan_in) if ls.act == "leaky" else math.sqrt(1.0 / fan_in)
        params[f"l{i}.w"] = rng.uniform(-lim, lim, size=(ls.kernel, ls.kernel, c, ls.channels))
        params[f"l{i}.b"] = np.zeros(ls.channels)
        c = ls.channels
    return params


def gradient_check(f, x, analytic, eps: float = 1e-5, floor: float = 1e-7, indices=None):
    """Worst relative error between ``analytic`` and central differences of ``f``.

    ``x`` is perturbed in place and restored. Relative error per element is
    |a - n| / max(|a|, |n|, floor).
    """
    flat = x.reshape(-1)
    an = np.asarray(analytic).reshape(-1)
    worst = 0.0
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        num = (fp - fm) / (2 * eps)
        err = abs(an[i] - num) / max(abs(an[i]), abs(num), floor)
        worst = max(worst, err)
    return worst
