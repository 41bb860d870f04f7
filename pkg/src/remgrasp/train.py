"""Training loop, detection wrapper and checkpoint files."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import codec
from .codec import TargetGrid
from .geometry import any_success
from .loss import LossWeights, assign_iou_targets, grasp_loss
from .net import GraspNet, NetworkSpec

log = logging.getLogger(__name__)

CKPT_MAGIC = b"REMGRASP-CKPT 1\n"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.01
    lr_final: float = 0.0005
    warmup_epochs: int = 2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float = 10.0
    lambda_cd: float = 1.0
    lambda_pr: float = 5.0
    lambda_ag: float = 1.0
    lambda_noobj: float = 0.0
    prob_threshold: float = 0.25
    val_iou: float = 0.25

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cd, self.lambda_pr, self.lambda_ag, self.lambda_noobj)

    def lr_at(self, epoch: int) -> float:
        """Linear warmup then cosine decay from ``lr`` to ``lr_final``."""
        if epoch < self.warmup_epochs:
            return self.lr * (epoch + 1) / (self.warmup_epochs + 1)
        span = max(self.epochs - self.warmup_epochs, 1)
        t = (epoch - self.warmup_epochs) / span
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1 + math.cos(math.pi * t))

    @classmethod
    def from_mapping(cls, m: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in m.items():
            if k in known:
                kw[k] = int(v) if known[k] == "int" else float(v)
        return cls(**kw)


def preprocess(images) -> np.ndarray:
    return np.asarray(images, dtype=np.float64) - 0.5


def scene_targets(scene, spec: NetworkSpec) -> TargetGrid:
    cp = spec.cell_pixels
    grid = [g.scaled(1.0 / cp) for g in scene.positives]
    s = spec.grid_size
    grid = [g for g in grid if 0 <= g.x < s and 0 <= g.y < s]
    return codec.encode(grid, s, spec.anchor_set, spec.mode)


class NetDetector:
    """Callable mapping an (H, W, C) image to every decoded grasp (pixels)."""

    def __init__(self, net: GraspNet):
        self.net = net

    def raw(self, images, batch: int = 64):
        outs = []
        for i in range(0, len(images), batch):
            raw, _ = self.net.forward(preprocess(images[i:i + batch]))
            outs.append(raw)
        return np.concatenate(outs) if outs else np.zeros((0,))

    def __call__(self, image) -> list:
        raw, _ = self.net.forward(preprocess(image))
        s = self.net.spec
        return codec.decode(raw, s.anchor_set, s.mode, s.cell_pixels)

    def best(self, images, prob_threshold: float = 0.25) -> list:
        """Top-z grasp per image, or None when no slot reaches the threshold."""
        s = self.net.spec
        return codec.top_grasps(self.raw(np.asarray(images)), s.anchor_set, s.mode,
                                s.cell_pixels, prob_threshold)


def accuracy(detector: NetDetector, scenes, iou: float = 0.25,
             prob_threshold: float = 0.25) -> float:
    if not scenes:
        return float("nan")
    best = detector.best(np.stack([s.image for s in scenes]), prob_threshold)
    hits = [g is not None and any_success(g, s.positives, iou) for g, s in zip(best, scenes)]
    return float(np.mean(hits))


@dataclass
class TrainResult:
    net: GraspNet
    history: list = field(default_factory=list)


def train_step(net: GraspNet, images, targets: TargetGrid, cfg: TrainConfig):
    """Forward + loss + backward on one batch; returns (loss per image, grads)."""
    spec = net.spec
    raw, inter = net.forward(preprocess(images))
    if not np.isfinite(raw).all():
        raise TrainingDiverged("network output became non-finite")
    tg = assign_iou_targets(targets, raw, spec.anchor_set, spec.mode)
    res = grasp_loss(raw, inter, tg, spec.anchor_set, spec.mode, cfg.weights,
                     rem=spec.rem.enabled)
    b = raw.shape[0]
    grads = net.backward(res.grad_raw / b, None if res.grad_inter is None else res.grad_inter / b)
    return res.value / b, grads


def train(net: GraspNet, train_scenes, val_scenes, cfg: TrainConfig,
          progress=None) -> TrainResult:
    """SGD with momentum; records mean loss and validation accuracy per epoch."""
    if not train_scenes:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    images = np.stack([s.image for s in train_scenes])
    targets = [scene_targets(s, net.spec) for s in train_scenes]
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    detector = NetDetector(net)
    result = TrainResult(net)
    n = len(train_scenes)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = train_step(net, images[idx], TargetGrid.stack([targets[i] for i in idx]), cfg)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, batch {start // cfg.batch_size}")
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            scale = min(1.0, cfg.clip_norm / norm) if norm > 0 else 1.0
            for k, p in net.params.items():
                g = grads[k] * scale + cfg.weight_decay * p
                v = velocity[k]
                v *= cfg.momentum
                v -= lr * g
                p += v
            losses.append(loss)
        rec = {"epoch": epoch + 1, "lr": lr, "loss": float(np.mean(losses))}
        if val_scenes:
            rec["val_acc"] = accuracy(detector, val_scenes, cfg.val_iou, cfg.prob_threshold)
        result.history.append(rec)
        log.info("epoch %d loss %.4f val %.3f", epoch + 1, rec["loss"], rec.get("val_acc", float("nan")))
        if progress:
            progress(rec)
    return result


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, net: GraspNet, extra: dict | None = None):
    """Magic line, one JSON header line, then little-endian float64 parameters."""
    flat = net.get_flat().astype("<f8")
    payload = flat.tobytes()
    header = {
        "format": 1,
        "spec": net.spec.to_dict(),
        "param_names": list(net.params),
        "param_shapes": [list(v.shape) for v in net.params.values()],
        "n_params": int(flat.size),
        "dtype": "<f8",
        "sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_checkpoint(path):
    """Returns (net, header)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.readline() != CKPT_MAGIC:
            raise ValueError(f"{path} is not a remgrasp checkpoint")
        header = json.loads(fh.readline())
        payload = fh.read()
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    flat = np.frombuffer(payload, dtype=header["dtype"]).astype(np.float64)
    spec = NetworkSpec.from_dict(header["spec"])
    net = GraspNet(spec, seed=0)
    if list(net.params) != header["param_names"]:
        raise ValueError(f"{path}: parameter layout does not match its network spec")
    net.set_flat(flat)
    return net, header


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
