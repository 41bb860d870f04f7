"""Cross-validated grasp accuracy reports and inference timing."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .data import split
from .geometry import any_success
from .train import NetDetector, preprocess

THRESHOLDS = (0.25, 0.30, 0.35)
SPLITS = ("image", "object")


class RawDetector:
    """Detector over any function mapping an image batch to raw head outputs."""

    def __init__(self, raw_fn, anchors, mode, cell_pixels: float):
        self.raw_fn = raw_fn
        self.anchors, self.mode, self.cell_pixels = anchors, mode, cell_pixels

    def best(self, images, prob_threshold: float = 0.25) -> list:
        return codec.top_grasps(self.raw_fn(images), self.anchors, self.mode,
                                self.cell_pixels, prob_threshold)


def column(split_mode: str, iou: float) -> str:
    return f"{split_mode}_{round(iou * 100):d}"


@dataclass
class RunReport:
    """Per-fold accuracies keyed by column name (``image_25`` ...)."""

    columns: list
    folds: list                  # one {column: accuracy} per fold
    seed: int = 0
    config: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @property
    def mean(self) -> dict:
        return {c: float(np.mean([f[c] for f in self.folds])) for c in self.columns}

    def to_tsv(self) -> str:
        """Header row, one row per fold, then the mean row."""
        rows = ["\t".join(["fold"] + self.columns)]
        for i, f in enumerate(self.folds, 1):
            rows.append("\t".join([str(i)] + [f"{f[c]:.4f}" for c in self.columns]))
        m = self.mean
        rows.append("\t".join(["mean"] + [f"{m[c]:.4f}" for c in self.columns]))
        return "\n".join(rows) + "\n"

    def to_text(self) -> str:
        width = max(9, *(len(c) + 2 for c in self.columns))
        lines = ["grasp success (top grasp vs any positive, angle < 30 deg)", ""]
        lines.append("fold".ljust(6) + "".join(c.rjust(width) for c in self.columns))
        for i, f in enumerate(self.folds, 1):
            lines.append(str(i).ljust(6) + "".join(f"{100 * f[c]:.1f}%".rjust(width)
                                                   for c in self.columns))
        m = self.mean
        lines.append("mean".ljust(6) + "".join(f"{100 * m[c]:.1f}%".rjust(width)
                                               for c in self.columns))
        lines.append("")
        lines.append(f"seed {self.seed}")
        for k in sorted(self.config):
            lines.append(f"{k} = {self.config[k]}")
        return "\n".join(lines) + "\n"

    def timing_tsv(self) -> str:
        rows = ["stage\trepeats\tmedian_ms\tfps"]
        for stage in sorted(self.timing):
            t = self.timing[stage]
            rows.append(f"{stage}\t{t['repeats']}\t{t['median_ms']:.3f}\t{t['fps']:.2f}")
        return "\n".join(rows) + "\n"


def scene_hits(detector, scenes, thresholds, prob_threshold: float = 0.25) -> np.ndarray:
    """(n_scenes, n_thresholds) success booleans for the top grasp of each scene."""
    best = detector.best(np.stack([s.image for s in scenes]), prob_threshold)
    return np.array([[g is not None and any_success(g, s.positives, t) for t in thresholds]
                     for g, s in zip(best, scenes)], dtype=bool).reshape(len(scenes), len(thresholds))


def evaluate(detector, scenes, splits=SPLITS, thresholds=THRESHOLDS, folds: int = 5,
             seed: int = 0, prob_threshold: float = 0.25, config=None) -> RunReport:
    """Score a fixed detector on the test side of every fold of each split."""
    if not scenes:
        raise ValueError("no scenes to evaluate")
    t0 = time.perf_counter()
    hits = scene_hits(detector, scenes, thresholds, prob_threshold)
    wall = time.perf_counter() - t0
    columns = [column(sm, t) for sm in splits for t in thresholds]
    per_fold = [dict() for _ in range(folds)]
    for sm in splits:
        for k, (_, test) in enumerate(split(scenes, sm, folds, seed)):
            for j, t in enumerate(thresholds):
                per_fold[k][column(sm, t)] = float(hits[test, j].mean()) if len(test) else float("nan")
    # whole-set throughput: scenes over total wall time, scoring included
    timing = {"dataset": {"repeats": 1, "median_ms": 1000 * wall / len(scenes),
                          "fps": len(scenes) / wall if wall > 0 else float("inf")}}
    return RunReport(columns, per_fold, seed, dict(config or {}), timing)


def time_inference(net, image, repeats: int = 100, prob_threshold: float = 0.25) -> dict:
    """Median single-image latency for the network alone and end to end."""
    if repeats < 1:
        raise ValueError("repeats must be positive")
    x = preprocess(image)[None]
    det = NetDetector(net)
    net.forward(x)  # warm-up

    def run(fn):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        med = statistics.median(times)
        return {"repeats": repeats, "median_ms": 1000 * med, "fps": 1.0 / med}

    def end_to_end():
        cands = codec.select_grasps(det(image), prob_threshold)
        return cands[0] if cands else None

    return {"network": run(lambda: net.forward(x)), "end_to_end": run(end_to_end)}
