"""Scene loading: Cornell-format folders, fold splits and synthetic scenes.

Cornell vertex convention used here: for a rectangle p1..p4, the first edge
p1 -> p2 gives the grasp direction theta and the gripper opening w = |p1p2|;
the second edge gives the plate size h = |p2p3|. This matches
:func:`remgrasp.geometry.rect_vertices`, where the w edge runs along theta.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Grasp, normalize_angle, rotated_iou

log = logging.getLogger(__name__)

MANIFEST_HEADER = "# remgrasp manifest v1"
CORNELL_CROP = 360


class LabelParseError(ValueError):
    pass


@dataclass
class LabeledScene:
    image: np.ndarray
    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)
    object_id: str | None = None
    source_id: str = ""


# -- vertices ----------------------------------------------------------------

def vertices_to_grasp(points) -> Grasp:
    """Grasp from four rectangle corners given in order."""
    p = np.asarray(points, dtype=np.float64).reshape(4, 2)
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite vertex")
    e1, e2 = p[1] - p[0], p[2] - p[1]
    w, h = math.hypot(*e1), math.hypot(*e2)
    cross = e1[0] * e2[1] - e1[1] * e2[0]
    if w < 1e-9 or h < 1e-9 or abs(cross) < 1e-9 * max(w * h, 1e-300):
        raise ValueError(f"degenerate rectangle {p.tolist()}")
    theta = normalize_angle(math.degrees(math.atan2(e1[1], e1[0])))
    cx, cy = p.mean(axis=0)
    return Grasp(float(cx), float(cy), theta, w, h)


def parse_rect_file(path) -> list:
    """Grasps from a Cornell rectangle file; rectangles with NaN vertices are skipped."""
    path = Path(path)
    pts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            tok = line.split()
            try:
                if len(tok) != 2:
                    raise ValueError
                pts.append((float(tok[0]), float(tok[1])))
            except ValueError:
                raise LabelParseError(f"{path}:{lineno}: expected two numbers, got {line.strip()!r}")
    if len(pts) % 4:
        raise LabelParseError(f"{path}: {len(pts)} vertex lines is not a multiple of 4")
    grasps = []
    for k in range(0, len(pts), 4):
        quad = np.array(pts[k:k + 4])
        if not np.all(np.isfinite(quad)):
            log.warning("%s: skipping rectangle %d with non-finite vertex", path, k // 4)
            continue
        grasps.append(vertices_to_grasp(quad))
    return grasps


# -- images ------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def write_image(path, image):
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def select_channels(image, depth=None, use_depth: bool = False):
    """Keep R and G and replace B by depth when ``use_depth`` is set."""
    if not use_depth:
        return image
    if depth is None:
        raise ValueError("depth channel requested but no depth image given")
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != image.shape[:2]:
        raise ValueError(f"depth {depth.shape} does not match image {image.shape[:2]}")
    rng = depth.max() - depth.min()
    d = (depth - depth.min()) / rng if rng > 0 else np.zeros_like(depth)
    return np.concatenate([image[..., :2], d[..., None]], axis=-1)


def center_crop(image, grasps_list, size: int):
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    oy, ox = (h - size) // 2, (w - size) // 2
    out = image[oy:oy + size, ox:ox + size]
    shifted = []
    for grasps in grasps_list:
        keep = []
        for g in grasps:
            x, y = g.x - ox, g.y - oy
            if 0 <= x < size and 0 <= y < size:
                keep.append(Grasp(x, y, g.theta, g.w, g.h, g.z))
        shifted.append(keep)
    return out, shifted


def read_object_map(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                image_id, object_id = line.split()[:2]
                out[image_id] = object_id
    return out


def load_cornell(directory, crop: int = CORNELL_CROP, object_map=None,
                 use_depth: bool = False) -> list:
    """Scenes from ``pcdNNNNcpos.txt`` / ``cneg.txt`` / ``r.png`` triples.

    ``object_map`` is a mapping or a path to an ``image_id object_id`` file;
    when omitted, ``objects.txt`` in the directory is used if present.
    """
    directory = Path(directory)
    if object_map is None and (directory / "objects.txt").exists():
        object_map = directory / "objects.txt"
    if isinstance(object_map, (str, os.PathLike)):
        object_map = read_object_map(object_map)
    object_map = object_map or {}
    scenes = []
    for pos_path in sorted(directory.rglob("*cpos.txt")):
        stem = pos_path.name[: -len("cpos.txt")]
        img_path = pos_path.with_name(stem + "r.png")
        if not img_path.exists():
            raise FileNotFoundError(f"no image {img_path} for label file {pos_path}")
        neg_path = pos_path.with_name(stem + "cneg.txt")
        pos = parse_rect_file(pos_path)
        neg = parse_rect_file(neg_path) if neg_path.exists() else []
        image = read_image(img_path)
        if use_depth:
            from PIL import Image

            with Image.open(pos_path.with_name(stem + "d.tiff")) as dim:
                image = select_channels(image, np.asarray(dim, dtype=np.float64), True)
        size = min(crop, *image.shape[:2]) if crop else None
        if size:
            image, (pos, neg) = center_crop(image, [pos, neg], size)
        scenes.append(LabeledScene(image, pos, neg, object_map.get(stem), stem))
    return scenes


# -- folds -------------------------------------------------------------------

def split(scenes, mode: str = "image", folds: int = 5, seed: int = 0) -> list:
    """Five-fold (train_idx, test_idx) pairs over scenes or over object ids."""
    n = len(scenes)
    rng = np.random.default_rng(seed)
    if mode == "image":
        chunks = np.array_split(rng.permutation(n), folds)
        test_sets = [np.sort(c) for c in chunks]
    elif mode == "object":
        ids = [s.object_id for s in scenes]
        if any(i is None for i in ids):
            raise ValueError("object-wise split needs an object id for every scene")
        uniq = sorted(set(ids))
        chunks = np.array_split(rng.permutation(len(uniq)), folds)
        test_sets = []
        for c in chunks:
            held = {uniq[k] for k in c}
            test_sets.append(np.array([i for i, oid in enumerate(ids) if oid in held], dtype=int))
    else:
        raise ValueError(f"split mode must be image or object, got {mode!r}")
    out = []
    for test in test_sets:
        train = np.setdiff1d(np.arange(n), test)
        out.append((train, test))
    return out


# -- synthetic scenes ----------------------------------------------------------

PALETTE = np.array([
    [0.90, 0.10, 0.10], [0.10, 0.75, 0.15], [0.15, 0.25, 0.95], [0.95, 0.80, 0.05],
    [0.85, 0.15, 0.85], [0.05, 0.85, 0.85], [0.98, 0.50, 0.05], [0.55, 0.05, 0.70],
    [0.05, 0.05, 0.05], [0.98, 0.98, 0.98],
])


@dataclass(frozen=True)
class ObjectType:
    """A synthetic object prototype: opening and plate extents in pixels, colour."""

    name: str
    w: float
    h: float
    color: tuple


def make_catalog(rng, n: int = 40, canvas: int = 96) -> list:
    s = canvas / 96.0
    cat = []
    for k in range(n):
        w = rng.uniform(14.0, 25.0) * s
        h = rng.uniform(0.35, 0.6) * w
        col = PALETTE[k % len(PALETTE)]
        cat.append(ObjectType(f"obj{k:03d}", float(w), float(h), tuple(float(c) for c in col)))
    return cat


def _background(rng, canvas):
    coarse = rng.uniform(-1, 1, size=(canvas // 8 + 2, canvas // 8 + 2))
    idx = np.arange(canvas) / 8.0
    i0 = np.floor(idx).astype(int)
    f = idx - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    tex = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    base = rng.uniform(0.35, 0.6, size=3)
    img = base + 0.06 * tex[..., None] + 0.02 * rng.standard_normal((canvas, canvas, 3))
    return np.clip(img, 0, 1)


def rect_coverage(g: Grasp, canvas: int, supersample: int = 4) -> np.ndarray:
    """Fraction of each pixel covered by the rectangle (pixel (i, j) spans
    [j, j+1) x [i, i+1) in image coordinates)."""
    n = supersample
    off = (np.arange(n) + 0.5) / n
    coords = (np.arange(canvas)[:, None] + off[None, :]).ravel()
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    t = math.radians(g.theta)
    dx, dy = xx - g.x, yy - g.y
    u = dx * math.cos(t) + dy * math.sin(t)
    v = -dx * math.sin(t) + dy * math.cos(t)
    inside = (np.abs(u) <= g.w / 2) & (np.abs(v) <= g.h / 2)
    return inside.reshape(canvas, n, canvas, n).mean(axis=(1, 3))


def synth_scene(rng, canvas: int = 96, objects=(1, 3), catalog=None, max_tries: int = 50,
                source_id: str = "") -> LabeledScene:
    """Filled rotated rectangles on a textured background, one grasp per object."""
    if canvas < 32:
        raise ValueError("canvas must be at least 32 pixels")
    lo, hi = (objects, objects) if isinstance(objects, int) else objects
    n_obj = int(rng.integers(lo, hi + 1))
    img = _background(rng, canvas)
    placed, ids, used = [], [], set()
    for _ in range(n_obj):
        for _ in range(max_tries):
            if catalog:
                k = int(rng.integers(len(catalog)))
                proto = catalog[k]
                if proto.color in used:
                    continue
            else:
                w = rng.uniform(14.0, 25.0) * canvas / 96.0
                col = PALETTE[int(rng.integers(len(PALETTE)))]
                proto = ObjectType(f"obj-{rng.integers(1 << 30):x}", w,
                                   rng.uniform(0.35, 0.6) * w, tuple(float(c) for c in col))
                if proto.color in used:
                    continue
            theta = rng.uniform(0.0, 180.0)
            r = 0.5 * math.hypot(proto.w, proto.h) + 2
            x, y = rng.uniform(r, canvas - r, size=2)
            g = Grasp(float(x), float(y), float(theta), proto.w, proto.h)
            grown = Grasp(g.x, g.y, g.theta, g.w + 4, g.h + 4)
            if all(rotated_iou(grown, Grasp(p.x, p.y, p.theta, p.w + 4, p.h + 4)) == 0.0
                   for p in placed):
                placed.append(g)
                ids.append(proto.name)
                used.add(proto.color)
                alpha = rect_coverage(g, canvas)[..., None]
                img = img * (1 - alpha) + np.array(proto.color) * alpha
                break
        else:
            log.warning("could only place %d of %d objects", len(placed), n_obj)
            break
    return LabeledScene(img, placed, [], ids[0] if ids else None, source_id)


def synth_dataset(n: int, seed: int = 0, canvas: int = 96, objects=(1, 3),
                  n_types: int = 40) -> list:
    rng = np.random.default_rng(seed)
    catalog = make_catalog(rng, n_types, canvas)
    return [synth_scene(rng, canvas, objects, catalog, source_id=f"synth{i:05d}")
            for i in range(n)]


# -- manifest ----------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_manifest(path, scenes, image_dir=None):
    """Write scenes as PNGs plus a tab-separated manifest (see README)."""
    path = Path(path)
    image_dir = Path(image_dir) if image_dir else path.parent / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for i, s in enumerate(scenes):
        name = f"{s.source_id or f'scene{i:05d}'}.png"
        write_image(image_dir / name, s.image)
        rel = os.path.relpath(image_dir / name, path.parent)
        grasps = ";".join(" ".join(_fmt(v) for v in (g.x, g.y, g.theta, g.w, g.h))
                          for g in s.positives)
        lines.append("\t".join([rel, s.object_id or "-", grasps]))
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list:
    path = Path(path)
    scenes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise LabelParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
            rel, oid, gtext = parts
            grasps = []
            for rec in filter(None, gtext.split(";")):
                vals = [float(v) for v in rec.split()]
                if len(vals) != 5:
                    raise LabelParseError(f"{path}:{lineno}: grasp needs x y theta w h")
                grasps.append(Grasp(*vals))
            image = read_image(path.parent / rel)
            scenes.append(LabeledScene(image, grasps, [], None if oid == "-" else oid,
                                       Path(rel).stem))
    return scenes


def load_dataset(path, **kw) -> list:
    """A manifest file or a Cornell directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    if path.is_dir():
        manifest = path / "manifest.tsv"
        return read_manifest(manifest) if manifest.exists() else load_cornell(path, **kw)
    return read_manifest(path)
