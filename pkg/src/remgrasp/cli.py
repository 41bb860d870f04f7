"""Command-line entry point: synth, train, eval, detect, selftest."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import codec
from .data import center_crop, load_dataset, read_image, synth_dataset, write_manifest
from .evaluate import SPLITS, THRESHOLDS, NetDetector, evaluate, time_inference
from .net import GraspNet, NetworkSpec
from .rem import RemConfig
from .train import (TrainConfig, TrainingDiverged, config_dict, load_checkpoint, save_checkpoint,
                    train)

log = logging.getLogger("remgrasp")


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Keys use underscores."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    return str(v).lower() in ("1", "true", "on", "yes")


def _add_model_flags(p):
    p.add_argument("--angle-mode", choices=["reg", "cls", "rot"])
    p.add_argument("--anchors", choices=["single", "multi"])
    p.add_argument("--rem", choices=["on", "off"])
    p.add_argument("--rc", action=argparse.BooleanOptionalAction, default=None,
                   help="rotated kernels (default on)")
    p.add_argument("--ra", action=argparse.BooleanOptionalAction, default=None,
                   help="angle-weighted blend of rotated responses (default on)")
    p.add_argument("--rl", action=argparse.BooleanOptionalAction, default=None,
                   help="also weight the blend by the intermediate probability (default off)")


def _add_train_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-noobj", type=float,
                   help="weight of the optional empty-slot probability penalty (default 0)")


def build_parser():
    ap = argparse.ArgumentParser(prog="remgrasp", description=__doc__)
    ap.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    ap.add_argument("--config", help="file of key = value settings; flags override it")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset (PNG images + manifest)")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of scenes (default 600)")
    p.add_argument("--objects", help="min,max objects per scene (default 1,3)")
    p.add_argument("--canvas", type=int, help="image side in pixels (default 96)")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", help="manifest, dataset directory, or synth:N for in-memory "
                                  "scenes (default synth:600)")
    p.add_argument("--val", type=int, help="number of trailing scenes held out (default 100)")
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="cross-validated accuracy and timing report")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", nargs="+", choices=list(SPLITS), default=None)
    p.add_argument("--iou", nargs="+", type=float, default=None)
    p.add_argument("--folds", type=int, help="default 5")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--repeats", type=int, help="timing repeats (default 100)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("detect", help="grasp list and overlay for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("selftest", help="run the embedded oracle suites")
    p.add_argument("--full", action="store_true", help="acceptance-size samples")
    p.add_argument("--inject-fault", choices=["gradient"], help=argparse.SUPPRESS)
    return ap


DEFAULTS = {
    "synth": {"n": 600, "objects": "1,3", "canvas": 96},
    "train": {"data": "synth:600"},
    "eval": {"folds": 5, "repeats": 100},
}


def settings(args) -> dict:
    """Defaults, then config file values, then explicit flags."""
    s = {"seed": 0, **DEFAULTS.get(args.command, {})}
    if args.config:
        s.update(read_config(args.config))
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "command", "verbose"):
            s[k] = v
    return s


def network_spec(s: dict, input_size=(96, 96, 3)) -> NetworkSpec:
    rem = RemConfig(enabled=str(s.get("rem", "on")) == "on",
                    rc=_bool(s.get("rc", True)), ra=_bool(s.get("ra", True)),
                    rl=_bool(s.get("rl", False)))
    return NetworkSpec(input_size=input_size, rem=rem, anchors=s.get("anchors", "single"),
                       angle_mode=s.get("angle_mode", "cls"))


def train_config(s: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig.from_mapping({k: v for k, v in s.items() if k in names})


def _scenes(spec: str, seed: int):
    if spec.startswith("synth:"):
        return synth_dataset(int(spec.split(":", 1)[1]), seed=seed)
    return load_dataset(spec)


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def cmd_synth(s):
    lo, hi = (int(v) for v in str(s["objects"]).split(","))
    scenes = synth_dataset(int(s["n"]), seed=int(s["seed"]), canvas=int(s["canvas"]),
                           objects=(lo, hi))
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.tsv", scenes)
    print(f"wrote {len(scenes)} scenes to {out / 'manifest.tsv'}")
    return 0


def cmd_train(s):
    from .plotting import plot_history

    seed = int(s["seed"])
    cfg = train_config(s)
    scenes = _scenes(s["data"], seed)
    n_val = int(s.get("val", min(100, len(scenes) // 5)))
    if n_val >= len(scenes):
        raise SystemExit(f"--val {n_val} leaves no training scenes")
    tr, va = scenes[:len(scenes) - n_val], scenes[len(scenes) - n_val:]
    spec = network_spec(s, tr[0].image.shape)
    net = GraspNet(spec, seed=seed)
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    print(f"training on {len(tr)} scenes, validating on {len(va)}; "
          f"{net.n_params} parameters, grid {spec.grid_size}x{spec.grid_size}")

    def progress(rec):
        print("epoch {epoch:4d}  lr {lr:.5f}  loss {loss:.4f}  val {v}".format(
            v=f"{100 * rec['val_acc']:.1f}%" if "val_acc" in rec else "-", **rec), flush=True)

    try:
        res = train(net, tr, va, cfg, progress)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 2
    meta = {"train": config_dict(cfg), "data": str(s["data"]), "n_train": len(tr),
            "n_val": len(va)}
    save_checkpoint(out / "model.ckpt", net, extra=meta)
    cols = ["epoch", "lr", "loss", "val_acc"]
    lines = ["\t".join(cols)]
    for h in res.history:
        lines.append("\t".join(_fmt(h.get(c, float("nan"))) for c in cols))
    (out / "history.tsv").write_text("\n".join(lines) + "\n")
    if res.history:
        plot_history(res.history, out / "history.png")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_eval(s):
    from .plotting import plot_fold_accuracy

    net, _ = load_checkpoint(s["model"])
    scenes = load_dataset(s["data"])
    splits = s.get("split") or list(SPLITS)
    if isinstance(splits, str):
        splits = splits.split(",")
    thresholds = s.get("iou") or list(THRESHOLDS)
    if isinstance(thresholds, str):
        thresholds = [float(v) for v in thresholds.split(",")]
    prob = float(s.get("threshold", 0.25))
    echo = {"model": s["model"], "data": s["data"], "folds": s["folds"],
            "prob_threshold": prob, "angle_mode": net.spec.angle_mode,
            "anchors": net.spec.anchors, "rem": net.spec.rem.enabled}
    report = evaluate(NetDetector(net), scenes, splits, thresholds, int(s["folds"]),
                      int(s["seed"]), prob, echo)
    report.timing.update(time_inference(net, scenes[0].image, int(s["repeats"]), prob))
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(report.to_tsv())
    (out / "report.txt").write_text(report.to_text())
    (out / "timing.tsv").write_text(report.timing_tsv())
    plot_fold_accuracy(report, out / "fold_accuracy.png")
    print(report.to_text(), end="")
    t = report.timing
    print(f"\nlatency (median of {t['network']['repeats']}): network "
          f"{t['network']['median_ms']:.2f} ms ({t['network']['fps']:.1f} FPS), end to end "
          f"{t['end_to_end']['median_ms']:.2f} ms ({t['end_to_end']['fps']:.1f} FPS)")
    return 0


def fit_image(image, size):
    """Centre-crop a larger image to the model input; refuse smaller ones."""
    h, w = size[:2]
    if image.shape[:2] == (h, w):
        return image
    if image.shape[0] < h or image.shape[1] < w or h != w:
        raise SystemExit(f"image {image.shape[:2]} does not fit model input {h}x{w}")
    return center_crop(image, [], h)[0]


def cmd_detect(s):
    from .plotting import plot_detections

    net, _ = load_checkpoint(s["model"])
    path = Path(s["image"])
    try:
        image = read_image(path)
    except (OSError, ValueError) as e:
        raise SystemExit(f"cannot read image {path}: {e}")
    image = fit_image(image, net.spec.input_size)
    thr = float(s.get("threshold", 0.25))
    dets = NetDetector(net)(image)
    cands = codec.select_grasps(dets, thr)
    best = codec.best_grasp(dets)
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    lines = [" ".join(f"{v:.4f}" for v in g.as_tuple()) for g in cands]
    (out / "grasps.txt").write_text("".join(l + "\n" for l in lines))
    plot_detections(image, cands, best, out / "overlay.png")
    print(f"{len(cands)} candidates with z >= {thr:g}")
    print("best: " + " ".join(f"{v:.4f}" for v in best.as_tuple()))
    return 0


def cmd_selftest(s):
    from .selftest import run_all

    t0 = time.perf_counter()
    ok = run_all(quick=not s.get("full"), fault=s.get("inject_fault"), seed=int(s["seed"]))
    print(f"selftest {'PASSED' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f}s")
    return 0 if ok else 1


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "detect": cmd_detect,
            "selftest": cmd_selftest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    s = settings(args)
    try:
        return COMMANDS[args.command](s)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
