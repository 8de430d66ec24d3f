"""Command-line workflows: gen-data, extract, train, predict, eval, bench.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numeric
divergence.  Every output file is written to a temporary name and renamed.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .data import (DEFAULT_SCHEDULE, DivergenceError, FeatureCache, GlareTask, Phase,
                   TrainConfig, load_samples, read_manifest, run_schedule, scaled_schedule,
                   write_dataset)
from .evaluate import DEFAULT_THRESHOLD, bench, environment, sweep, threshold_heatmap
from .features import DEFAULT_BINS, FormatError, assemble_feature_stack, default_workers
from .labels import rasterize_labels, read_markup
from .model import ConfigError, GlareNetConfig, build_glare_net, glare_forward, load_glare_net
from .nn import ShapeError, WeightFormatError, save_weights
from .raster import DEFAULT_BLOCK, BlockGridShape, DimensionError, read_image
from .synth import SynthProfile, synth_dataset

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4
OVERLAY_ALPHA = 0.4


class UsageError(Exception):
    pass


def _atomic_bytes(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _atomic_text(path, text: str) -> None:
    _atomic_bytes(path, text.encode("utf-8"))


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _need_out_dir(path) -> Path:
    p = Path(path)
    if p.parent and not p.parent.exists():
        raise FileNotFoundError(f"output directory {p.parent} does not exist")
    return p


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise UsageError(f"{out} exists and is not empty")
    if not 0 <= args.test_fraction < 1:
        raise UsageError("--test-fraction must lie in [0, 1)")
    profile = SynthProfile(width=args.width, height=args.height)
    pages = synth_dataset(args.n, args.seed, profile)
    n_test = int(round(args.n * args.test_fraction))
    split = {p.image_id: ("test" if i >= args.n - n_test else "train") for i, p in enumerate(pages)}
    tmp = out.with_name(out.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    write_dataset(pages, tmp, split)
    if out.exists():
        out.rmdir()
    os.replace(tmp, out)
    areas = [p.glare_area for p in pages]
    print(f"wrote {args.n} images to {out} (mean glare area {np.mean(areas):.4f})")
    return 0


def cmd_extract(args) -> int:
    img = read_image(_need_file(args.image))
    out = _need_out_dir(args.out)
    fs = assemble_feature_stack(img, args.block_size, args.bins)
    fs.save(out)
    print(f"{out}: {fs.rows}x{fs.cols} blocks, {fs.bins} bins")
    return 0


def _parse_epochs(text: str | None) -> tuple[Phase, ...]:
    if text is None:
        return DEFAULT_SCHEDULE
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--epochs expects integers, got {text!r}") from None
    if len(vals) == 1:
        return (Phase(1, "random", vals[0]),)
    if len(vals) == 3:
        return scaled_schedule(*vals)
    raise UsageError("--epochs takes one value (random phase only) or three (random,hard,final)")


def cmd_train(args) -> int:
    manifest = _need_file(args.manifest)
    out = _need_out_dir(args.out)
    cfg_net = GlareNetConfig.from_file(_need_file(args.config)) if args.config else GlareNetConfig()
    if args.bins is not None:
        cfg_net.bins = args.bins
    schedule = _parse_epochs(args.epochs)
    cfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                      block_size=args.block_size, bins=cfg_net.bins)
    cache = FeatureCache(args.block_size, cfg_net.bins)
    tasks = {1: GlareTask(load_samples(manifest, "all", "train"), cache, cfg),
             2: GlareTask(load_samples(manifest, "document", "train"), cache, cfg)}
    model = build_glare_net(cfg_net, seed=args.seed)

    def progress(entry):
        if not args.quiet:
            print(f"epoch {entry['epoch']:5d}  dataset {entry['dataset']}  {entry['policy']:13s}"
                  f"  loss {entry['loss']:.5f}", flush=True)

    model, trace = run_schedule(schedule, model, tasks, cfg, progress=progress)
    save_weights(model, out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.json")
    _atomic_text(log_path, trace.to_json() + "\n")
    print(f"saved {model.param_count()} parameters to {out}; loss log {log_path}")
    return 0


def _overlay(gray: np.ndarray, mask: np.ndarray, block: int) -> np.ndarray:
    rgb = np.repeat(gray[..., None].astype(np.float64), 3, axis=2)
    tint = np.zeros(gray.shape, bool)
    rows, cols = mask.shape
    tint[:rows * block, :cols * block] = np.kron(mask, np.ones((block, block))).astype(bool)
    red = np.array([255.0, 0.0, 0.0])
    rgb[tint] = (1 - OVERLAY_ALPHA) * rgb[tint] + OVERLAY_ALPHA * red
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def cmd_predict(args) -> int:
    path = _need_file(args.image)
    model = load_glare_net(_need_file(args.weights))
    out = _need_out_dir(args.out)
    if not 0 <= args.threshold <= 1:
        raise UsageError("--threshold must lie in [0, 1]")
    gray = read_image(path)
    fs = assemble_feature_stack(gray, args.block_size, model.config.bins)
    heat = glare_forward(model, fs)
    mask = threshold_heatmap(heat, args.threshold)
    doc = {"image": path.name, "block_size": args.block_size, "rows": fs.rows, "cols": fs.cols,
           "threshold": args.threshold, "probabilities": np.round(heat.astype(float), 6).tolist(),
           "mask": mask.tolist()}
    _atomic_text(out, json.dumps(doc) + "\n")
    overlay = Path(args.overlay) if args.overlay else out.with_suffix(".png")
    tmp = overlay.with_name(overlay.name + ".tmp")
    Image.fromarray(_overlay(gray, mask, args.block_size)).save(tmp, format="PNG")
    os.replace(tmp, overlay)
    print(f"{int(mask.sum())} of {mask.size} blocks flagged; wrote {out} and {overlay}")
    return 0


def cmd_eval(args) -> int:
    manifest = _need_file(args.manifest)
    if (args.weights is None) == (args.heatmaps is None):
        raise UsageError("give exactly one of --weights or --heatmaps")
    if args.split == "any":
        args.split = None
    entries = [e for e in read_manifest(manifest)
               if args.split is None or e.get("split", "train") == args.split]
    if not entries:
        raise UsageError(f"no manifest entries in split {args.split!r}")
    heats, targets = [], []
    param_count = 0
    if args.heatmaps is not None:
        hdir = Path(args.heatmaps)
        for e in entries:
            doc = json.loads((hdir / f"{e['id']}.json").read_text())
            h = np.asarray(doc["probabilities"], np.float64)
            _, _, boxes = read_markup(manifest.parent / e["markup"][args.mode])
            heats.append(h)
            targets.append(rasterize_labels(boxes, BlockGridShape(h.shape[0], h.shape[1], args.block_size)))
    else:
        model = load_glare_net(_need_file(args.weights))
        param_count = model.param_count()
        for s in load_samples(manifest, args.mode, args.split):
            fs = assemble_feature_stack(s.image, args.block_size, model.config.bins)
            heats.append(glare_forward(model, fs))
            targets.append(rasterize_labels(s.boxes, BlockGridShape(fs.rows, fs.cols, args.block_size)))
    report = sweep(heats, targets)
    report.parameter_count = param_count
    report.environment = environment()
    if args.out:
        _atomic_text(_need_out_dir(args.out), report.to_json() + "\n")
    if args.csv:
        _atomic_text(_need_out_dir(args.csv), report.to_csv())
    print(report.to_table())
    return 0


def cmd_bench(args) -> int:
    if args.repeats < 3:
        raise UsageError("--repeats must be at least 3")
    model = load_glare_net(_need_file(args.weights)) if args.weights else build_glare_net(seed=args.seed)
    if args.image:
        gray = read_image(_need_file(args.image))
    else:
        profile = SynthProfile(width=3840, height=2160)
        gray = synth_dataset(1, args.seed, profile)[0].image
    workers = args.workers if args.workers is not None else 1
    bins = model.config.bins
    result = bench(lambda img: assemble_feature_stack(img, args.block_size, bins, workers),
                   lambda fs: glare_forward(model, fs), gray, args.repeats)
    h, w = gray.shape
    print(f"image {w}x{h}, {args.repeats} runs, {workers} feature worker(s)")
    print(f"feature_ms {result.feature_ms:.1f}")
    print(f"forward_ms {result.forward_ms:.1f}")
    print(f"total_ms {result.total_ms:.1f}")
    print(f"environment {result.environment}")
    if args.out:
        doc = result.to_dict()
        doc.update(width=w, height=h, workers=workers, parameter_count=model.param_count())
        _atomic_text(_need_out_dir(args.out), json.dumps(doc, indent=1) + "\n")
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="docglare", description="Block-wise glare detection on document photos.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--block-size", type=int, default=DEFAULT_BLOCK, help="block edge in pixels (64)")
        if seed:
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--width", type=int, default=SynthProfile.width)
    p.add_argument("--height", type=int, default=SynthProfile.height)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("extract", help="compute the feature stack of one image")
    p.add_argument("image")
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    common(p, seed=False)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the glare net on a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--config", help="key = value network config file")
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--epochs", help="N (random only) or R,H,F; default 1500,250,250")
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--log", help="loss log path (default: <out>.log.json)")
    p.add_argument("--quiet", action="store_true")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="heatmap and overlay for one image")
    p.add_argument("image")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True, help="heatmap JSON path")
    p.add_argument("--overlay", help="overlay PNG path (default: <out> with .png)")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    common(p, seed=False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="threshold sweep against manifest markup")
    p.add_argument("manifest")
    p.add_argument("--weights")
    p.add_argument("--heatmaps", help="directory of <id>.json heatmaps instead of --weights")
    p.add_argument("--mode", choices=("all", "document"), default="document")
    p.add_argument("--split", default="test", help="manifest split to score, or \"any\" (default test)")
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--csv", help="sweep rows as CSV")
    common(p, seed=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time feature extraction and the forward pass")
    p.add_argument("--image", help="input image (default: synthetic 3840x2160 page)")
    p.add_argument("--weights")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--workers", type=int, default=None,
                   help="feature threads (default 1; GLARE_NUM_WORKERS caps it)")
    p.add_argument("--out", help="timing JSON path")
    common(p)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "workers", None) is not None and os.environ.get("GLARE_NUM_WORKERS"):
        args.workers = min(args.workers, default_workers())
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"docglare: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"docglare: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, IsADirectoryError, FormatError, WeightFormatError, ConfigError,
            DimensionError, ShapeError, UnidentifiedImageError, json.JSONDecodeError, KeyError,
            ValueError) as exc:
        print(f"docglare: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
