"""Training data plumbing: scaled feature caches, crops, hard negatives, schedules.

A training set is a list of :class:`LabeledSample` (a gray image plus markup
boxes).  Images are rescaled to a small set of scale buckets, features are
computed once per (image, bucket) and reused by every epoch.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import DEFAULT_BINS, FeatureStack, assemble_feature_stack
from .labels import MarkupBox, rasterize_labels, read_markup, write_markup
from .model import feature_feeds, unet_block_probabilities
from .nn import (AdamState, ModelGraph, adam_step, pos_weight_for, weighted_bce,
                 weighted_bce_logits)
from .raster import DEFAULT_BLOCK, BlockGridShape, read_image, rescale, write_image

log = logging.getLogger(__name__)

SCALE_BUCKETS = (0.3, 0.6, 0.9, 1.2, 1.5)
POLICIES = ("random", "hard-negative")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class LabeledSample:
    image_id: str
    image: np.ndarray
    boxes: list[MarkupBox]
    mode: str = "all"


@dataclass(frozen=True)
class Phase:
    dataset: int
    policy: str
    epochs: int

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown batch policy {self.policy!r}")
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")


DEFAULT_SCHEDULE = (Phase(1, "random", 1500), Phase(1, "hard-negative", 250),
                    Phase(2, "hard-negative", 250))


def scaled_schedule(random_epochs: int, hard_epochs: int, final_epochs: int) -> tuple[Phase, ...]:
    return (Phase(1, "random", random_epochs), Phase(1, "hard-negative", hard_epochs),
            Phase(2, "hard-negative", final_epochs))


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    crop: tuple[int, int] = (16, 16)
    hard_fraction: float = 0.75
    hard_pool: float = 0.25
    scale_buckets: tuple[float, ...] = SCALE_BUCKETS
    block_size: int = DEFAULT_BLOCK
    bins: int = DEFAULT_BINS
    pos_weight: float | None = None
    seed: int = 0


# --------------------------------------------------------------------------
# samples and crops

def nearest_bucket(scale: float, buckets=SCALE_BUCKETS) -> float:
    return min(buckets, key=lambda b: (abs(b - scale), b))


def scale_sample(image: np.ndarray, boxes, scale: float):
    """Rescaled image and boxes mapped into its coordinates."""
    img = rescale(image, scale)
    sy, sx = img.shape[0] / image.shape[0], img.shape[1] / image.shape[1]
    out = []
    for b in boxes:
        s = b.scaled(sx, sy)
        if s is not None:
            s = s.clip(img.shape[1], img.shape[0])
        if s is not None:
            out.append(s)
    return img, out


def random_crop(fs: FeatureStack, labels: np.ndarray, crop: tuple[int, int], rng):
    """Aligned crop of every feature tensor and the label grid.

    Returns ``(features, labels, (row, col))``.
    """
    ch, cw = crop
    if ch > fs.rows or cw > fs.cols:
        raise ValueError(f"crop {ch}x{cw} exceeds the {fs.rows}x{fs.cols} grid")
    if labels.shape != (fs.rows, fs.cols):
        raise ValueError("labels and features disagree on the grid shape")
    r0 = int(rng.integers(0, fs.rows - ch + 1))
    c0 = int(rng.integers(0, fs.cols - cw + 1))
    return fs.crop(r0, c0, ch, cw), labels[r0:r0 + ch, c0:c0 + cw], (r0, c0)


class FeatureCache:
    """Feature stacks per (image, bucket) and labels per (image, mode, bucket)."""

    def __init__(self, block_size: int = DEFAULT_BLOCK, bins: int = DEFAULT_BINS):
        self.block_size, self.bins = block_size, bins
        self._features: dict = {}
        self._labels: dict = {}

    def get(self, sample: LabeledSample, scale: float):
        fkey = (sample.image_id, scale)
        if fkey not in self._features:
            img = sample.image if scale == 1.0 else rescale(sample.image, scale)
            self._features[fkey] = assemble_feature_stack(img, self.block_size, self.bins)
        fs = self._features[fkey]
        lkey = (sample.image_id, sample.mode, scale)
        if lkey not in self._labels:
            _, boxes = scale_sample(sample.image, sample.boxes, scale) if scale != 1.0 \
                else (None, sample.boxes)
            shape = BlockGridShape(fs.rows, fs.cols, self.block_size)
            self._labels[lkey] = rasterize_labels(boxes, shape)
        return fs, self._labels[lkey]


# --------------------------------------------------------------------------
# training tasks

class GlareTask:
    """Batches of feature crops for the block network."""

    def __init__(self, samples: list[LabeledSample], cache: FeatureCache, cfg: TrainConfig):
        if not samples:
            raise ValueError("empty dataset")
        self.samples, self.cache, self.cfg = samples, cache, cfg

    def __len__(self):
        return len(self.samples)

    def batch(self, idx, scale: float, rng):
        pairs = [self.cache.get(self.samples[i], scale) for i in idx]
        ch = min(self.cfg.crop[0], *(fs.rows for fs, _ in pairs))
        cw = min(self.cfg.crop[1], *(fs.cols for fs, _ in pairs))
        crops = [random_crop(fs, lab, (ch, cw), rng) for fs, lab in pairs]
        feeds = feature_feeds([c[0] for c in crops])
        target = np.stack([c[1] for c in crops]).astype(np.float32)[..., None]
        return feeds, target

    def predict(self, model: ModelGraph, i: int):
        fs, lab = self.cache.get(self.samples[i], 1.0)
        return model.forward(feature_feeds(fs), keep_state=False)[0, :, :, 0], lab


class GrayTask:
    """Batches of gray-image crops with 8x8-cell labels for the U-Net."""

    cell = 8

    def __init__(self, samples: list[LabeledSample], cfg: TrainConfig, crop_px: int = 256):
        if not samples:
            raise ValueError("empty dataset")
        self.samples, self.cfg, self.crop_px = samples, cfg, crop_px
        self._cache: dict = {}

    def __len__(self):
        return len(self.samples)

    def _get(self, i: int, scale: float):
        key = (i, scale)
        if key not in self._cache:
            s = self.samples[i]
            img, boxes = scale_sample(s.image, s.boxes, scale) if scale != 1.0 else (s.image, s.boxes)
            h, w = (img.shape[0] // 32) * 32, (img.shape[1] // 32) * 32
            shape = BlockGridShape(h // self.cell, w // self.cell, self.cell)
            self._cache[key] = (img[:h, :w], rasterize_labels(boxes, shape))
        return self._cache[key]

    def batch(self, idx, scale: float, rng):
        pairs = [self._get(i, scale) for i in idx]
        ph = min(self.crop_px, *(p[0].shape[0] for p in pairs))
        pw = min(self.crop_px, *(p[0].shape[1] for p in pairs))
        imgs, labs = [], []
        for img, lab in pairs:
            r0 = int(rng.integers(0, (img.shape[0] - ph) // 32 + 1)) * 32
            c0 = int(rng.integers(0, (img.shape[1] - pw) // 32 + 1)) * 32
            imgs.append(img[r0:r0 + ph, c0:c0 + pw])
            labs.append(lab[r0 // self.cell:(r0 + ph) // self.cell, c0 // self.cell:(c0 + pw) // self.cell])
        feeds = {"gray": np.stack(imgs).astype(np.float32)[..., None]}
        return feeds, np.stack(labs).astype(np.float32)[..., None]

    def predict(self, model: ModelGraph, i: int):
        img, lab = self._get(i, 1.0)
        out = model.forward({"gray": img.astype(np.float32)[None, :, :, None]}, keep_state=False)
        return out[0, :, :, 0], lab


def image_losses(model: ModelGraph, task, pos_weight: float | None = None) -> np.ndarray:
    """Weighted BCE of the current model on every full image of ``task``."""
    preds, labs = zip(*(task.predict(model, i) for i in range(len(task))))
    if pos_weight is None:
        pos_weight = pos_weight_for(np.concatenate([l.ravel() for l in labs]))
    return np.array([weighted_bce(p, l, pos_weight)[0] for p, l in zip(preds, labs)])


def hard_negative_select(model: ModelGraph, task, k: int, pos_weight: float | None = None):
    """Indices of the ``k`` highest-loss images, ties broken by sample order."""
    if len(task) == 0:
        raise ValueError("empty dataset")
    if not 0 < k <= len(task):
        raise ValueError(f"k={k} outside 1..{len(task)}")
    losses = image_losses(model, task, pos_weight)
    order = sorted(range(len(task)), key=lambda i: (-losses[i], i))
    return order[:k], losses


# --------------------------------------------------------------------------
# schedule

@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]

    def to_json(self) -> str:
        return json.dumps(self.epochs, indent=1)


def train_step(model: ModelGraph, feeds, target, state: AdamState, pos_weight: float | None):
    model.forward(feeds)
    pw = pos_weight_for(target) if pos_weight is None else pos_weight
    with np.errstate(invalid="ignore", over="ignore"):
        loss, dz = weighted_bce_logits(model.preactivation(), target, pw)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    model.zero_grad()
    model.backward(dz.astype(model.preactivation().dtype), preactivation_grad=True)
    params = list(model.named_params().values())
    grads = list(model.named_grads().values())
    adam_step(params, grads, state)
    return loss


def run_schedule(schedule, model: ModelGraph, datasets: dict, cfg: TrainConfig | None = None,
                 state: AdamState | None = None, progress=None):
    """Run each phase in order; returns ``(model, TrainLog)``.

    ``datasets`` maps a dataset id to a task (:class:`GlareTask` or
    :class:`GrayTask`).  An epoch is ``ceil(n / batch_size)`` steps.
    """
    cfg = cfg or TrainConfig()
    state = state or AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    trace = TrainLog()
    epoch_no = 0
    for phase in schedule:
        if phase.dataset not in datasets:
            raise KeyError(f"schedule references missing dataset {phase.dataset}")
        task = datasets[phase.dataset]
        n, bs = len(task), cfg.batch_size
        steps = math.ceil(n / bs)
        for _ in range(phase.epochs):
            if phase.policy == "random":
                perm = rng.permutation(n)
                batches = [perm[s * bs:(s + 1) * bs] for s in range(steps)]
            else:
                k = max(1, min(n, max(bs, int(round(cfg.hard_pool * n)))))
                pool, _ = hard_negative_select(model, task, k, cfg.pos_weight)
                n_hard = max(1, int(round(cfg.hard_fraction * bs)))
                batches = []
                for _s in range(steps):
                    hard = rng.choice(pool, size=min(n_hard, len(pool)), replace=False)
                    rand = rng.choice(n, size=bs - len(hard), replace=True)
                    batches.append(np.concatenate([hard, rand]).astype(int))
            losses = []
            for idx in batches:
                scale = nearest_bucket(float(rng.uniform(0.3, 1.5)), cfg.scale_buckets)
                feeds, target = task.batch(list(idx), scale, rng)
                losses.append(train_step(model, feeds, target, state, cfg.pos_weight))
            epoch_no += 1
            entry = {"epoch": epoch_no, "dataset": phase.dataset, "policy": phase.policy,
                     "loss": float(np.mean(losses))}
            trace.epochs.append(entry)
            if progress is not None:
                progress(entry)
            log.debug("epoch %d %s loss %.5f", epoch_no, phase.policy, entry["loss"])
    return model, trace


# --------------------------------------------------------------------------
# on-disk datasets

def write_dataset(pages, out_dir, split: dict[str, str] | None = None) -> Path:
    """Write images, both markup variants and a newline-delimited manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "markup").mkdir(exist_ok=True)
    lines = []
    for p in pages:
        name = f"{p.image_id}.png"
        write_image(out / "images" / name, p.image)
        entry = {"id": p.image_id, "image": f"images/{name}", "markup": {},
                 "glare_area": round(p.glare_area, 6), "layout": p.layout,
                 "document": p.document.to_json()}
        for mode in ("all", "document"):
            rel = f"markup/{p.image_id}.{mode}.json"
            write_markup(out / rel, name, mode, p.boxes_for(mode))
            entry["markup"][mode] = rel
        if split:
            entry["split"] = split.get(p.image_id, "train")
        lines.append(json.dumps(entry, sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def load_samples(manifest, mode: str = "all", split: str | None = None) -> list[LabeledSample]:
    manifest = Path(manifest)
    out = []
    for entry in read_manifest(manifest):
        if split is not None and entry.get("split", "train") != split:
            continue
        img = read_image(manifest.parent / entry["image"])
        _, m, boxes = read_markup(manifest.parent / entry["markup"][mode])
        out.append(LabeledSample(entry["id"], img, boxes, m))
    return out


def pages_to_samples(pages, mode: str) -> list[LabeledSample]:
    return [LabeledSample(p.image_id, p.image, p.boxes_for(mode), mode) for p in pages]


def evaluate_unet_blocks(model: ModelGraph, samples: list[LabeledSample], block_size: int = DEFAULT_BLOCK):
    """U-Net probabilities averaged per block, with block labels, for each sample."""
    out = []
    for s in samples:
        img = s.image
        h, w = (img.shape[0] // 32) * 32, (img.shape[1] // 32) * 32
        feeds = {"gray": img[:h, :w].astype(np.float32)[None, :, :, None]}
        prob = model.forward(feeds, keep_state=False)[0, :, :, 0]
        blocks = unet_block_probabilities(prob, block_size)
        shape = BlockGridShape(blocks.shape[0], blocks.shape[1], block_size)
        out.append((blocks, rasterize_labels(s.boxes, shape)))
    return out
