"""Synthetic document photos with glare blobs and ground-truth boxes.

Pages are drawn on a darker table surface, carry text-like glyph rows
(document, magazine or business-card layouts) and receive one to three
anisotropic Gaussian glare blobs.  Each blob's box bounds the region where
its whitening opacity exceeds one half.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .labels import MarkupBox, coverage_mask

LAYOUTS = ("magazine", "document", "card")


@dataclass(frozen=True)
class SynthProfile:
    width: int = 1280
    height: int = 960
    glare_mean: float = 0.058
    glare_min: float = 0.005
    glare_max: float = 0.40
    glare_sigma: float = 0.9
    doc_min: float = 0.60
    doc_max: float = 0.95
    # magazines, documents, business cards
    layout_weights: tuple[float, float, float] = (380 / 692, 198 / 692, 114 / 692)
    blob_count_weights: tuple[float, ...] = (0.6, 0.3, 0.1)


@dataclass
class SynthPage:
    image_id: str
    image: np.ndarray
    boxes: list[MarkupBox]
    document: MarkupBox
    layout: str
    glare_mask: np.ndarray | None = field(default=None, repr=False)

    def document_boxes(self) -> list[MarkupBox]:
        out = []
        for b in self.boxes:
            c = b.intersect(self.document)
            if c is not None:
                out.append(c)
        return out

    def boxes_for(self, mode: str) -> list[MarkupBox]:
        if mode == "all":
            return list(self.boxes)
        if mode == "document":
            return self.document_boxes()
        raise ValueError(f"unknown markup mode {mode!r}")

    @property
    def glare_area(self) -> float:
        """Fraction of the frame covered by the union of glare boxes."""
        return float(coverage_mask(self.boxes, *self.image.shape).mean())


# --------------------------------------------------------------------------
# glare area distribution

def _phi(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def truncated_lognormal_mean(mu: float, sigma: float, lo: float, hi: float) -> float:
    a, b = (math.log(lo) - mu) / sigma, (math.log(hi) - mu) / sigma
    num = _phi(b - sigma) - _phi(a - sigma)
    den = _phi(b) - _phi(a)
    return math.exp(mu + sigma * sigma / 2) * num / den


def lognormal_location(profile: SynthProfile) -> float:
    """Location parameter giving the truncated distribution the target mean."""
    lo, hi = -10.0, 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        m = truncated_lognormal_mean(mid, profile.glare_sigma, profile.glare_min, profile.glare_max)
        if m < profile.glare_mean:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sample_glare_area(rng, profile: SynthProfile, mu: float) -> float:
    while True:
        f = float(np.exp(rng.normal(mu, profile.glare_sigma)))
        if profile.glare_min <= f <= profile.glare_max:
            return f


# --------------------------------------------------------------------------
# rendering helpers

def _smooth_noise(h: int, w: int, cell: int, rng) -> np.ndarray:
    """Bilinearly interpolated coarse random grid in [0, 1)."""
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.random((gh, gw))
    xs = np.arange(w) / cell
    x0 = xs.astype(int)
    fx = xs - x0
    rows = grid[:, x0] * (1 - fx) + grid[:, x0 + 1] * fx
    ys = np.arange(h) / cell
    y0 = ys.astype(int)
    fy = (ys - y0)[:, None]
    return rows[y0] * (1 - fy) + rows[y0 + 1] * fy


def _glyph_atlas(rng, count: int = 48) -> list[np.ndarray]:
    """Random 7x5 stroke glyphs padded with one blank column."""
    glyphs = []
    for _ in range(count):
        g = np.zeros((7, 5), bool)
        for _ in range(rng.integers(2, 5)):
            (y0, x0), (y1, x1) = rng.integers(0, (7, 5), size=(2, 2))
            t = np.linspace(0, 1, 9)
            g[np.rint(y0 + (y1 - y0) * t).astype(int), np.rint(x0 + (x1 - x0) * t).astype(int)] = True
        glyphs.append(np.pad(g, ((1, 0), (0, 1))))
    return glyphs


def _text_line(rng, glyphs, width_px: int, scale: int) -> np.ndarray:
    gw = glyphs[0].shape[1] * scale
    n = max(1, width_px // gw)
    blank = np.zeros_like(glyphs[0])
    cells, left = [], n
    while left > 0:
        word = int(rng.integers(2, 10))
        for _ in range(min(word, left)):
            cells.append(glyphs[rng.integers(len(glyphs))])
        left -= word
        if left > 0:
            cells.append(blank)
            left -= 1
    line = np.hstack(cells[:n])
    if scale > 1:
        line = np.kron(line, np.ones((scale, scale), bool))
    return line


def _paste_text(page, mask_fn, rng, glyphs, x0, y0, x1, y1, scale, spacing):
    gh = glyphs[0].shape[0] * scale
    y = y0
    while y + gh <= y1:
        if rng.random() < 0.9:
            frac = 1.0 if rng.random() < 0.8 else rng.uniform(0.3, 1.0)
            line = _text_line(rng, glyphs, int((x1 - x0) * frac), scale)
            h, w = line.shape
            mask_fn(page[y:y + h, x0:x0 + w], line)
        y += int(gh * spacing)


def _render_page(h, w, layout, rng, glyphs) -> np.ndarray:
    stock = rng.uniform(185, 235)
    page = np.full((h, w), stock)
    page *= 1.0 - 0.12 * _smooth_noise(h, w, max(h, w) // 2, rng)
    ink = rng.uniform(15, 70)

    def stamp(region, line):
        region[line] = ink + rng.normal(0, 3)

    margin_x, margin_y = int(w * rng.uniform(0.05, 0.1)), int(h * rng.uniform(0.04, 0.08))
    if layout == "card":
        scale = int(rng.integers(2, 5))
        n_lines = int(rng.integers(3, 8))
        gh = 8 * scale
        spacing = rng.uniform(1.5, 2.5)
        ys = margin_y + rng.integers(0, max(1, h - 2 * margin_y - int(n_lines * gh * spacing)) + 1)
        _paste_text(page, stamp, rng, glyphs, margin_x, int(ys), w - margin_x,
                    min(h - margin_y, int(ys + n_lines * gh * spacing)), scale, spacing)
        return page
    y = margin_y
    if layout == "magazine":
        head = int(rng.integers(3, 6))
        _paste_text(page, stamp, rng, glyphs, margin_x, y, w - margin_x,
                    y + int(8 * head * 1.3), head, 1.3)
        y += int(8 * head * 1.5)
        cols = int(rng.integers(2, 4))
    else:
        cols = 1
    gutter = int(w * 0.03)
    col_w = (w - 2 * margin_x - (cols - 1) * gutter) // cols
    scale = 1 if layout == "magazine" or rng.random() < 0.5 else 2
    for c in range(cols):
        cx0 = margin_x + c * (col_w + gutter)
        cy = y
        if layout == "magazine" and rng.random() < 0.6:
            ph = int(rng.uniform(0.15, 0.35) * h)
            if cy + ph < h - margin_y:
                tone = rng.uniform(40, 200) + 60 * (_smooth_noise(ph, col_w, 24, rng) - 0.5)
                page[cy:cy + ph, cx0:cx0 + col_w] = tone
                cy += ph + gutter
        _paste_text(page, stamp, rng, glyphs, cx0, cy, cx0 + col_w, h - margin_y, scale,
                    rng.uniform(1.4, 2.0))
    return page


def _blob(rng, area_px: float, h: int, w: int):
    """Sample (cx, cy, sx, sy, theta, amp) whose half-opacity box has ``area_px``."""
    amp = rng.uniform(1.2, 3.0)
    c = math.sqrt(2 * math.log(2 * amp))
    theta = rng.uniform(0, math.pi)
    ratio = math.exp(rng.uniform(-0.7, 0.7))
    sx, sy = ratio, 1.0 / ratio
    ct, st = math.cos(theta), math.sin(theta)
    ex = c * math.sqrt((sx * ct) ** 2 + (sy * st) ** 2)
    ey = c * math.sqrt((sx * st) ** 2 + (sy * ct) ** 2)
    k = math.sqrt(area_px / (4 * ex * ey))
    # keep the box inside the frame
    k = min(k, 0.49 * w / ex, 0.49 * h / ey)
    sx, sy, ex, ey = sx * k, sy * k, ex * k, ey * k
    cx = rng.uniform(ex, w - ex)
    cy = rng.uniform(ey, h - ey)
    return cx, cy, sx, sy, theta, amp, ex, ey


def _blob_opacity(shape, cx, cy, sx, sy, theta, amp):
    h, w = shape
    x0, x1 = max(0, int(cx - 4 * max(sx, sy))), min(w, int(cx + 4 * max(sx, sy)) + 1)
    y0, y1 = max(0, int(cy - 4 * max(sx, sy))), min(h, int(cy + 4 * max(sx, sy)) + 1)
    ys = np.arange(y0, y1)[:, None] + 0.5 - cy
    xs = np.arange(x0, x1)[None, :] + 0.5 - cx
    ct, st = math.cos(theta), math.sin(theta)
    u = (xs * ct + ys * st) / sx
    v = (-xs * st + ys * ct) / sy
    alpha = np.minimum(1.0, amp * np.exp(-0.5 * (u * u + v * v)))
    return (slice(y0, y1), slice(x0, x1)), alpha


def render_page(rng, profile: SynthProfile, mu: float, glyphs, image_id: str,
                keep_mask: bool = False) -> SynthPage:
    h, w = profile.height, profile.width
    layout = LAYOUTS[rng.choice(len(LAYOUTS), p=np.asarray(profile.layout_weights) / sum(profile.layout_weights))]

    table = rng.uniform(30, 130) + 50 * (_smooth_noise(h, w, 64, rng) - 0.5)
    img = table + rng.normal(0, 4, (h, w))
    doc_frac = rng.uniform(profile.doc_min, profile.doc_max)
    aspect = math.exp(rng.uniform(-0.3, 0.3)) * w / h
    dh = min(h, int(round(math.sqrt(doc_frac * h * w / aspect))))
    dw = min(w, int(math.ceil(doc_frac * h * w / dh)))
    dx, dy = int(rng.integers(0, w - dw + 1)), int(rng.integers(0, h - dh + 1))
    page = _render_page(dh, dw, layout, rng, glyphs)
    img[dy:dy + dh, dx:dx + dw] = page + rng.normal(0, 3, page.shape)
    document = MarkupBox(dx, dy, dw, dh)

    weights = np.asarray(profile.blob_count_weights)
    while True:
        frac = sample_glare_area(rng, profile, mu)
        n_blobs = int(rng.choice(len(weights), p=weights / weights.sum())) + 1
        parts = rng.dirichlet(np.full(n_blobs, 2.0)) if n_blobs > 1 else np.ones(1)
        blobs, boxes = [], []
        for part in parts:
            cx, cy, sx, sy, theta, amp, ex, ey = _blob(rng, part * frac * h * w, h, w)
            blobs.append((cx, cy, sx, sy, theta, amp))
            x0, x1 = max(0, math.floor(cx - ex)), min(w, math.ceil(cx + ex))
            y0, y1 = max(0, math.floor(cy - ey)), min(h, math.ceil(cy + ey))
            boxes.append(MarkupBox(x0, y0, x1 - x0, y1 - y0))
        # outward pixel rounding can push small frames past the cap; redraw then
        if coverage_mask(boxes, h, w).mean() <= profile.glare_max:
            break
    whiteness = rng.uniform(242, 255)
    alpha = np.zeros((h, w))
    for blob in blobs:
        sl, a = _blob_opacity((h, w), *blob)
        np.maximum(alpha[sl], a, out=alpha[sl])
    img = img + alpha * (whiteness - img)
    img = np.clip(np.rint(img + rng.normal(0, 1.5, (h, w))), 0, 255).astype(np.uint8)
    return SynthPage(image_id, img, boxes, document, layout, alpha if keep_mask else None)


def synth_dataset(n: int, seed: int = 0, profile: SynthProfile | None = None,
                  keep_masks: bool = False) -> list[SynthPage]:
    """Render ``n`` pages; page ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    profile = profile or SynthProfile()
    mu = lognormal_location(profile)
    glyphs = _glyph_atlas(np.random.default_rng([seed, 0x61797068]))
    children = np.random.SeedSequence(seed).spawn(n)
    return [render_page(np.random.default_rng(s), profile, mu, glyphs, f"img{i:05d}", keep_masks)
            for i, s in enumerate(children)]
