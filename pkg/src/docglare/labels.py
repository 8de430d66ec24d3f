"""Glare markup boxes, their JSON files and block-label rasterization."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import BlockGridShape

COVERAGE = 0.25
MODES = ("all", "document")


@dataclass(frozen=True)
class MarkupBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box needs positive size, got {self.w}x{self.h}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def intersect(self, other: "MarkupBox") -> "MarkupBox | None":
        x0, y0 = max(self.x, other.x), max(self.y, other.y)
        x1 = min(self.x + self.w, other.x + other.w)
        y1 = min(self.y + self.h, other.y + other.h)
        if x1 <= x0 or y1 <= y0:
            return None
        return MarkupBox(x0, y0, x1 - x0, y1 - y0)

    def clip(self, width: int, height: int) -> "MarkupBox | None":
        return self.intersect(MarkupBox(0, 0, width, height))

    def scaled(self, sx: float, sy: float | None = None) -> "MarkupBox | None":
        """Box in the coordinates of an image resized by ``sx`` (and ``sy``)."""
        sy = sx if sy is None else sy
        x0, y0 = int(round(self.x * sx)), int(round(self.y * sy))
        x1, y1 = int(round((self.x + self.w) * sx)), int(round((self.y + self.h) * sy))
        if x1 <= x0 or y1 <= y0:
            return None
        return MarkupBox(x0, y0, x1 - x0, y1 - y0)

    def shifted(self, dx: int, dy: int) -> "MarkupBox":
        return MarkupBox(self.x + dx, self.y + dy, self.w, self.h)

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    @classmethod
    def from_json(cls, d: dict) -> "MarkupBox":
        return cls(int(d["x"]), int(d["y"]), int(d["w"]), int(d["h"]))


def coverage_mask(boxes, height: int, width: int) -> np.ndarray:
    """Boolean pixel mask of the union of ``boxes`` over a height x width frame."""
    diff = np.zeros((height + 1, width + 1), np.int32)
    for b in boxes:
        c = b.clip(width, height)
        if c is None:
            continue
        diff[c.y, c.x] += 1
        diff[c.y, c.x + c.w] -= 1
        diff[c.y + c.h, c.x] -= 1
        diff[c.y + c.h, c.x + c.w] += 1
    return np.cumsum(np.cumsum(diff, axis=0), axis=1)[:height, :width] > 0


def rasterize_labels(boxes, shape: BlockGridShape, coverage: float = COVERAGE) -> np.ndarray:
    """1 where the union of boxes covers at least ``coverage`` of a block's pixels."""
    if not 0 < coverage <= 1:
        raise ValueError("coverage threshold must lie in (0, 1]")
    b = shape.block_size
    h, w = shape.covered
    mask = coverage_mask(boxes, h, w)
    counts = mask.reshape(shape.rows, b, shape.cols, b).sum(axis=(1, 3))
    need = math.ceil(coverage * b * b - 1e-9)
    return (counts >= need).astype(np.uint8)


def write_markup(path, image_name: str, mode: str, boxes) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown markup mode {mode!r}")
    doc = {"image": image_name, "mode": mode, "boxes": [b.to_json() for b in boxes]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_markup(path) -> tuple[str, str, list[MarkupBox]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("mode") not in MODES:
        raise ValueError(f"{path}: unknown markup mode {doc.get('mode')!r}")
    return doc["image"], doc["mode"], [MarkupBox.from_json(b) for b in doc["boxes"]]
