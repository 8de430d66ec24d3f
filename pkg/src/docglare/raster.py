"""Image ingestion, grayscale conversion, rescaling and block tiling.

Images are plain 2-D ``uint8`` numpy arrays indexed ``[row, col]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

DEFAULT_BLOCK = 64
MIN_SCALE, MAX_SCALE = 0.3, 1.5


class DimensionError(ValueError):
    """Raised when an image is empty or too small for the requested operation."""


@dataclass(frozen=True)
class BlockGridShape:
    rows: int
    cols: int
    block_size: int = DEFAULT_BLOCK

    @classmethod
    def for_image(cls, height: int, width: int, block_size: int = DEFAULT_BLOCK) -> "BlockGridShape":
        if block_size < 8:
            raise DimensionError(f"block size must be >= 8, got {block_size}")
        if height < block_size or width < block_size:
            raise DimensionError(
                f"image {width}x{height} is smaller than one {block_size}px block")
        return cls(height // block_size, width // block_size, block_size)

    @property
    def covered(self) -> tuple[int, int]:
        """Pixel (height, width) of the region the grid covers."""
        return self.rows * self.block_size, self.cols * self.block_size


def as_gray(img) -> np.ndarray:
    a = np.asarray(img)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D gray image, got shape {a.shape}")
    if a.size == 0:
        raise DimensionError("empty image")
    if a.dtype != np.uint8:
        if a.min() < 0 or a.max() > 255:
            raise ValueError("gray values must lie in [0, 255]")
        a = a.astype(np.uint8)
    return a


def to_grayscale(rgb) -> np.ndarray:
    """BT.601 luma, rounded half-up and clamped to [0, 255]."""
    a = np.asarray(rgb)
    if a.ndim != 3 or a.shape[2] < 3:
        raise DimensionError(f"expected an HxWx3 image, got shape {a.shape}")
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise DimensionError("zero-dimension image")
    a = a[..., :3].astype(np.int64)
    # integer weights in thousandths keep the half-up rounding exact
    luma = (299 * a[..., 0] + 587 * a[..., 1] + 114 * a[..., 2] + 500) // 1000
    return np.clip(luma, 0, 255).astype(np.uint8)


def rescale(img, scale: float) -> np.ndarray:
    """Bilinear resize by ``scale`` (half-pixel centres, edge clamped).

    Output size is ``round(dim * scale)``; ``scale == 1`` returns a copy.
    """
    if not MIN_SCALE <= scale <= MAX_SCALE:
        raise ValueError(f"scale {scale} outside [{MIN_SCALE}, {MAX_SCALE}]")
    img = as_gray(img)
    h, w = img.shape
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (nh, nw) == (h, w):
        return img.copy()

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        i0 = np.floor(pos).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (pos - i0).astype(np.float32)

    r0, r1, fr = axis(nh, h)
    c0, c1, fc = axis(nw, w)
    src = img.astype(np.float32)
    top, bot = src[r0], src[r1]
    rows = top + (bot - top) * fr[:, None]
    left, right = rows[:, c0], rows[:, c1]
    out = left + (right - left) * fc[None, :]
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def tile(img, block_size: int = DEFAULT_BLOCK) -> tuple[BlockGridShape, Iterator[tuple[int, int, np.ndarray]]]:
    """Split into non-overlapping blocks anchored top-left; remainders are dropped.

    Returns the grid shape and a row-major iterator of ``(row, col, block)``.
    """
    img = as_gray(img)
    shape = BlockGridShape.for_image(img.shape[0], img.shape[1], block_size)

    def blocks():
        b = block_size
        for r in range(shape.rows):
            for c in range(shape.cols):
                yield r, c, img[r * b:(r + 1) * b, c * b:(c + 1) * b]

    return shape, blocks()


def block_view(img, block_size: int = DEFAULT_BLOCK) -> np.ndarray:
    """All blocks at once as a ``(rows, cols, b, b)`` view of the covered region."""
    img = np.asarray(img)
    shape = BlockGridShape.for_image(img.shape[0], img.shape[1], block_size)
    h, w = shape.covered
    b = block_size
    return img[:h, :w].reshape(shape.rows, b, shape.cols, b).swapaxes(1, 2)


def untile(blocks: np.ndarray) -> np.ndarray:
    """Inverse of :func:`block_view`."""
    rows, cols, b, _ = blocks.shape
    return blocks.swapaxes(1, 2).reshape(rows * b, cols * b)


def read_image(path) -> np.ndarray:
    """Read PNG / PGM / PPM (or anything Pillow decodes) as a gray image."""
    with Image.open(path) as im:
        if im.mode in ("L", "1", "P", "I", "I;16"):
            arr = np.asarray(im.convert("L"))
            return arr.copy()
        arr = np.asarray(im.convert("RGB"))
    return to_grayscale(arr)


def write_image(path, img) -> None:
    path = Path(path)
    arr = np.asarray(img)
    Image.fromarray(arr.astype(np.uint8)).save(path)
