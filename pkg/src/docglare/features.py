"""Block luminance statistics, Sauvola binarization and stroke histograms.

Every image becomes a :class:`FeatureStack` of five grid-aligned tensors:
one with five luminance statistics per block and four run-length
histograms (black/white runs, horizontal/vertical).
"""
from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .raster import DEFAULT_BLOCK, BlockGridShape, as_gray

DEFAULT_BINS = 8
SAUVOLA_WINDOW = 31
SAUVOLA_K = 0.2
SAUVOLA_R = 128.0

LUM_FIELDS = ("min", "max", "dynamic_range", "mean", "std_dev")
HIST_NAMES = ("black_h", "black_v", "white_h", "white_v")
TENSOR_NAMES = ("lum",) + HIST_NAMES

GLFS_MAGIC = b"GLFS"
GLFS_VERSION = 1

# rows of pixels handed to one binarization task
_STRIP = 256


class FormatError(ValueError):
    """Malformed or incompatible serialized data."""


def default_workers() -> int:
    env = os.environ.get("GLARE_NUM_WORKERS")
    if env:
        return max(1, int(env))
    return 1


# --------------------------------------------------------------------------
# luminance

def luminance_features(block) -> np.ndarray:
    """``[min, max, max - min, mean, population std]`` of one block."""
    a = np.asarray(block, dtype=np.int64).ravel()
    n = a.size
    s, s2 = int(a.sum()), int((a * a).sum())
    var = (n * s2 - s * s) / (n * n)
    return np.array([a.min(), a.max(), a.max() - a.min(), s / n, np.sqrt(var)])


def luminance_grid(gray, block_size: int = DEFAULT_BLOCK) -> np.ndarray:
    """Per-block :func:`luminance_features` for a whole image, shape (rows, cols, 5)."""
    return block_features(gray, None, block_size)[0]


# --------------------------------------------------------------------------
# binarization

@njit(cache=True, nogil=True)
def _sauvola_band(padded, img, r0, r1, window, k, R, out):
    # padded carries a window//2 halo; writes rows r0:r1 of img into out
    width = img.shape[1]
    n = window * window
    col = np.zeros(padded.shape[1], np.int64)
    col2 = np.zeros(padded.shape[1], np.int64)
    for i in range(r0, r0 + window):
        for j in range(padded.shape[1]):
            v = np.int64(padded[i, j])
            col[j] += v
            col2[j] += v * v
    for i in range(r0, r1):
        if i > r0:
            for j in range(padded.shape[1]):
                a = np.int64(padded[i + window - 1, j])
                b = np.int64(padded[i - 1, j])
                col[j] += a - b
                col2[j] += a * a - b * b
        s = np.int64(0)
        s2 = np.int64(0)
        for j in range(window):
            s += col[j]
            s2 += col2[j]
        for j in range(width):
            if j > 0:
                s += col[j + window - 1] - col[j - 1]
                s2 += col2[j + window - 1] - col2[j - 1]
            mean = s / n
            std = np.sqrt(np.float64(n * s2 - s * s)) / n
            thresh = mean * (1.0 + k * (std / R - 1.0))
            out[i - r0, j] = 1 if img[i, j] > thresh else 0


def binarize(img, window: int = SAUVOLA_WINDOW, k: float = SAUVOLA_K, R: float = SAUVOLA_R,
             workers: int = 1) -> np.ndarray:
    """Sauvola thresholding; returns 1 for white (luma > threshold), 0 for black.

    Window sums are exact integer running sums over a symmetrically padded
    image, so results do not depend on how rows are split across workers.
    """
    img = as_gray(img)
    if window % 2 == 0 or window < 1:
        raise ValueError("window must be a positive odd number")
    padded = np.pad(img, window // 2, mode="symmetric")
    h = img.shape[0]
    spans = [(a, min(a + _STRIP, h)) for a in range(0, h, _STRIP)]
    out = np.empty(img.shape, np.uint8)

    def run(span):
        a, b = span
        _sauvola_band(padded, img, a, b, window, float(k), float(R), out[a:b])

    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(run, spans))
    else:
        for span in spans:
            run(span)
    return out


# --------------------------------------------------------------------------
# stroke histograms

def run_length_bin(length, bins: int = DEFAULT_BINS):
    """Logarithmic bin index: 1, 2, 3-4, 5-8, ... with the last bin open-ended."""
    length = np.asarray(length)
    idx = np.ceil(np.log2(np.maximum(length, 1))).astype(np.int64)
    return np.minimum(idx, bins - 1)


def _segment_counts(segs: np.ndarray, per_block: int, bins: int) -> np.ndarray:
    """Run counts per (block, color, bin) for rows of ``segs`` (N, L).

    Consecutive groups of ``per_block`` rows belong to one block.
    """
    n, length = segs.shape
    starts = np.empty((n, length), bool)
    starts[:, 0] = True
    np.not_equal(segs[:, 1:], segs[:, :-1], out=starts[:, 1:])
    idx = np.flatnonzero(starts)
    lengths = np.diff(np.append(idx, n * length))
    lut = run_length_bin(np.arange(length + 1), bins)
    color = segs.ravel()[idx].astype(np.int64)
    block = idx // (length * per_block)
    nblocks = n // per_block
    key = (block * 2 + color) * bins + lut[lengths]
    return np.bincount(key, minlength=nblocks * 2 * bins).reshape(nblocks, 2, bins)


def _normalize(counts: np.ndarray) -> np.ndarray:
    tot = counts.sum(axis=-1, keepdims=True)
    return np.divide(counts, tot, out=np.zeros(counts.shape), where=tot > 0)


def run_length_histograms(block, bins: int = DEFAULT_BINS) -> dict[str, np.ndarray]:
    """Normalized black/white, horizontal/vertical run-length histograms of one block.

    Runs stop at the block border.  A histogram with no runs stays all-zero.
    """
    b = np.asarray(block).astype(np.uint8)
    if b.ndim != 2:
        raise ValueError("block must be 2-D")
    horiz = _normalize(_segment_counts(b, b.shape[0], bins))[0]
    vert = _normalize(_segment_counts(np.ascontiguousarray(b.T), b.shape[1], bins))[0]
    return {"black_h": horiz[0], "black_v": vert[0],
            "white_h": horiz[1], "white_v": vert[1]}


@njit(cache=True, nogil=True)
def _block_kernel(gray, binary, bs, lut, lum, counts):
    # lum: (rows, cols, 5) float; counts: (rows, cols, 2 orient, 2 color, bins) int64
    rows, cols = lum.shape[0], lum.shape[1]
    n = bs * bs
    width = cols * bs
    vlen = np.zeros(width, np.int64)
    vcol = np.zeros(width, np.uint8)
    for r in range(rows):
        for c in range(cols):
            lo, hi = 255, 0
            s = np.int64(0)
            s2 = np.int64(0)
            for y in range(r * bs, (r + 1) * bs):
                for x in range(c * bs, (c + 1) * bs):
                    v = np.int64(gray[y, x])
                    lo = min(lo, v)
                    hi = max(hi, v)
                    s += v
                    s2 += v * v
            lum[r, c, 0] = lo
            lum[r, c, 1] = hi
            lum[r, c, 2] = hi - lo
            lum[r, c, 3] = s / n
            lum[r, c, 4] = np.sqrt(np.float64(n * s2 - s * s) / (n * n))
        if binary.shape[0] == 0:
            continue
        for y in range(r * bs, (r + 1) * bs):
            first = y == r * bs
            for c in range(cols):
                run = 0
                prev = binary[y, c * bs]
                for x in range(c * bs, (c + 1) * bs):
                    p = binary[y, x]
                    # horizontal runs restart at every block column
                    if p == prev:
                        run += 1
                    else:
                        counts[r, c, 0, prev, lut[run]] += 1
                        prev = p
                        run = 1
                    # vertical runs are tracked per pixel column
                    if first:
                        vlen[x] = 1
                        vcol[x] = p
                    elif p == vcol[x]:
                        vlen[x] += 1
                    else:
                        counts[r, c, 1, vcol[x], lut[vlen[x]]] += 1
                        vcol[x] = p
                        vlen[x] = 1
                counts[r, c, 0, prev, lut[run]] += 1
        for x in range(width):
            counts[r, x // bs, 1, vcol[x], lut[vlen[x]]] += 1


def block_features(gray, binary, block_size: int = DEFAULT_BLOCK, bins: int = DEFAULT_BINS):
    """Luminance statistics and raw run counts for every block in one pass.

    Returns ``(lum, counts)`` with ``counts`` shaped (rows, cols, orientation,
    color, bins); orientation 0 is horizontal, color 0 is black.  ``binary``
    may be None to skip run counting.
    """
    gray = as_gray(gray)
    shape = BlockGridShape.for_image(gray.shape[0], gray.shape[1], block_size)
    if binary is None:
        binary = np.zeros((0, 0), np.uint8)
    else:
        binary = np.asarray(binary, np.uint8)
        if binary.shape != gray.shape:
            raise ValueError("binary and gray images differ in shape")
    lut = run_length_bin(np.arange(block_size + 1), bins)
    lum = np.empty((shape.rows, shape.cols, 5), np.float64)
    counts = np.zeros((shape.rows, shape.cols, 2, 2, bins), np.int64)
    _block_kernel(gray, binary, block_size, lut, lum, counts)
    return lum, counts


def histogram_grid(binary, block_size: int = DEFAULT_BLOCK,
                   bins: int = DEFAULT_BINS) -> dict[str, np.ndarray]:
    """Per-block :func:`run_length_histograms` for a whole binary image."""
    binary = np.asarray(binary, np.uint8)
    hist = _normalize(block_features(binary, binary, block_size, bins)[1])
    return {"black_h": hist[:, :, 0, 0], "black_v": hist[:, :, 1, 0],
            "white_h": hist[:, :, 0, 1], "white_v": hist[:, :, 1, 1]}


# --------------------------------------------------------------------------
# feature stack

@dataclass
class FeatureStack:
    lum: np.ndarray
    black_h: np.ndarray
    black_v: np.ndarray
    white_h: np.ndarray
    white_v: np.ndarray
    block_size: int = field(default=DEFAULT_BLOCK, compare=False)

    def __post_init__(self):
        grids = {t.shape[:2] for t in self.tensors()}
        if len(grids) != 1:
            raise ValueError(f"feature tensors disagree on grid shape: {grids}")
        if self.lum.shape[2] != 5:
            raise ValueError("luminance tensor must have 5 channels")
        if len({t.shape[2] for t in self.tensors()[1:]}) != 1:
            raise ValueError("histogram tensors must share the bin count")

    @property
    def rows(self) -> int:
        return self.lum.shape[0]

    @property
    def cols(self) -> int:
        return self.lum.shape[1]

    @property
    def bins(self) -> int:
        return self.black_h.shape[2]

    def tensors(self) -> list[np.ndarray]:
        return [self.lum, self.black_h, self.black_v, self.white_h, self.white_v]

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(zip(TENSOR_NAMES, self.tensors()))

    def crop(self, r0: int, c0: int, h: int, w: int) -> "FeatureStack":
        return FeatureStack(*(t[r0:r0 + h, c0:c0 + w] for t in self.tensors()),
                            block_size=self.block_size)

    def save(self, path) -> None:
        header = GLFS_MAGIC + struct.pack("<4I", GLFS_VERSION, self.rows, self.cols, self.bins)
        body = b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for t in self.tensors())
        _atomic_write(path, header + body)

    @classmethod
    def load(cls, path, block_size: int = DEFAULT_BLOCK) -> "FeatureStack":
        data = Path(path).read_bytes()
        if len(data) < 20 or data[:4] != GLFS_MAGIC:
            raise FormatError(f"{path}: not a GLFS feature file")
        version, rows, cols, bins = struct.unpack("<4I", data[4:20])
        if version != GLFS_VERSION:
            raise FormatError(f"{path}: unsupported GLFS version {version}")
        sizes = [rows * cols * 5] + [rows * cols * bins] * 4
        if len(data) != 20 + 4 * sum(sizes):
            raise FormatError(f"{path}: truncated or oversized GLFS payload")
        out, off = [], 20
        for n, ch in zip(sizes, [5] + [bins] * 4):
            out.append(np.frombuffer(data, "<f4", n, off).reshape(rows, cols, ch).astype(np.float32))
            off += 4 * n
        return cls(*out, block_size=block_size)


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def assemble_feature_stack(img, block_size: int = DEFAULT_BLOCK, bins: int = DEFAULT_BINS,
                           workers: int | None = None) -> FeatureStack:
    """Binarize the whole image once, then collect per-block features.

    With ``workers > 1`` the image is processed in horizontal bands of block
    rows on a thread pool; results are identical to the serial path.
    """
    img = as_gray(img)
    shape = BlockGridShape.for_image(img.shape[0], img.shape[1], block_size)
    workers = default_workers() if workers is None else workers
    padded = np.pad(img, SAUVOLA_WINDOW // 2, mode="symmetric")
    band = max(1, _STRIP // block_size)
    spans = [(a, min(a + band, shape.rows)) for a in range(0, shape.rows, band)]
    lut = run_length_bin(np.arange(block_size + 1), bins)
    counts = np.zeros((shape.rows, shape.cols, 2, 2, bins), np.int64)
    lum64 = np.empty((shape.rows, shape.cols, 5), np.float64)

    def run(span):
        a, b = span
        p0, p1 = a * block_size, b * block_size
        binary = np.empty((p1 - p0, img.shape[1]), np.uint8)
        _sauvola_band(padded, img, p0, p1, SAUVOLA_WINDOW, SAUVOLA_K, SAUVOLA_R, binary)
        _block_kernel(img[p0:p1], binary, block_size, lut, lum64[a:b], counts[a:b])

    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(run, spans))
    else:
        for span in spans:
            run(span)
    hist = _normalize(counts).astype(np.float32)
    return FeatureStack(lum64.astype(np.float32), hist[:, :, 0, 0], hist[:, :, 1, 0],
                        hist[:, :, 0, 1], hist[:, :, 1, 1], block_size=block_size)
