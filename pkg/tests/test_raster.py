import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from docglare.raster import (BlockGridShape, DimensionError, block_view, read_image,
                             rescale, tile, to_grayscale, untile, write_image)

import oracles


def test_grayscale_extremes():
    px = np.array([[[255, 255, 255], [0, 0, 0], [255, 0, 0]]], np.uint8)
    assert to_grayscale(px).tolist() == [[255, 0, 76]]


def test_grayscale_matches_exact_oracle_everywhere_on_a_lattice():
    vals = np.arange(0, 256, 5)
    r, g, b = np.meshgrid(vals, vals, vals, indexing="ij")
    rgb = np.stack([r, g, b], -1).reshape(-1, 1, 3).astype(np.uint8)
    got = to_grayscale(rgb).ravel()
    want = [oracles.luma(int(x), int(y), int(z)) for x, y, z in rgb.reshape(-1, 3)]
    assert got.tolist() == want


@given(arrays(np.uint8, (5, 7, 3)), st.randoms(use_true_random=False))
@settings(max_examples=50)
def test_grayscale_is_a_pixelwise_map(rgb, rnd):
    perm = list(range(35))
    rnd.shuffle(perm)
    perm = np.array(perm)
    shuffled = rgb.reshape(35, 3)[perm].reshape(5, 7, 3)
    back = np.empty(35, np.uint8)
    back[perm] = to_grayscale(shuffled).ravel()
    assert np.array_equal(back.reshape(5, 7), to_grayscale(rgb))


def test_grayscale_rejects_empty():
    with pytest.raises(DimensionError):
        to_grayscale(np.zeros((0, 4, 3), np.uint8))


def test_rescale_dims_and_identity():
    img = np.random.default_rng(0).integers(0, 256, (100, 100), dtype=np.uint8)
    assert np.array_equal(rescale(img, 1.0), img)
    assert rescale(img, 0.5).shape == (50, 50)
    assert rescale(img, 1.5).shape == (150, 150)
    assert rescale(np.zeros((33, 17), np.uint8), 0.3).shape == (10, 5)


@pytest.mark.parametrize("scale", [0.3, 0.47, 0.9, 1.2, 1.5])
def test_rescale_constant_stays_constant(scale):
    out = rescale(np.full((61, 90), 128, np.uint8), scale)
    assert (out == 128).all()


@pytest.mark.parametrize("scale", [0.29, 1.51, 2.0])
def test_rescale_range(scale):
    with pytest.raises(ValueError):
        rescale(np.zeros((10, 10), np.uint8), scale)


@given(arrays(np.uint8, st.tuples(st.integers(1, 30), st.integers(1, 30))))
@settings(max_examples=50)
def test_rescale_unit_scale_is_identity(img):
    assert np.array_equal(rescale(img, 1.0), img)


def test_rescale_bilinear_midpoint():
    img = np.array([[0, 100]], np.uint8).repeat(2, 0)
    # 3 output samples sit at source x = -1/6, 1/2, 7/6 (edges clamp)
    out = rescale(img, 1.5)
    assert out.shape == (3, 3)
    assert out[0].tolist() == [0, 50, 100]


def test_tile_grids():
    shape, it = tile(np.zeros((128, 128), np.uint8), 64)
    assert (shape.rows, shape.cols) == (2, 2)
    assert len(list(it)) == 4
    shape, it = tile(np.zeros((2160, 3840), np.uint8), 64)
    assert (shape.rows, shape.cols) == (33, 60)
    assert sum(1 for _ in it) == 33 * 60
    shape, it = tile(np.zeros((100, 100), np.uint8), 64)
    assert (shape.rows, shape.cols) == (1, 1)
    assert shape.covered == (64, 64)


def test_tile_row_major_order():
    img = np.arange(4).reshape(2, 2).repeat(8, 0).repeat(8, 1).astype(np.uint8)
    _, it = tile(img, 8)
    assert [(r, c, int(b[0, 0])) for r, c, b in it] == [(0, 0, 0), (0, 1, 1), (1, 0, 2), (1, 1, 3)]


def test_tile_errors():
    with pytest.raises(DimensionError):
        tile(np.zeros((63, 200), np.uint8), 64)
    with pytest.raises(DimensionError):
        BlockGridShape.for_image(100, 100, 4)


@given(arrays(np.uint8, st.tuples(st.integers(8, 40), st.integers(8, 40))))
@settings(max_examples=50)
def test_tile_reassembles_covered_region(img):
    shape, it = tile(img, 8)
    out = np.zeros(shape.covered, np.uint8)
    for r, c, blk in it:
        out[r * 8:(r + 1) * 8, c * 8:(c + 1) * 8] = blk
    h, w = shape.covered
    assert np.array_equal(out, img[:h, :w])
    assert np.array_equal(untile(block_view(img, 8)), img[:h, :w])


@pytest.mark.parametrize("ext", ["png", "pgm", "ppm"])
def test_image_io_roundtrip(tmp_path, ext):
    rng = np.random.default_rng(1)
    if ext == "ppm":
        rgb = rng.integers(0, 256, (20, 30, 3), dtype=np.uint8)
        write_image(tmp_path / f"a.{ext}", rgb)
        assert np.array_equal(read_image(tmp_path / f"a.{ext}"), to_grayscale(rgb))
    else:
        g = rng.integers(0, 256, (20, 30), dtype=np.uint8)
        write_image(tmp_path / f"a.{ext}", g)
        assert np.array_equal(read_image(tmp_path / f"a.{ext}"), g)
