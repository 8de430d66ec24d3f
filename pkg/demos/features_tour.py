"""
From a photographed page to a block feature stack
=================================================

Render one synthetic page, binarize it, and look at what the blocks
under the glare look like next to ordinary text blocks.
"""

from docglare.features import assemble_feature_stack, binarize
from docglare.labels import rasterize_labels
from docglare.raster import BlockGridShape
from docglare.synth import synth_dataset

# one full-size page with its glare boxes
page = synth_dataset(1, seed=4)[0]
print(page.image.shape, page.layout, f"glare covers {100 * page.glare_area:.1f}% of the frame")

# Sauvola binarization; glare bleaches strokes, so white dominates there
binary = binarize(page.image)
print("white fraction:", binary.mean().round(3))

# the stack: five luminance statistics plus four run-length histograms per block
fs = assemble_feature_stack(page.image)
print("grid", fs.rows, "x", fs.cols)
labels = rasterize_labels(page.boxes, BlockGridShape(fs.rows, fs.cols, 64))

glare, clean = labels == 1, labels == 0
names = ["min", "max", "range", "mean", "std"]
for i, name in enumerate(names):
    print(f"{name:>5}  glare {fs.lum[..., i][glare].mean():6.1f}   other {fs.lum[..., i][clean].mean():6.1f}")

# long white runs are the signature of bleached text; a run cannot exceed
# the 64-px block, so bin 6 (33-64 px) is the longest one that fills up
long_runs = fs.white_h[..., 6]
print("share of white runs 33-64 px long:",
      long_runs[glare].mean().round(3), "vs", long_runs[clean].mean().round(3))
