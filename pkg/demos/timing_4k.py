"""
How fast is the pipeline on a 4K frame?
=======================================

Median timings of feature extraction and the glare net forward pass,
next to a single forward pass of the U-Net on the raw gray image.
"""

import os
import time

from docglare.evaluate import bench
from docglare.features import assemble_feature_stack
from docglare.model import build_glare_net, build_unet, glare_forward, unet_forward
from docglare.synth import SynthProfile, synth_dataset

img = synth_dataset(1, seed=5, profile=SynthProfile(width=3840, height=2160))[0].image
net = build_glare_net(seed=0)
print("glare net parameters:", net.param_count())

for workers in sorted({1, os.cpu_count() or 1}):
    res = bench(lambda g: assemble_feature_stack(g, workers=workers),
                lambda fs: glare_forward(net, fs), img, repeats=5)
    print(f"{workers} worker(s): features {res.feature_ms:.0f} ms, forward {res.forward_ms:.0f} ms, "
          f"total {res.total_ms:.0f} ms")

# the U-Net sees pixels rather than block features; crop to a multiple of 32
unet = build_unet(seed=0)
t = time.perf_counter()
prob = unet_forward(unet, img[:2144])
print(f"U-Net: {(time.perf_counter() - t) * 1e3:.0f} ms for a {prob.shape} output map "
      f"({unet.param_count()} parameters)")
