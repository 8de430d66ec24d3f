"""
Training the glare net on a small synthetic set
===============================================

A scaled-down run of the three-phase schedule, scored with the
threshold sweep and compared with the naive-Bayes baseline.
Takes about three minutes on one core.
"""

import numpy as np

from docglare.data import FeatureCache, GlareTask, LabeledSample, TrainConfig, pages_to_samples, \
    run_schedule, scaled_schedule
from docglare.evaluate import sweep
from docglare.model import build_glare_net, nb_fit, nb_predict
from docglare.synth import synth_dataset

# full-size pages: on small frames the glare fills a large share of few blocks
# and the luminance-only baseline gets hard to beat
pages = synth_dataset(80, seed=21)
train, test = pages[:64], pages[64:]

# dataset 1 carries every glare box, dataset 2 only glare on the document
cfg = TrainConfig(seed=0)
cache = FeatureCache()
tasks = {1: GlareTask(pages_to_samples(train, "all"), cache, cfg),
         2: GlareTask(pages_to_samples(train, "document"), cache, cfg)}

model, log = run_schedule(scaled_schedule(100, 15, 15), build_glare_net(seed=0), tasks, cfg)
print("loss, first and last epoch:", round(log.losses[0], 3), round(log.losses[-1], 3))

held_out = GlareTask(pages_to_samples(test, "document"), cache, cfg)
heats, labels = zip(*(held_out.predict(model, i) for i in range(len(held_out))))
report = sweep(list(heats), list(labels))
print(report.to_table())

# baseline: Gaussian naive Bayes on the luminance statistics alone
def lum_and_labels(p):
    return cache.get(LabeledSample(p.image_id, p.image, p.boxes_for("document"), "document"), 1.0)

xs, ys = zip(*((fs.lum.reshape(-1, 5), lab.ravel()) for fs, lab in map(lum_and_labels, train)))
nb = nb_fit(np.concatenate(xs), np.concatenate(ys))
nb_report = sweep([nb_predict(nb, lum_and_labels(p)[0].lum) for p in test],
                  [lum_and_labels(p)[1] for p in test])
print(f"glare net best F {report.best_f:.3f}, naive Bayes best F {nb_report.best_f:.3f}")
