"""Multimodal monosemanticity (MMS) and the dead-neuron census.

MMS asks whether the samples that activate a neuron, across two modalities,
look alike to an independent scoring encoder. Here the "scorer" is a random
rotation of the clean planted signal. We compare a trained MGSAE, the raw
embedding coordinates, and a deliberately modality-split model, for which
every cross-modal score is exactly zero.
"""

import numpy as np

from mmsae.metrics import dead_neuron_census, mms, mms_report, mms_report_dense
from mmsae.synth_bench import SynthSpec, generate, scorer_view, split_model
from mmsae.training import TrainConfig, train

# the definition on a hand-sized example: two image activations of equal
# weight, one text activation, scorer similarities 0.2 and 0.8
print("toy MMS:", mms([1.0, 1.0], [1.0], [[0.2], [0.8]]))

ds, truth = generate(SynthSpec(d=32, p_true=64, s=8, n_pairs=8000, noise_sigma=0.05,
                               modality_offset_scale=3.0, seed=2))
train_ds = ds.subset(np.arange(6000))
val_idx = np.arange(6000, 8000)
val = ds.subset(val_idx)
scorer = scorer_view(ds, truth, seed=3).subset(val_idx)

params = train(train_ds, TrainConfig(variant="MGSAE", k=8, expansion=8, steps=1500, lr=1e-2,
                                     lambda_gs=0.05, p_mask=0.05, log_every=0)).params
pair = ("image", "text")
learned = mms_report(params, val, scorer, 8, pair)
dense = mms_report_dense(val, scorer, pair)
split = mms_report(split_model(32, 256, seed=0), val, scorer, 8, pair)

for name, rep in (("MGSAE", learned), ("raw coordinates", dense), ("split model", split)):
    top = rep.sorted_scores()[:10]
    print(f"{name:16} mean {rep.scores.mean():.3f}  top-10 mean {top.mean():.3f}")

print("\ncensus of the trained model:", dead_neuron_census(params, val, 8).counts())
print("census of the split model:  ", dead_neuron_census(split_model(32, 256), val, 8).counts())
