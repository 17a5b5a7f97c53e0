"""Zero-shot classification and cross-modal retrieval on sparse codes.

Each planted class owns one dictionary atom; the class "prompt" is that atom
seen through the text side. Test images are classified by the prompt whose
sparse code has the highest cosine with theirs. Retrieval ranks all images
for each caption and reports mean reciprocal rank.
"""

import numpy as np

from mmsae.crossmodal_eval import retrieval_mrr, zero_shot_classify
from mmsae.synth_bench import SynthSpec, generate, split_model, zero_shot_task
from mmsae.training import TrainConfig, train

ds, truth = generate(SynthSpec(d=32, p_true=64, s=8, n_pairs=10_000, noise_sigma=0.05,
                               modality_offset_scale=3.0, n_classes=10, seed=1))
train_ds = ds.subset(np.arange(8000))
test_idx = np.arange(8000, 10_000)
task = zero_shot_task(ds, truth, test_idx)
queries = ds.side_b.subset(test_idx[:500])
corpus = ds.side_a.subset(test_idx[:500])
gt = np.arange(500)

common = dict(k=8, expansion=8, steps=1500, lr=1e-2, log_every=0)
models = {
    "SAE": train(train_ds, TrainConfig(variant="SAE", **common)).params,
    "MGSAE": train(train_ds, TrainConfig(variant="MGSAE", lambda_gs=0.05, p_mask=0.05, **common)).params,
    "split model": split_model(32, 256),
}
chance = np.bincount(task.labels).max() / task.labels.size
print(f"majority-class rate {chance:.3f}")
for name, params in models.items():
    acc = zero_shot_classify(params, task, 8)
    mrr = retrieval_mrr(params, queries, corpus, gt, 8)
    print(f"{name:12} zero-shot accuracy {acc:.3f}   caption->image MRR {mrr:.3f}")
# The split model scores every pair 0, so it always predicts class 0 and
# ranks the corpus in index order.
