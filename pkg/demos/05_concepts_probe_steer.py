"""Naming neurons, decomposing a linear probe, and steering a code.

Concept names come from the vocabulary embedding closest to each dictionary
atom. A linear probe on embeddings is rewritten as a weighted sum over atoms,
so its top contributors can be read off by name. Steering adds to one
neuron's activation and decodes the result.
"""

import numpy as np

from mmsae.embedding_store import EmbeddingMatrix, normalize_rows
from mmsae.interpret import VocabBank, name_concepts, probe_decompose, steer
from mmsae.sae_model import encode
from mmsae.synth_bench import SynthSpec, atom_recovery_score, generate
from mmsae.training import TrainConfig, train

ds, truth = generate(SynthSpec(d=32, p_true=64, s=4, n_pairs=8000, noise_sigma=0.02, seed=5))
params = train(ds, TrainConfig(variant="MGSAE", k=8, expansion=4, steps=1500, lr=3e-3,
                               lambda_gs=0.05, p_mask=0.1, log_every=0)).params
score = atom_recovery_score(params.w_dec, truth)
print(f"planted atoms recovered: mean best |cos| {score.mean_max_cosine:.3f}")

# vocabulary: one "word" per planted atom, embedded as the atom itself
terms = [f"concept_{i:02d}" for i in range(64)]
vocab = VocabBank(terms, EmbeddingMatrix(normalize_rows(truth.dictionary.T), "text"))
naming = name_concepts(params, vocab)
print("first neurons:", ", ".join(f"{j}:{naming.name(j)}({naming.similarity[j]:.2f})" for j in range(5)))

# a probe that detects concepts 3 and 17
probe = truth.dictionary[:, 3] + 0.5 * truth.dictionary[:, 17]
for entry in probe_decompose(params, probe, 4, naming):
    print(f"  neuron {entry.neuron:3d}  coefficient {entry.coefficient:+.3f}  {entry.term}")

x = ds.side_a.data[0]
z = encode(params, x, "a", 8)
target = int(np.argmax(naming.similarity))
before = float(naming.similarity[target])
pushed = steer(params, z, target, 2.0, "a")
atom = params.w_dec[:, target] / np.linalg.norm(params.w_dec[:, target])
print(f"\nsteering neuron {target} ({naming.name(target)}, match {before:.2f}):")
print(f"  cosine with its atom before {x @ atom:+.3f}, after {pushed @ atom / np.linalg.norm(pushed):+.3f}")
