"""Per-modality dead-neuron census and the multimodal monosemanticity score.

MMS for one neuron and modality pair (m, n): take the nonzero activations of
the neuron on validation samples of each modality, weight every cross pair
``(i, j)`` by ``|a_m[i] * a_n[j]|`` normalized to sum to one, and average the
cosine similarities of those samples under a separate scoring encoder. When
``m == n`` the self-pairs ``i == j`` are left out; a neuron with no
co-activations scores 0.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli_w

from .errors import ArgumentError, ShapeError
from .sae_model import encode_dense


@dataclass(frozen=True)
class DeadNeuronReport:
    only_a: int
    only_b: int
    both: int
    neither: int
    per_neuron: np.ndarray  # (p, 2) bool: active for side a, active for side b
    modalities: tuple = ("a", "b")

    @property
    def p(self):
        return self.per_neuron.shape[0]

    def counts(self):
        return {"only_a": self.only_a, "only_b": self.only_b,
                "both": self.both, "neither": self.neither}


@dataclass(frozen=True)
class MmsReport:
    scores: np.ndarray
    modality_pair: tuple
    coactivation_counts: np.ndarray

    def sorted_scores(self):
        """Scores in descending order, as plotted per neuron."""
        return np.sort(self.scores)[::-1]


def encode_side(params, emb, side, k, chunk=4096):
    """Evaluation-time (unmasked) dense codes for every row of ``emb``."""
    data = emb.data if hasattr(emb, "data") else np.asarray(emb)
    return np.concatenate([encode_dense(params, data[i:i + chunk], side, k)
                           for i in range(0, data.shape[0], chunk)])


def dead_neuron_census(params, val_ds, k):
    """Bucket neurons by which modalities activate them at least once.

    ``val_ds`` should be disjoint from the training data; that is the
    caller's responsibility.
    """
    act_a = (encode_side(params, val_ds.side_a, "a", k) > 0).any(axis=0)
    act_b = (encode_side(params, val_ds.side_b, "b", k) > 0).any(axis=0)
    return DeadNeuronReport(
        only_a=int((act_a & ~act_b).sum()),
        only_b=int((~act_a & act_b).sum()),
        both=int((act_a & act_b).sum()),
        neither=int((~act_a & ~act_b).sum()),
        per_neuron=np.stack([act_a, act_b], axis=1),
        modalities=val_ds.modalities,
    )


def mms(activations_m, activations_n, sim, same_modality=False):
    """Multimodal monosemanticity of one neuron.

    ``sim`` is the (M, N) cosine-similarity matrix of the activating samples.
    With ``same_modality`` the two sample lists are the same samples in the
    same order and the diagonal of the co-activation matrix is zeroed.
    """
    a_m = np.asarray(activations_m, dtype=np.float64).reshape(-1)
    a_n = np.asarray(activations_n, dtype=np.float64).reshape(-1)
    sim = np.asarray(sim, dtype=np.float64)
    if a_m.size == 0 or a_n.size == 0:
        if sim.size:
            raise ShapeError(f"similarity matrix has shape {sim.shape} but a side has no activations")
        return 0.0
    if sim.shape != (a_m.size, a_n.size):
        raise ShapeError(f"similarity matrix has shape {sim.shape}, expected {(a_m.size, a_n.size)}")
    coact = np.abs(np.outer(a_m, a_n))
    if same_modality:
        if a_m.size != a_n.size:
            raise ShapeError("same-modality MMS needs identical sample lists")
        np.fill_diagonal(coact, 0.0)
    total = coact.sum()
    if total == 0:
        return 0.0
    return float((coact / total * sim).sum())


def _coactivation_score(w_m, e_m, w_n, e_n, same):
    # sum_ij |a_i a_j| S_ij / sum_ij |a_i a_j| without materializing A
    if w_m.size == 0 or w_n.size == 0:
        return 0.0, 0
    num = w_m @ (e_m @ e_n.T) @ w_n
    den = w_m.sum() * w_n.sum()
    count = w_m.size * w_n.size
    if same:
        diag = w_m * w_n
        num -= (diag * np.einsum("ij,ij->i", e_m, e_n)).sum()
        den -= diag.sum()
        count -= w_m.size
    return (float(num / den) if den > 0 else 0.0), count


def mms_from_activations(acts_m, acts_n, scorer_m, scorer_n, pair):
    """MMS per neuron given dense activations (samples x neurons) for each modality.

    ``scorer_m`` / ``scorer_n`` are unit-norm scorer embeddings row-aligned
    with ``acts_m`` / ``acts_n``.
    """
    same = pair[0] == pair[1]
    p = acts_m.shape[1]
    scores = np.zeros(p)
    counts = np.zeros(p, dtype=np.int64)
    for j in range(p):
        rows_m = np.flatnonzero(acts_m[:, j])
        rows_n = rows_m if same else np.flatnonzero(acts_n[:, j])
        w_m = np.abs(acts_m[rows_m, j])
        w_n = np.abs(acts_n[rows_n, j])
        scores[j], counts[j] = _coactivation_score(w_m, scorer_m[rows_m], w_n, scorer_n[rows_n], same)
    return MmsReport(scores, tuple(pair), counts)


def _resolve_pair(val_ds, pair):
    sides = []
    for m in pair:
        if m == val_ds.side_a.modality or m in ("a", "A"):
            sides.append("a")
        elif m == val_ds.side_b.modality or m in ("b", "B"):
            sides.append("b")
        else:
            raise ArgumentError(f"modality {m!r} not in dataset {val_ds.modalities}")
    return sides


def mms_report(params, val_ds, scorer_ds, k, pair):
    """Per-neuron MMS for modality pair ``pair`` (labels or ``"a"``/``"b"``).

    ``scorer_ds`` holds embeddings of the same samples, row for row, from a
    different encoder; only the row count can be checked.
    """
    if scorer_ds.n_pairs != val_ds.n_pairs:
        raise ShapeError(f"scorer has {scorer_ds.n_pairs} rows, validation set has {val_ds.n_pairs}")
    sm, sn = _resolve_pair(val_ds, pair)
    codes = {s: encode_side(params, val_ds.side(s), s, k) for s in set((sm, sn))}
    return mms_from_activations(codes[sm], codes[sn], scorer_ds.side(sm).data,
                                scorer_ds.side(sn).data, (val_ds.side(sm).modality,
                                                          val_ds.side(sn).modality))


def mms_report_dense(val_ds, scorer_ds, pair):
    """'No SAE' baseline: raw embedding coordinates act as neurons (absolute values)."""
    if scorer_ds.n_pairs != val_ds.n_pairs:
        raise ShapeError(f"scorer has {scorer_ds.n_pairs} rows, validation set has {val_ds.n_pairs}")
    sm, sn = _resolve_pair(val_ds, pair)
    return mms_from_activations(np.abs(val_ds.side(sm).data), np.abs(val_ds.side(sn).data),
                                scorer_ds.side(sm).data, scorer_ds.side(sn).data,
                                (val_ds.side(sm).modality, val_ds.side(sn).modality))


def write_dead_report(path, report, fmt="toml"):
    path = Path(path)
    if fmt == "toml":
        doc = {"modalities": list(report.modalities), "p": report.p, **report.counts()}
        path.write_text(tomli_w.dumps(doc), encoding="utf-8")
    elif fmt == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["neuron", "active_a", "active_b"])
            for i, (a, b) in enumerate(report.per_neuron):
                w.writerow([i, int(a), int(b)])
    else:
        raise ArgumentError(f"unknown report format {fmt!r}")


def write_mms_report(path, report, fmt="toml"):
    path = Path(path)
    if fmt == "toml":
        doc = {"modality_pair": list(report.modality_pair),
               "mean": float(report.scores.mean()) if report.scores.size else 0.0,
               "scores": report.scores.tolist(),
               "coactivation_counts": report.coactivation_counts.tolist()}
        path.write_text(tomli_w.dumps(doc), encoding="utf-8")
    elif fmt == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["neuron", "mms", "coactivations"])
            for i, (s, c) in enumerate(zip(report.scores, report.coactivation_counts)):
                w.writerow([i, repr(float(s)), int(c)])
    else:
        raise ArgumentError(f"unknown report format {fmt!r}")
