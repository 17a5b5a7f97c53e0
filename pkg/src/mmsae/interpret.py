"""Concept naming, linear-probe decomposition and steering of sparse codes."""

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding_store import EmbeddingMatrix, load_embeddings
from .errors import ArgumentError, DataError, ShapeError
from .sae_model import SparseCode, decode


@dataclass(frozen=True)
class VocabBank:
    terms: tuple
    term_embeddings: EmbeddingMatrix

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if len(self.terms) != self.term_embeddings.n_samples:
            raise DataError(f"{len(self.terms)} terms but {self.term_embeddings.n_samples} embeddings")


@dataclass(frozen=True)
class ConceptNaming:
    term_index: np.ndarray
    similarity: np.ndarray
    terms: tuple

    def name(self, column):
        return self.terms[self.term_index[column]]

    def names(self):
        return [self.terms[i] for i in self.term_index]


@dataclass(frozen=True)
class ProbeEntry:
    neuron: int
    coefficient: float
    term: str | None


def load_vocab(terms_path, embeddings_path):
    """Vocabulary from a UTF-8 file (one term per line) and a matching MEB file."""
    terms = [line.rstrip("\n") for line in Path(terms_path).read_text(encoding="utf-8").splitlines()]
    terms = [t for t in terms if t]
    return VocabBank(terms, load_embeddings(embeddings_path, modality="text"))


def _unit_columns(w_dec):
    norms = np.linalg.norm(w_dec, axis=0)
    return w_dec / np.where(norms > 0, norms, 1.0)


def _dictionary(params):
    return params.w_dec if hasattr(params, "w_dec") else np.asarray(params, dtype=np.float64)


def name_concepts(params, vocab):
    """Label each dictionary column with the vocabulary term of highest cosine."""
    w = _dictionary(params)
    if vocab.term_embeddings.d != w.shape[0]:
        raise ShapeError(f"vocabulary has d={vocab.term_embeddings.d}, dictionary has d={w.shape[0]}")
    sims = vocab.term_embeddings.data @ _unit_columns(w)
    best = np.argmax(sims, axis=0)
    return ConceptNaming(best, sims[best, np.arange(w.shape[1])], vocab.terms)


def probe_coefficients(params, probe):
    """``alpha = W^T theta`` with unit-normalized dictionary columns."""
    w = _dictionary(params)
    probe = np.asarray(probe, dtype=np.float64).reshape(-1)
    if probe.shape[0] != w.shape[0]:
        raise ShapeError(f"probe has length {probe.shape[0]}, dictionary has d={w.shape[0]}")
    if not np.isfinite(probe).all():
        raise DataError("probe contains non-finite values")
    return _unit_columns(w).T @ probe


def probe_decompose(params, probe, top_m, naming=None):
    """The ``top_m`` dictionary concepts contributing most to a linear probe.

    Sorted by descending coefficient (ties: lowest neuron index); concept names
    are attached when ``naming`` is given.
    """
    alpha = probe_coefficients(params, probe)
    p = alpha.size
    if top_m > p:
        warnings.warn(f"top_m={top_m} exceeds p={p}; clipping", stacklevel=2)
        top_m = p
    order = np.argsort(-alpha, kind="stable")[:top_m]
    return [ProbeEntry(int(i), float(alpha[i]), naming.name(i) if naming is not None else None)
            for i in order]


def steer_code(z, neuron, delta):
    """Add ``delta`` to one coordinate of ``z``; negative results clamp to 0 (entry removed)."""
    if not 0 <= neuron < z.p:
        raise ArgumentError(f"neuron {neuron} out of range for p={z.p}")
    entries = dict(z.pairs())
    value = max(entries.get(neuron, 0.0) + delta, 0.0)
    if value > 0:
        entries[neuron] = value
    else:
        entries.pop(neuron, None)
    return SparseCode.from_pairs(entries.items(), z.p)


def steer(params, z, neuron, delta, side):
    """Decode ``z`` after intervening on one neuron (the code may exceed k nonzeros)."""
    return decode(params, steer_code(z, neuron, delta), side)
