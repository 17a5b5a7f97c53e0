"""Zero-shot classification, retrieval and pair alignment measured on sparse codes.

All similarities are cosines between nonnegative codes, so they lie in
[0, 1]; an empty code has similarity 0 with everything. Ties always go to the
lowest index.

Task manifests are TOML::

    [classes]            # zero-shot: one prompt embedding per class
    path = "prompts.meb"
    modality = "text"
    [test]
    path = "images.meb"
    modality = "image"
    [labels]
    path = "labels.lbl"

Retrieval manifests use ``[queries]``, ``[corpus]`` and ``[ground_truth]``
instead. Label files (``LBL1``): magic | u32 version (= 1) | u32 n | n u32
values, little-endian.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli

from .embedding_store import EmbeddingMatrix, load_embeddings
from .errors import ArgumentError, FormatError, ManifestError, ShapeError
from .metrics import encode_side

LBL_MAGIC = b"LBL1"


@dataclass(frozen=True)
class ZeroShotTask:
    class_embeddings: EmbeddingMatrix
    test_embeddings: EmbeddingMatrix
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.size != self.test_embeddings.n_samples:
            raise ShapeError(f"{labels.size} labels for {self.test_embeddings.n_samples} test samples")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ArgumentError(f"labels must lie in [0, {self.n_classes})")
        if self.class_embeddings.modality == self.test_embeddings.modality:
            raise ArgumentError("class prompts and test samples must come from different modalities")
        object.__setattr__(self, "labels", labels)

    @property
    def n_classes(self):
        return self.class_embeddings.n_samples


@dataclass(frozen=True)
class AlignmentReport:
    mean_cosine: float
    mean_support_overlap: float


def sparse_cosine(z, w):
    """Cosine similarity of two :class:`SparseCode`; 0 if either is empty."""
    if z.p != w.p:
        raise ShapeError(f"codes have different lengths {z.p} and {w.p}")
    if len(z) == 0 or len(w) == 0:
        return 0.0
    common, iz, iw = np.intersect1d(z.indices, w.indices, assume_unique=True, return_indices=True)
    dot = float(z.values[iz] @ w.values[iw]) if common.size else 0.0
    den = float(np.linalg.norm(z.values) * np.linalg.norm(w.values))
    return dot / den if den > 0 else 0.0


def cosine_matrix(za, zb):
    """Pairwise cosines between rows of dense code matrices; empty rows give 0."""
    na = np.linalg.norm(za, axis=1)
    nb = np.linalg.norm(zb, axis=1)
    ua = za / np.where(na > 0, na, 1.0)[:, None]
    ub = zb / np.where(nb > 0, nb, 1.0)[:, None]
    return ua @ ub.T


def _sides(first, second, modalities, default):
    if modalities is None:
        return default
    modalities = tuple(modalities)
    if first not in modalities or second not in modalities:
        raise ArgumentError(f"modalities {first!r}/{second!r} not in {modalities}")
    return ("a" if first == modalities[0] else "b",
            "a" if second == modalities[0] else "b")


def zero_shot_predict(params, task, k, modalities=None):
    """Predicted class per test sample.

    ``modalities`` is the (side_a, side_b) labelling the model was trained
    with; by default test samples use side ``a`` and prompts side ``b``.
    """
    test_side, class_side = _sides(task.test_embeddings.modality,
                                   task.class_embeddings.modality, modalities, ("a", "b"))
    zt = encode_side(params, task.test_embeddings, test_side, k)
    zc = encode_side(params, task.class_embeddings, class_side, k)
    return np.argmax(cosine_matrix(zt, zc), axis=1)


def zero_shot_classify(params, task, k, modalities=None):
    """Fraction of test samples whose most similar class prompt is the true class."""
    if task.labels.size == 0 or task.n_classes == 0:
        raise ArgumentError("empty zero-shot task")
    pred = zero_shot_predict(params, task, k, modalities)
    return float((pred == task.labels).mean())


def reciprocal_ranks(scores, ground_truth):
    """1/rank of each query's target; ``scores`` is (queries, corpus).

    An item outranks the target if its score is higher, or equal with a lower
    corpus index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.int64).reshape(-1)
    if gt.size != scores.shape[0]:
        raise ShapeError(f"{gt.size} targets for {scores.shape[0]} queries")
    if gt.size and (gt.min() < 0 or gt.max() >= scores.shape[1]):
        raise ArgumentError(f"ground-truth index out of range for corpus of {scores.shape[1]}")
    target = scores[np.arange(gt.size), gt][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    ahead = (scores > target) | ((scores == target) & (cols < gt[:, None]))
    return 1.0 / (1.0 + ahead.sum(axis=1))


def mean_reciprocal_rank(scores, ground_truth):
    return float(reciprocal_ranks(scores, ground_truth).mean())


def retrieval_mrr(params, queries, corpus, ground_truth, k, modalities=None):
    """Rank the corpus by sparse-code cosine for every query; mean of 1/rank.

    Without ``modalities``, queries are encoded as side ``b`` (text) and the
    corpus as side ``a``.
    """
    if queries.modality == corpus.modality:
        raise ArgumentError("queries and corpus must be different modalities")
    q_side, c_side = _sides(queries.modality, corpus.modality, modalities, ("b", "a"))
    zq = encode_side(params, queries, q_side, k)
    zc = encode_side(params, corpus, c_side, k)
    return mean_reciprocal_rank(cosine_matrix(zq, zc), ground_truth)


def alignment_report(params, val_ds, k):
    za = encode_side(params, val_ds.side_a, "a", k)
    zb = encode_side(params, val_ds.side_b, "b", k)
    na, nb = np.linalg.norm(za, axis=1), np.linalg.norm(zb, axis=1)
    dots = np.einsum("ij,ij->i", za, zb)
    cos = np.where((na > 0) & (nb > 0), dots / np.where(na * nb > 0, na * nb, 1.0), 0.0)
    overlap = ((za > 0) & (zb > 0)).sum(axis=1) / k
    return AlignmentReport(float(cos.mean()), float(overlap.mean()))


def read_labels(path):
    blob = Path(path).read_bytes()
    if blob[:4] != LBL_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported label version {version}")
    if len(blob) != 12 + 4 * n:
        raise FormatError(f"{path}: expected {n} labels")
    return np.frombuffer(blob, dtype="<u4", offset=12).astype(np.int64)


def write_labels(path, labels):
    labels = np.asarray(labels, dtype="<u4").reshape(-1)
    Path(path).write_bytes(LBL_MAGIC + struct.pack("<II", 1, labels.size) + labels.tobytes())


def _section(doc, name, path, need_modality=True):
    entry = doc.get(name)
    keys = ("path", "modality") if need_modality else ("path",)
    if not isinstance(entry, dict) or any(key not in entry for key in keys):
        raise ManifestError(f"{path}: [{name}] needs {', '.join(keys)}")
    return Path(path).parent / entry["path"], entry.get("modality")


def load_zero_shot_task(path):
    with open(path, "rb") as fh:
        doc = tomli.load(fh)
    cp, cm = _section(doc, "classes", path)
    tp, tm = _section(doc, "test", path)
    lp, _ = _section(doc, "labels", path, need_modality=False)
    classes = load_embeddings(cp, modality=cm)
    test = load_embeddings(tp, expect_d=classes.d, modality=tm)
    return ZeroShotTask(classes, test, read_labels(lp))


def load_retrieval_task(path):
    with open(path, "rb") as fh:
        doc = tomli.load(fh)
    qp, qm = _section(doc, "queries", path)
    cp, cm = _section(doc, "corpus", path)
    gp, _ = _section(doc, "ground_truth", path, need_modality=False)
    queries = load_embeddings(qp, modality=qm)
    corpus = load_embeddings(cp, expect_d=queries.d, modality=cm)
    return queries, corpus, read_labels(gp)
