"""Paired multimodal embedding datasets and the MEB binary format.

MEB layout (little-endian)::

    offset  size  field
    0       4     magic b"MEB1"
    4       4     u32 version (= 1)
    8       4     u32 n_samples
    12      4     u32 d
    16      1     u8 dtype (0 = float32)
    17      3     zero padding
    20      ...   n_samples * d float32, row-major

A manifest is a TOML file::

    [side_a]
    path = "imgs.meb"
    modality = "image"

    [side_b]
    path = "caps.meb"
    modality = "text"

Relative paths resolve against the manifest's directory.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli

from .errors import ArgumentError, DataError, FormatError, ManifestError, PairingError, ShapeError
from .rng import Xoshiro256

MEB_MAGIC = b"MEB1"
MEB_VERSION = 1
_MEB_HEADER = struct.Struct("<4sIIIB3x")
DEFAULT_BATCH_SIZE = 128
NORM_TOL = 1e-5
KEEP_TOL = 1e-6


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Row-wise unit-norm embeddings tagged with their modality."""

    data: np.ndarray
    modality: str

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeError(f"embedding matrix must be 2-D and non-empty, got shape {data.shape}")
        bad = ~np.isfinite(data).all(axis=1)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise DataError(f"row {row} contains a non-finite value", row=row)
        norms = np.linalg.norm(data, axis=1)
        off = np.abs(norms - 1.0) > NORM_TOL
        if off.any():
            row = int(np.flatnonzero(off)[0])
            raise DataError(f"row {row} has norm {norms[row]:.6g}, expected 1", row=row)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n_samples(self):
        return self.data.shape[0]

    @property
    def d(self):
        return self.data.shape[1]

    @classmethod
    def from_raw(cls, raw, modality):
        """Normalize rows of ``raw``; zero-norm or non-finite rows are errors."""
        return cls(normalize_rows(raw), modality)

    def subset(self, index):
        return EmbeddingMatrix(self.data[np.asarray(index)], self.modality)


@dataclass(frozen=True)
class PairedDataset:
    side_a: EmbeddingMatrix
    side_b: EmbeddingMatrix

    def __post_init__(self):
        if self.side_a.n_samples != self.side_b.n_samples:
            raise PairingError(
                f"row counts differ: {self.side_a.n_samples} ({self.side_a.modality}) "
                f"vs {self.side_b.n_samples} ({self.side_b.modality})"
            )
        if self.side_a.d != self.side_b.d:
            raise ShapeError(f"embedding dims differ: {self.side_a.d} vs {self.side_b.d}")
        if self.side_a.modality == self.side_b.modality:
            raise ManifestError(f"both sides have modality {self.side_a.modality!r}")

    @property
    def n_pairs(self):
        return self.side_a.n_samples

    @property
    def d(self):
        return self.side_a.d

    @property
    def modalities(self):
        return (self.side_a.modality, self.side_b.modality)

    def side(self, which):
        """Return the matrix for side ``"a"``/``"b"`` or for a modality label."""
        if which in ("a", "A") or which == self.side_a.modality:
            return self.side_a
        if which in ("b", "B") or which == self.side_b.modality:
            return self.side_b
        raise ArgumentError(f"unknown side {which!r}; dataset has {self.modalities}")

    def subset(self, index):
        return PairedDataset(self.side_a.subset(index), self.side_b.subset(index))


def normalize_rows(raw):
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {raw.shape}")
    finite = np.isfinite(raw).all(axis=1)
    if not finite.all():
        row = int(np.flatnonzero(~finite)[0])
        raise DataError(f"row {row} contains a non-finite value", row=row)
    norms = np.linalg.norm(raw, axis=1)
    if (norms == 0).any():
        row = int(np.flatnonzero(norms == 0)[0])
        raise DataError(f"row {row} has zero norm", row=row)
    # rows already unit-norm to float32 precision are kept bit-exact so that
    # save(load(f)) reproduces the payload
    scale = np.where(np.abs(norms - 1.0) <= KEEP_TOL, 1.0, norms)
    return raw / scale[:, None]


def read_meb(path, expect_d=None):
    """Read the raw float32 payload of an MEB file as a float64 array."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _MEB_HEADER.size:
        raise FormatError(f"{path}: file too short for an MEB header")
    magic, version, n, d, dtype = _MEB_HEADER.unpack_from(blob)
    if magic != MEB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MEB_VERSION:
        raise FormatError(f"{path}: unsupported MEB version {version}")
    if dtype != 0:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    if expect_d is not None and d != expect_d:
        raise ShapeError(f"{path}: header d={d} but expected d={expect_d}")
    payload = blob[_MEB_HEADER.size:]
    if len(payload) != 4 * n * d:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * n * d}")
    return np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float64)


def write_meb(path, data):
    data = np.asarray(data)
    if data.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {data.shape}")
    n, d = data.shape
    header = _MEB_HEADER.pack(MEB_MAGIC, MEB_VERSION, n, d, 0)
    Path(path).write_bytes(header + np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_embeddings(path, expect_d=None, modality="unknown"):
    raw = read_meb(path, expect_d=expect_d)
    try:
        return EmbeddingMatrix.from_raw(raw, modality)
    except DataError as err:
        raise DataError(f"{path}: {err}", row=err.row) from None


def save_embeddings(path, emb):
    write_meb(path, emb.data if isinstance(emb, EmbeddingMatrix) else emb)


def read_manifest(path):
    path = Path(path)
    try:
        with path.open("rb") as fh:
            doc = tomli.load(fh)
    except tomli.TOMLDecodeError as err:
        raise ManifestError(f"{path}: {err}") from None
    out = {}
    for side in ("side_a", "side_b"):
        entry = doc.get(side)
        if not isinstance(entry, dict) or "path" not in entry or "modality" not in entry:
            raise ManifestError(f"{path}: [{side}] needs 'path' and 'modality'")
        out[side] = (path.parent / entry["path"], str(entry["modality"]))
    return out


def write_manifest(path, path_a, modality_a, path_b, modality_b):
    import tomli_w

    path = Path(path)
    doc = {
        "side_a": {"path": _relpath(path_a, path.parent), "modality": modality_a},
        "side_b": {"path": _relpath(path_b, path.parent), "modality": modality_b},
    }
    path.write_text(tomli_w.dumps(doc), encoding="utf-8")


def _relpath(target, base):
    target = Path(target)
    try:
        return str(target.resolve().relative_to(Path(base).resolve()))
    except ValueError:
        return str(target.resolve())


def load_paired(manifest_path):
    entries = read_manifest(manifest_path)
    (path_a, mod_a), (path_b, mod_b) = entries["side_a"], entries["side_b"]
    if mod_a == mod_b:
        raise ManifestError(f"{manifest_path}: both sides declare modality {mod_a!r}")
    a = load_embeddings(path_a, modality=mod_a)
    b = load_embeddings(path_b, expect_d=a.d, modality=mod_b)
    return PairedDataset(a, b)


def save_paired(manifest_path, ds, stem=None):
    """Write both sides as MEB files next to the manifest, then the manifest."""
    manifest_path = Path(manifest_path)
    stem = stem or manifest_path.stem
    pa = manifest_path.with_name(f"{stem}_{ds.side_a.modality}.meb")
    pb = manifest_path.with_name(f"{stem}_{ds.side_b.modality}.meb")
    save_embeddings(pa, ds.side_a)
    save_embeddings(pb, ds.side_b)
    write_manifest(manifest_path, pa, ds.side_a.modality, pb, ds.side_b.modality)
    return pa, pb


class BatchIterator:
    """Deterministic shuffled mini-batches of pair indices.

    Each epoch draws a fresh permutation from one xoshiro256** stream, so the
    sequence of index sets depends only on ``(n_pairs, batch_size, seed)``.
    Iterating yields index arrays forever; use :meth:`epoch` for one pass.
    """

    def __init__(self, ds, batch_size=DEFAULT_BATCH_SIZE, seed=0, shuffle=True):
        if batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {batch_size}")
        self.ds = ds
        self.n = ds.n_pairs if hasattr(ds, "n_pairs") else int(ds)
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.shuffle = shuffle
        self._rng = Xoshiro256(self.seed)
        self.epochs_started = 0

    def epoch(self):
        order = self._rng.permutation(self.n) if self.shuffle else np.arange(self.n)
        self.epochs_started += 1
        return [order[i:i + self.batch_size] for i in range(0, self.n, self.batch_size)]

    def __iter__(self):
        while True:
            yield from self.epoch()


def make_batches(ds, batch_size=DEFAULT_BATCH_SIZE, seed=0, shuffle=True):
    return BatchIterator(ds, batch_size=batch_size, seed=seed, shuffle=shuffle)
