"""TopK sparse autoencoder parameters and forward passes.

One parameter set serves both modalities of a pair: the encoder, encoder
bias and dictionary are shared, and each side has its own pre-coding bias::

    z = TopK(ReLU(w_enc @ (x - b_pre[side]) + b_enc))
    x_hat = w_dec @ z + b_pre[side]

An optional boolean mask (shared by both sides of a pair) zeroes post-ReLU
activations before TopK. Using side ``"a"`` for every input recovers a plain
TopK SAE.
"""

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .errors import ArgumentError, FormatError, ShapeError

SIDES = ("a", "b")
MSC_MAGIC = b"MSC1"
MSC_VERSION = 1
_MSC_HEADER = struct.Struct("<4sIIII")


def _side(side):
    s = str(side).lower()
    if s not in SIDES:
        raise ArgumentError(f"side must be 'a' or 'b', got {side!r}")
    return s


@dataclass
class SaeParams:
    w_enc: np.ndarray  # (p, d)
    w_dec: np.ndarray  # (d, p), columns are dictionary atoms
    b_enc: np.ndarray  # (p,)
    b_pre_a: np.ndarray  # (d,)
    b_pre_b: np.ndarray  # (d,)

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.array(getattr(self, f.name), dtype=np.float64))
        p, d = self.w_enc.shape
        if self.w_dec.shape != (d, p):
            raise ShapeError(f"w_dec has shape {self.w_dec.shape}, expected {(d, p)}")
        if self.b_enc.shape != (p,):
            raise ShapeError(f"b_enc has shape {self.b_enc.shape}, expected {(p,)}")
        for name in ("b_pre_a", "b_pre_b"):
            if getattr(self, name).shape != (d,):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(d,)}")

    @property
    def d(self):
        return self.w_enc.shape[1]

    @property
    def p(self):
        return self.w_enc.shape[0]

    def b_pre(self, side):
        return self.b_pre_a if _side(side) == "a" else self.b_pre_b

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self):
        return SaeParams(**{k: v.copy() for k, v in self.as_dict().items()})

    def is_finite(self):
        return all(np.isfinite(v).all() for v in self.as_dict().values())

    def decoder_norms(self):
        return np.linalg.norm(self.w_dec, axis=0)

    def normalize_decoder(self):
        norms = self.decoder_norms()
        self.w_dec /= np.where(norms > 0, norms, 1.0)


@dataclass(frozen=True)
class SparseCode:
    """Sparse nonnegative code stored as strictly increasing (index, value) pairs."""

    indices: np.ndarray
    values: np.ndarray
    p: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        val = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if idx.shape != val.shape:
            raise ShapeError("indices and values must have equal length")
        if idx.size and (idx.min() < 0 or idx.max() >= self.p):
            raise ShapeError(f"code index out of range for p={self.p}")
        if idx.size > 1 and not (np.diff(idx) > 0).all():
            raise ShapeError("code indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @classmethod
    def from_dense(cls, z):
        z = np.asarray(z, dtype=np.float64)
        idx = np.flatnonzero(z)
        return cls(idx, z[idx], z.shape[0])

    @classmethod
    def from_pairs(cls, pairs, p):
        pairs = sorted(pairs)
        return cls([i for i, _ in pairs], [v for _, v in pairs], p)

    def to_dense(self):
        z = np.zeros(self.p)
        z[self.indices] = self.values
        return z

    def support(self):
        return frozenset(self.indices.tolist())

    def __len__(self):
        return self.indices.size

    def pairs(self):
        return list(zip(self.indices.tolist(), self.values.tolist()))

    def padded(self, p):
        if p < self.p:
            raise ShapeError("cannot pad a code to a smaller length")
        return SparseCode(self.indices, self.values, p)


@dataclass(frozen=True)
class Mask:
    kept: np.ndarray
    p_mask: float = field(default=0.0)

    @property
    def p(self):
        return self.kept.shape[0]


def _check_k(k, p):
    if not 1 <= k <= p:
        raise ArgumentError(f"k must satisfy 1 <= k <= p={p}, got {k}")


def topk(v, k):
    """Keep the ``k`` largest entries of ``v`` (ties: lowest index wins)."""
    v = np.asarray(v, dtype=np.float64)
    _check_k(k, v.shape[-1])
    return topk_rows(v[None, :], k)[0]


def topk_rows(r, k):
    """Row-wise :func:`topk` on a 2-D array."""
    r = np.asarray(r, dtype=np.float64)
    _check_k(k, r.shape[-1])
    order = np.argsort(-r, axis=1, kind="stable")[:, :k]
    out = np.zeros_like(r)
    rows = np.arange(r.shape[0])[:, None]
    out[rows, order] = r[rows, order]
    return out


def pre_activations(params, x, side):
    """``w_enc @ (x - b_pre) + b_enc`` for a vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d:
        raise ShapeError(f"input has dimension {x.shape[-1]}, model expects d={params.d}")
    return (x - params.b_pre(side)) @ params.w_enc.T + params.b_enc


def encode_dense(params, x, side, k, kept=None):
    """Dense codes for a batch ``x`` of shape (n, d); ``kept`` is (n, p) or (p,)."""
    x = np.atleast_2d(x)
    r = np.maximum(pre_activations(params, x, side), 0.0)
    if kept is not None:
        kept = np.asarray(kept, dtype=bool)
        if kept.shape[-1] != params.p:
            raise ShapeError(f"mask has length {kept.shape[-1]}, model has p={params.p}")
        r = np.where(kept, r, 0.0)
    return topk_rows(r, k)


def encode(params, x, side, k, mask=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("encode takes a single vector; use encode_dense for batches")
    kept = None if mask is None else (mask.kept if isinstance(mask, Mask) else mask)
    return SparseCode.from_dense(encode_dense(params, x[None, :], side, k, kept)[0])


def decode(params, z, side):
    if z.p != params.p:
        raise ShapeError(f"code has p={z.p}, model has p={params.p}")
    out = params.b_pre(side).copy()
    for i, v in zip(z.indices, z.values):
        out += v * params.w_dec[:, i]
    return out


def decode_dense(params, z, side):
    z = np.atleast_2d(z)
    if z.shape[-1] != params.p:
        raise ShapeError(f"codes have p={z.shape[-1]}, model has p={params.p}")
    return z @ params.w_dec.T + params.b_pre(side)


def draw_masks(n, p, p_mask, rng):
    """``n`` independent masks as an (n, p) boolean array (True = kept)."""
    if not 0.0 <= p_mask <= 1.0:
        raise ArgumentError(f"p_mask must lie in [0, 1], got {p_mask}")
    return rng.uniform((n, p)) >= p_mask


def draw_mask(p, p_mask, rng):
    return Mask(draw_masks(1, p, p_mask, rng)[0], float(p_mask))


def init_params(d, p, rng, data_a=None, data_b=None, n_bias_rows=4096):
    """Random unit-norm dictionary, tied encoder, per-modality mean pre-biases."""
    if p < d:
        raise ArgumentError(f"dictionary must be overcomplete (p >= d), got p={p}, d={d}")
    w_dec = rng.normal((d, p))
    w_dec /= np.linalg.norm(w_dec, axis=0)
    b_a = np.zeros(d) if data_a is None else np.asarray(data_a)[:n_bias_rows].mean(axis=0)
    b_b = np.zeros(d) if data_b is None else np.asarray(data_b)[:n_bias_rows].mean(axis=0)
    return SaeParams(w_dec.T.copy(), w_dec, np.zeros(p), b_a, b_b)


def save_checkpoint(path, params, k, meta=None):
    """Write an MSC1 checkpoint.

    Layout: header ``magic | u32 version | u32 d | u32 p | u32 k``, then
    float32 arrays ``w_enc`` (row-major), ``b_enc``, ``w_dec`` (column-major),
    ``b_pre_a``, ``b_pre_b``, then a UTF-8 TOML metadata blob to end of file.
    """
    d, p = params.d, params.p
    parts = [
        _MSC_HEADER.pack(MSC_MAGIC, MSC_VERSION, d, p, int(k)),
        np.ascontiguousarray(params.w_enc, dtype="<f4").tobytes(),
        np.ascontiguousarray(params.b_enc, dtype="<f4").tobytes(),
        np.ascontiguousarray(params.w_dec.T, dtype="<f4").tobytes(),
        np.ascontiguousarray(params.b_pre_a, dtype="<f4").tobytes(),
        np.ascontiguousarray(params.b_pre_b, dtype="<f4").tobytes(),
        tomli_w.dumps(dict(meta or {})).encode("utf-8"),
    ]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Read an MSC1 checkpoint; returns ``(params, k, meta)``."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _MSC_HEADER.size:
        raise FormatError(f"{path}: file too short for an MSC1 header")
    magic, version, d, p, k = _MSC_HEADER.unpack_from(blob)
    if magic != MSC_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MSC_VERSION:
        raise FormatError(f"{path}: unsupported MSC1 version {version}")
    sizes = [p * d, p, d * p, d, d]
    need = _MSC_HEADER.size + 4 * sum(sizes)
    if len(blob) < need:
        raise FormatError(f"{path}: truncated checkpoint ({len(blob)} < {need} bytes)")
    flat = np.frombuffer(blob, dtype="<f4", count=sum(sizes), offset=_MSC_HEADER.size)
    chunks = np.split(flat.astype(np.float64), np.cumsum(sizes)[:-1])
    try:
        meta = tomli.loads(blob[need:].decode("utf-8"))
    except (UnicodeDecodeError, tomli.TOMLDecodeError) as err:
        raise FormatError(f"{path}: bad metadata blob: {err}") from None
    params = SaeParams(
        w_enc=chunks[0].reshape(p, d),
        b_enc=chunks[1],
        w_dec=chunks[2].reshape(p, d).T,
        b_pre_a=chunks[3],
        b_pre_b=chunks[4],
    )
    return params, k, meta
