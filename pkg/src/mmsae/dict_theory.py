"""Split dictionaries and their constructive augmentation.

A dictionary is modality-split on a set of pairs when every pair's two codes
have disjoint supports. :func:`augment_split_dictionary` removes that
property pair by pair: for a pair with codes ``z_x`` and ``z_y`` it picks
atoms ``w_i`` (from ``z_x``) and ``w_j`` (from ``z_y``) with the largest inner
product, appends the Gram-Schmidt direction ``(w_j - (w_i.w_j) w_i) / norm``
and rewrites ``y`` on ``{w_i, new atom, rest of z_y}``. Reconstructions are
unchanged, ``y``'s code grows by at most one entry and the two codes now
share ``w_i``, so their inner product is ``z_x[i] * z_y[j] * (w_i.w_j) > 0``.
Because ``<x, y> = sum z_x[i] z_y[j] w_i.w_j > c``, the chosen inner product
is at least ``c / (|z_x|_1 |z_y|_1)``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, PreconditionError, ShapeError
from .sae_model import SparseCode

UNIT_TOL = 1e-8
COLLINEAR_TOL = 1e-12


@dataclass(frozen=True)
class Dictionary:
    atoms: np.ndarray  # (d, p), unit-norm columns

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64)
        if atoms.ndim != 2:
            raise ShapeError(f"dictionary must be 2-D, got shape {atoms.shape}")
        norms = np.linalg.norm(atoms, axis=0)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
        if bad.size:
            raise PreconditionError(f"column {bad[0]} has norm {norms[bad[0]]:.12g}, expected 1")
        object.__setattr__(self, "atoms", atoms)

    @property
    def d(self):
        return self.atoms.shape[0]

    @property
    def p(self):
        return self.atoms.shape[1]

    def reconstruct(self, z):
        return self.atoms[:, z.indices] @ z.values


@dataclass(frozen=True)
class DecomposedPair:
    x: np.ndarray
    y: np.ndarray
    z_x: SparseCode
    z_y: SparseCode
    residual_x: float
    residual_y: float

    @classmethod
    def build(cls, atoms, x, y, z_x, z_y):
        atoms = atoms.atoms if isinstance(atoms, Dictionary) else np.asarray(atoms)
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        rx = float(np.linalg.norm(x - atoms[:, z_x.indices] @ z_x.values))
        ry = float(np.linalg.norm(y - atoms[:, z_y.indices] @ z_y.values))
        return cls(x, y, z_x, z_y, rx, ry)

    @property
    def inner(self):
        """``<x, y>`` of the embeddings."""
        return float(self.x @ self.y)

    def code_inner(self):
        """``<z_x, z_y>`` of the sparse codes."""
        common, ix, iy = np.intersect1d(self.z_x.indices, self.z_y.indices,
                                        assume_unique=True, return_indices=True)
        return float(self.z_x.values[ix] @ self.z_y.values[iy]) if common.size else 0.0


def is_modality_split(pairs):
    """``(True, None)`` if every pair has disjoint code supports, else ``(False, index)``."""
    for n, pair in enumerate(pairs):
        if pair.z_x.support() & pair.z_y.support():
            return False, n
    return True, None


def normalize_dictionary(atoms, pairs):
    """Rescale columns to unit norm, compensating in every code."""
    atoms = np.asarray(atoms, dtype=np.float64)
    norms = np.linalg.norm(atoms, axis=0)
    if (norms == 0).any():
        raise PreconditionError("dictionary has a zero column")
    out = []
    for pair in pairs:
        zx = SparseCode(pair.z_x.indices, pair.z_x.values * norms[pair.z_x.indices], pair.z_x.p)
        zy = SparseCode(pair.z_y.indices, pair.z_y.values * norms[pair.z_y.indices], pair.z_y.p)
        out.append(DecomposedPair(pair.x, pair.y, zx, zy, pair.residual_x, pair.residual_y))
    return Dictionary(atoms / norms), out


def _check_pair(n, pair, dic, c, tol):
    for name, z in (("z_x", pair.z_x), ("z_y", pair.z_y)):
        if z.p != dic.p:
            raise ShapeError(f"pair {n}: {name} has p={z.p}, dictionary has {dic.p}")
        if len(z) == 0:
            raise PreconditionError(f"pair {n}: {name} is empty")
        if (z.values < 0).any():
            raise PreconditionError(f"pair {n}: {name} has negative entries")
    if pair.inner <= c:
        raise PreconditionError(f"pair {n}: <x, y> = {pair.inner:.6g} is not above c = {c}")
    if max(pair.residual_x, pair.residual_y) > tol:
        raise PreconditionError(
            f"pair {n}: decomposition residual {max(pair.residual_x, pair.residual_y):.3g} exceeds {tol}")
    if pair.z_x.support() & pair.z_y.support():
        raise PreconditionError(f"pair {n}: codes share support, dictionary is not split on it")


def augment_split_dictionary(dictionary, pairs, c, tol=1e-6):
    """Grow a split dictionary so that every pair's codes overlap.

    Returns ``(new_dictionary, new_pairs)``. ``x`` codes are only
    zero-padded; each ``y`` code is rewritten with at most one extra nonzero.
    Residuals up to ``tol`` are accepted (approximate decompositions); the
    selection bound is then loosened by the corresponding error terms.
    """
    if not c > 0:
        raise PreconditionError(f"alignment bound c must be positive, got {c}")
    dic = dictionary if isinstance(dictionary, Dictionary) else Dictionary(dictionary)
    pairs = list(pairs)
    for n, pair in enumerate(pairs):
        _check_pair(n, pair, dic, c, tol)

    cols = [dic.atoms[:, j] for j in range(dic.p)]
    new_y = []
    for n, pair in enumerate(pairs):
        zx, zy = pair.z_x, pair.z_y
        W = np.stack(cols, axis=1)
        gram = W[:, zx.indices].T @ W[:, zy.indices]
        a, b = np.unravel_index(int(np.argmax(gram)), gram.shape)
        i, j, g = int(zx.indices[a]), int(zy.indices[b]), float(gram[a, b])
        nx, ny = np.linalg.norm(pair.x), np.linalg.norm(pair.y)
        slack = pair.residual_x * ny + pair.residual_y * nx + pair.residual_x * pair.residual_y
        bound = (c - slack) / (zx.values.sum() * zy.values.sum())
        if g < bound - 1e-12:
            raise ConsistencyError(
                f"pair {n}: best atom inner product {g:.6g} is below the guaranteed {bound:.6g}")
        zy_j = float(zy.values[b])
        entries = {int(k): float(v) for k, v in zip(zy.indices, zy.values) if k != j}
        entries[i] = entries.get(i, 0.0) + zy_j * g
        resid = cols[j] - g * cols[i]
        norm = float(np.linalg.norm(resid))
        if norm >= COLLINEAR_TOL:
            cols.append(resid / norm)
            entries[len(cols) - 1] = zy_j * norm
        new_y.append(entries)

    out_dic = Dictionary(np.stack(cols, axis=1))
    p_new = out_dic.p
    out = []
    for n, (pair, entries) in enumerate(zip(pairs, new_y)):
        zx = pair.z_x.padded(p_new)
        zy = SparseCode.from_pairs(entries.items(), p_new)
        new = DecomposedPair.build(out_dic, pair.x, pair.y, zx, zy)
        if new.residual_y > pair.residual_y + 1e-9 or new.residual_x > pair.residual_x + 1e-9:
            raise ConsistencyError(f"pair {n}: reconstruction degraded")
        if not new.code_inner() > 0 or len(zy) > len(pair.z_y) + 1:
            raise ConsistencyError(f"pair {n}: rewritten code violates the construction")
        out.append(new)
    return out_dic, out


def min_code_inner(pairs):
    return min(pair.code_inner() for pair in pairs)
