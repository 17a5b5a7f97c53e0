"""Portable pseudo-random numbers: splitmix64 seeding xoshiro256**.

All randomness in the package (shuffling, masks, initialization, synthetic
data) goes through :class:`Xoshiro256`, so integer streams are identical on
every platform.

Algorithm
---------
* ``splitmix64(state)``: ``state += 0x9E3779B97F4A7C15``;
  ``z = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9``;
  ``z = (z ^ (z >> 27)) * 0x94D049BB133111EB``; output ``z ^ (z >> 31)``
  (all arithmetic mod 2**64).
* The generator runs ``LANES`` independent xoshiro256** states side by side.
  Their 4 * LANES state words are the first 4 * LANES outputs of splitmix64
  started at ``seed``, assigned word-major (word w of lane l is output
  number ``w * LANES + l``). An all-zero lane state is replaced by
  splitmix64 outputs until non-zero (practically never happens).
* One round advances every lane once with the reference xoshiro256** update
  ``out = rotl(s1 * 5, 7) * 9``; ``t = s1 << 17``; ``s2 ^= s0``;
  ``s3 ^= s1``; ``s1 ^= s2``; ``s0 ^= s3``; ``s2 ^= t``; ``s3 = rotl(s3, 45)``
  and emits the lane outputs in lane order. The public stream is the
  concatenation of rounds; unused outputs are buffered, so the stream does not
  depend on how requests are chunked.
* ``uniform``: ``(u >> 11) * 2**-53``. ``normal``: Box-Muller on consecutive
  uniform pairs (u1, u2) giving ``r cos(2 pi u2)``, ``r sin(2 pi u2)`` with
  ``r = sqrt(-2 log(1 - u1))``. Floating-point transforms rely on libm and
  may differ in the last ulp across platforms; integer streams do not.
* ``permutation(n)``: stable argsort of n fresh 64-bit keys.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
LANES = 4096

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(state):
    """Advance a splitmix64 state; returns ``(new_state, output)`` as ints."""
    state = (state + GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed, tag):
    """Derive an independent 64-bit seed for a named sub-stream."""
    state = (int(seed) & MASK64) ^ (hash_tag(tag) & MASK64)
    _, out = splitmix64(state)
    return out


def hash_tag(tag):
    # FNV-1a; Python's hash() is salted per process
    h = 0xCBF29CE484222325
    for byte in str(tag).encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Xoshiro256:
    """Lane-parallel xoshiro256** generator (see module docstring)."""

    def __init__(self, seed, lanes=LANES):
        self.seed = int(seed) & MASK64
        self.lanes = int(lanes)
        words = []
        state = self.seed
        for _ in range(4 * self.lanes):
            state, out = splitmix64(state)
            words.append(out)
        s = np.array(words, dtype=np.uint64).reshape(4, self.lanes)
        for lane in range(self.lanes):
            while not s[:, lane].any():
                for w in range(4):
                    state, out = splitmix64(state)
                    s[w, lane] = out
        self._s = s
        self._buffer = np.empty(0, dtype=np.uint64)

    def _round(self):
        s0, s1, s2, s3 = self._s
        out = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s[3] = _rotl(s3, 45)
        return out

    def next_u64(self, n):
        n = int(n)
        if n < 0:
            raise ValueError("n must be non-negative")
        have = self._buffer.size
        if have < n:
            rounds = -(-(n - have) // self.lanes)
            fresh = [self._round() for _ in range(rounds)]
            self._buffer = np.concatenate([self._buffer, *fresh])
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out

    def uniform(self, size):
        size = tuple(np.atleast_1d(size)) if not isinstance(size, int) else (size,)
        n = int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(size)

    def normal(self, size):
        size = tuple(np.atleast_1d(size)) if not isinstance(size, int) else (size,)
        n = int(np.prod(size))
        m = (n + 1) // 2
        u = self.uniform(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).ravel()
        return z[:n].reshape(size)

    def permutation(self, n):
        return np.argsort(self.next_u64(n), kind="stable")

    def choice(self, n, size):
        """``size`` distinct integers from ``range(n)``, in random order."""
        if size > n:
            raise ValueError("cannot choose more elements than available")
        return self.permutation(n)[:size]
