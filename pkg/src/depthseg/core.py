"""Dense tensor containers, vector math, pooling, and the deterministic RNG.

Everything here is pure and allocation-light; all other modules build on it.
Arithmetic is done in float64 (file storage is float32, see dataio). All
reductions use numpy's fixed linear-index order, and matrix products go
through :func:`mm` (plain einsum) so results do not depend on BLAS thread
settings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

# Below this norm a vector is considered directionless: its cosine
# similarity to anything is defined as 0 (and so is the gradient).
EPS_NORM = 1e-12

_MASK64 = (1 << 64) - 1


class GridIndex(NamedTuple):
    """A (row, col) position on an H x W grid."""

    row: int
    col: int


def _validated(data, ndim: int) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"expected {ndim}-d data, got {arr.ndim}-d")
    if arr.size == 0:
        raise ValueError("tensor must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data must be finite")
    return arr


@dataclass(frozen=True)
class Tensor3:
    """C x H x W tensor, row-major, channel-outermost.

    Holds a feature map or a code map. The array is treated as immutable.
    """

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "data", _validated(self.data, 3))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def at(self, idx: GridIndex) -> np.ndarray:
        """Channel vector at a grid position."""
        return self.data[:, idx.row, idx.col]

    def positions_matrix(self) -> np.ndarray:
        """(H*W, C) matrix of per-position vectors, positions in linear order."""
        c = self.data.shape[0]
        return np.ascontiguousarray(self.data.reshape(c, -1).T)


@dataclass(frozen=True)
class Tensor2:
    """H x W tensor, row-major. Holds a depth map or any scalar field."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "data", _validated(self.data, 2))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def at(self, idx: GridIndex) -> float:
        return float(self.data[idx.row, idx.col])

    def flat(self) -> np.ndarray:
        """(H*W,) values in linear order."""
        return self.data.reshape(-1)


def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed, thread-count-independent reduction order."""
    return np.einsum("ij,jk->ik", a, b)


def row_norms(m: np.ndarray) -> np.ndarray:
    """Euclidean norm of each row, reduced in linear order."""
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def cosine_similarity(a, b) -> float:
    """Normalized dot product of two vectors.

    Returns 0 if either vector's norm is below ``EPS_NORM`` (a zero feature
    carries no direction).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("cosine_similarity expects 1-d vectors")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 1:
        raise ValueError("vectors must have length >= 1")
    na = float(np.sqrt(np.einsum("i,i->", a, a)))
    nb = float(np.sqrt(np.einsum("i,i->", b, b)))
    if na < EPS_NORM or nb < EPS_NORM:
        return 0.0
    return float(np.einsum("i,i->", a, b) / (na * nb))


def avg_pool_to(m: Tensor2, h_out: int, w_out: int) -> Tensor2:
    """Non-overlapping blockwise mean pooling to an exact output resolution.

    Input dimensions must be divisible by the output dimensions; pre-crop
    otherwise.
    """
    h_in, w_in = m.height, m.width
    if h_out < 1 or w_out < 1:
        raise ValueError("output dims must be >= 1")
    if h_in % h_out != 0 or w_in % w_out != 0:
        raise ValueError(
            f"pooling requires divisible dims: {h_in}x{w_in} -> {h_out}x{w_out}"
        )
    bh, bw = h_in // h_out, w_in // w_out
    blocks = m.data.reshape(h_out, bh, w_out, bw)
    return Tensor2(blocks.mean(axis=(1, 3)))


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** with splitmix64 seeding.

    Pure-python 64-bit arithmetic: the same seed yields the same sequence on
    every platform. Instances are single-owner; do not share across threads.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        state = self.seed
        s = []
        for _ in range(4):
            state, v = _splitmix64(state)
            s.append(v)
        self._s = s

    def _next(self) -> int:
        s0, s1, s2, s3 = self._s
        out = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return out

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n), unbiased via rejection sampling."""
        if n < 1:
            raise ValueError("randint requires n >= 1")
        limit = (2**64 // n) * n
        while True:
            v = self._next()
            if v < limit:
                return v % n

    def random(self) -> float:
        """Uniform float64 in [0, 1) with 53 random bits."""
        return (self._next() >> 11) * 2.0**-53

    def normal(self) -> float:
        """Standard normal via Box-Muller (cosine branch only, stateless)."""
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        return float(np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2))

    def normals(self, shape) -> np.ndarray:
        out = np.empty(int(np.prod(shape)), dtype=np.float64)
        for i in range(out.size):
            out[i] = self.normal()
        return out.reshape(shape)

    def uniforms(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        out = np.empty(int(np.prod(shape)), dtype=np.float64)
        for i in range(out.size):
            out[i] = self.random()
        return (low + (high - low) * out).reshape(shape)

    def shuffle(self, seq: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randint(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def choose_distinct(self, n: int, k: int) -> list[int]:
        """k distinct indices from [0, n), uniform without replacement.

        Returned in selection order (partial Fisher-Yates).
        """
        if k > n:
            raise ValueError(f"cannot choose {k} distinct from {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream derived from (seed, tag); parent untouched."""
        state = (self.seed ^ ((tag & _MASK64) * 0xD1342543DE82EF95)) & _MASK64
        for _ in range(2):
            state, v = _splitmix64(state)
        return Rng(v)


def rng_new(seed: int) -> Rng:
    return Rng(seed)


def rng_uniform(rng: Rng, n: int) -> int:
    return rng.randint(n)
