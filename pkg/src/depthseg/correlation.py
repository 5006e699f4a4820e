"""Pairwise correspondence tensors between two maps, plus spatial centering.

A correspondence tensor holds one entry per position pair (p from map i,
q from map j): normalized dot products for feature maps, plain depth
products for depth maps. Positions are either all grid cells (full-map
mode) or a sampled subset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import EPS_NORM, Tensor2, Tensor3, row_norms

# Sampled positions are passed around as SampleSet (see sampling module) or
# None for full-map mode; only the ordered index list matters here.


@dataclass(frozen=True)
class CorrelationTensor:
    """A x B matrix of pairwise correlations, row-major."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("correlation tensor must be 2-d")
        if not np.all(np.isfinite(arr)):
            raise ValueError("correlation tensor must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def _linear_indices(samples, h: int, w: int) -> np.ndarray:
    if samples is None:
        return np.arange(h * w)
    idx = np.asarray([r * w + c for r, c in samples.indices], dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty sample set")
    if idx.min() < 0 or idx.max() >= h * w:
        raise ValueError("sample index out of bounds")
    return idx


def gather_vectors(t: Tensor3, samples=None) -> np.ndarray:
    """(A, C) matrix of per-position vectors at the sampled positions."""
    lin = _linear_indices(samples, t.height, t.width)
    return t.positions_matrix()[lin]


def gather_depths(d: Tensor2, samples=None) -> np.ndarray:
    """(A,) depth values at the sampled positions."""
    lin = _linear_indices(samples, d.height, d.width)
    return d.flat()[lin]


def normalize_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalize rows; rows with norm < EPS_NORM become zero rows.

    Returns (unit rows, inverse norms) where the inverse norm of a
    directionless row is 0.
    """
    norms = row_norms(m)
    inv = np.where(norms < EPS_NORM, 0.0, 1.0 / np.where(norms < EPS_NORM, 1.0, norms))
    return m * inv[:, None], inv


def cosine_matrix(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """(A, B) cosine similarities between rows of u and rows of v."""
    if u.shape[1] != v.shape[1]:
        raise ValueError(f"channel mismatch: {u.shape[1]} vs {v.shape[1]}")
    uh, _ = normalize_rows(u)
    vh, _ = normalize_rows(v)
    return np.einsum("ik,jk->ij", uh, vh)


def feature_correlation(
    f_i: Tensor3, f_j: Tensor3, samples_i=None, samples_j=None
) -> CorrelationTensor:
    """Cosine similarity between every sampled position pair of two maps."""
    if f_i.channels != f_j.channels:
        raise ValueError(f"channel mismatch: {f_i.channels} vs {f_j.channels}")
    u = gather_vectors(f_i, samples_i)
    v = gather_vectors(f_j, samples_j)
    return CorrelationTensor(cosine_matrix(u, v))


def depth_correlation(
    d_i: Tensor2, d_j: Tensor2, samples_i=None, samples_j=None
) -> CorrelationTensor:
    """Product of depths at every sampled position pair of two depth maps.

    Accepts any guidance map with values in [0, 1] (depth, image plane,
    perspective plane, ...).
    """
    for d in (d_i, d_j):
        if d.data.min() < 0.0 or d.data.max() > 1.0:
            raise ValueError("guidance map values must lie in [0, 1]")
    a = gather_depths(d_i, samples_i)
    b = gather_depths(d_j, samples_j)
    return CorrelationTensor(np.einsum("i,j->ij", a, b))


def center_rows(t: CorrelationTensor) -> CorrelationTensor:
    """Subtract each row's mean (per-anchor spatial centering)."""
    d = t.data
    return CorrelationTensor(d - d.mean(axis=1, keepdims=True))


def apply_centering(m: np.ndarray, mode: str) -> np.ndarray:
    """Centering variants for a raw correlation matrix.

    ``row`` subtracts row means; ``row+col`` double-centers so both row and
    column sums vanish.
    """
    if mode == "none":
        return m
    if mode == "row":
        return m - m.mean(axis=1, keepdims=True)
    if mode == "row+col":
        return m - m.mean(axis=1, keepdims=True) - m.mean(axis=0, keepdims=True) + m.mean()
    raise ValueError(f"unknown centering mode: {mode!r}")
