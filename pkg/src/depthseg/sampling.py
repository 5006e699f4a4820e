"""Depth maps as point clouds, and feature-location selection.

Farthest point sampling runs greedy max-min in 3D: pixel coordinates are
embedded in [0,1] x [0,1] and depth becomes the z axis (scaled by a
configurable factor, default 1). Random sampling is the data-agnostic
alternative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GridIndex, Rng, Tensor2


@dataclass(frozen=True)
class PointCloud:
    """One 3D point per grid cell, in linear (row-major) cell order."""

    points: np.ndarray = field(repr=False)  # (H*W, 3) float64
    grid: tuple[int, int]  # (H, W), kept for back-conversion to indices

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        h, w = self.grid
        if pts.shape != (h * w, 3):
            raise ValueError("point count must equal H*W")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def grid_index(self, linear: int) -> GridIndex:
        w = self.grid[1]
        return GridIndex(linear // w, linear % w)


@dataclass(frozen=True)
class SampleSet:
    """Ordered list of distinct grid positions."""

    indices: tuple[GridIndex, ...]

    def __post_init__(self):
        idx = tuple(GridIndex(int(r), int(c)) for r, c in self.indices)
        if len(set(idx)) != len(idx):
            raise ValueError("sample set contains duplicates")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)

    @staticmethod
    def full(h: int, w: int) -> "SampleSet":
        """Identity sampling: every cell in linear order."""
        return SampleSet(tuple(GridIndex(i // w, i % w) for i in range(h * w)))


def depth_to_pointcloud(d: Tensor2, depth_scale: float = 1.0) -> PointCloud:
    """Embed each cell (h, w) at (w/(W-1), h/(H-1), depth_scale * d[h, w]).

    A degenerate axis (H == 1 or W == 1) maps to coordinate 0.
    """
    if depth_scale <= 0:
        raise ValueError("depth_scale must be > 0")
    h, w = d.height, d.width
    xs = np.zeros(w) if w == 1 else np.arange(w) / (w - 1)
    ys = np.zeros(h) if h == 1 else np.arange(h) / (h - 1)
    pts = np.empty((h * w, 3), dtype=np.float64)
    pts[:, 0] = np.tile(xs, h)
    pts[:, 1] = np.repeat(ys, w)
    pts[:, 2] = depth_scale * d.flat()
    return PointCloud(pts, (h, w))


def pairwise_sq_dists(cloud: PointCloud) -> np.ndarray:
    """(n, n) squared distances, row by row with the same arithmetic FPS uses.

    Precompute once per cloud to amortize repeated FPS calls; selections are
    bitwise identical with or without it.
    """
    pts = cloud.points
    n = pts.shape[0]
    out = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        diff = pts - pts[i]
        out[i] = np.einsum("ij,ij->i", diff, diff)
    return out


def farthest_point_sample(
    cloud: PointCloud, k: int, init: int, pairwise_sq: np.ndarray | None = None
) -> SampleSet:
    """Greedy max-min selection of k points, starting from linear index init.

    Each step picks the unselected point with the maximum distance to the
    already-selected set; ties break toward the lowest linear index. Runs in
    O(n*k) with a maintained min-squared-distance array (the squared metric
    selects identically to the Euclidean one).
    """
    n = len(cloud)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if not 0 <= init < n:
        raise ValueError("init out of bounds")
    pts = cloud.points

    def row(i: int) -> np.ndarray:
        if pairwise_sq is not None:
            return pairwise_sq[i]
        diff = pts - pts[i]
        return np.einsum("ij,ij->i", diff, diff)

    chosen = [init]
    min_sq = row(init).copy()
    min_sq[init] = -np.inf  # never re-selectable
    for _ in range(k - 1):
        nxt = int(np.argmax(min_sq))  # first max = lowest linear index
        chosen.append(nxt)
        np.minimum(min_sq, row(nxt), out=min_sq)
        min_sq[nxt] = -np.inf
    return SampleSet(tuple(cloud.grid_index(i) for i in chosen))


def random_sample(h: int, w: int, k: int, rng: Rng) -> SampleSet:
    """k distinct positions, uniform without replacement, deterministic per seed."""
    if k > h * w:
        raise ValueError(f"cannot sample {k} from {h * w} cells")
    lin = rng.choose_distinct(h * w, k)
    return SampleSet(tuple(GridIndex(i // w, i % w) for i in lin))
