"""Depth-informed signal propagation to 3D-nearest patches.

For each sampled anchor, its code vector is mixed with the codes of its
nearest patches in 3D space (weights proportional to inverse distance),
pushed through a small projection head, and the contrastive objective is
recomputed on the projected codes. Mixing weights are data, not
parameters: gradients flow through the mix to the code map and to the
projection head only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GridIndex, Rng
from .losses import LossTermConfig, TermResult, correlation_loss
from .sampling import PointCloud, SampleSet

EPS_DIST = 1e-6  # distance floor for inverse-distance weights (coincident points)


@dataclass(frozen=True)
class NeighborSet:
    """An anchor with its k nearest 3D patches and normalized weights."""

    anchor: GridIndex
    neighbors: tuple[tuple[GridIndex, float], ...]

    def __post_init__(self):
        w = np.array([wt for _, wt in self.neighbors], dtype=np.float64)
        if w.size and (w.min() < 0 or abs(w.sum() - 1.0) > 1e-6):
            raise ValueError("neighbor weights must be a probability vector")
        if any(n == self.anchor for n, _ in self.neighbors):
            raise ValueError("anchor cannot be its own neighbor")


def _neighbor_weights(dists: np.ndarray, mode: str) -> np.ndarray:
    if mode == "inverse":
        raw = 1.0 / np.maximum(dists, EPS_DIST)
    elif mode == "max_minus":
        raw = (dists.max() - dists) + EPS_DIST
    elif mode == "softmax":
        z = -dists
        z = z - z.max()
        raw = np.exp(z)
    else:
        raise ValueError(f"unknown weighting mode: {mode!r}")
    return raw / raw.sum()


def knn3d(
    cloud: PointCloud, anchor: GridIndex, k_nb: int, weighting: str = "inverse"
) -> NeighborSet:
    """k nearest patches to the anchor by 3D Euclidean distance.

    Ties break toward the lowest linear index; weights are normalized
    inverse distances (with a small floor) by default.
    """
    n = len(cloud)
    if k_nb >= n:
        raise ValueError(f"k_nb must be < {n}, got {k_nb}")
    if k_nb < 1:
        raise ValueError("k_nb must be >= 1")
    h, w = cloud.grid
    a_lin = anchor.row * w + anchor.col
    if not (0 <= anchor.row < h and 0 <= anchor.col < w):
        raise ValueError("anchor out of bounds")
    diff = cloud.points - cloud.points[a_lin]
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    d[a_lin] = np.inf  # exclude the anchor itself
    order = np.argsort(d, kind="stable")[:k_nb]
    weights = _neighbor_weights(d[order], weighting)
    return NeighborSet(
        anchor,
        tuple((cloud.grid_index(int(i)), float(wt)) for i, wt in zip(order, weights)),
    )


def propagate_mix(codes, nbrs: NeighborSet, anchor_keep: float) -> np.ndarray:
    """Convex mix of the anchor code with its weighted neighbor codes."""
    if not 0.0 <= anchor_keep <= 1.0:
        raise ValueError("anchor_keep must lie in [0, 1]")
    get = codes.at if hasattr(codes, "at") else lambda idx: codes[:, idx.row, idx.col]
    mixed = anchor_keep * np.asarray(get(nbrs.anchor), dtype=np.float64)
    for idx, wt in nbrs.neighbors:
        mixed = mixed + (1.0 - anchor_keep) * wt * np.asarray(get(idx), dtype=np.float64)
    return mixed


@dataclass
class ProjectionParams:
    """Single affine Q -> Q projection head."""

    weight: np.ndarray = field(repr=False)  # (Q, Q)
    bias: np.ndarray = field(repr=False)  # (Q,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        q = self.bias.shape[0]
        if self.weight.shape != (q, q):
            raise ValueError("projection weight must be square QxQ")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("projection params must be finite")

    @staticmethod
    def identity(q: int) -> "ProjectionParams":
        return ProjectionParams(np.eye(q), np.zeros(q))

    @staticmethod
    def init_random(q: int, rng: Rng) -> "ProjectionParams":
        limit = np.sqrt(6.0 / (q + q))
        return ProjectionParams(rng.uniforms((q, q), -limit, limit), np.zeros(q))


def project(params: ProjectionParams, code: np.ndarray) -> np.ndarray:
    """Affine map W @ code + b for a single vector or (A, Q) row stack."""
    x = np.asarray(code, dtype=np.float64)
    if x.shape[-1] != params.bias.shape[0]:
        raise ValueError("code dimension does not match projection head")
    if x.ndim == 1:
        return np.einsum("ij,j->i", params.weight, x) + params.bias
    return np.einsum("ij,pj->pi", params.weight, x) + params.bias


class PropagationOperator:
    """Mix-then-project for a fixed set of sampled anchors on one cloud.

    Forward maps a (P, Q) code map to (A, Q) projected codes; backward
    scatters a gradient on the projected codes back to the code map and
    accumulates projection-head gradients.
    """

    def __init__(
        self,
        cloud: PointCloud,
        samples: SampleSet,
        k_nb: int,
        anchor_keep: float,
        weighting: str = "inverse",
    ):
        if not 0.0 <= anchor_keep <= 1.0:
            raise ValueError("anchor_keep must lie in [0, 1]")
        self.grid = cloud.grid
        self.anchor_keep = anchor_keep
        h, w = cloud.grid
        self.anchor_lin = np.array(
            [r * w + c for r, c in samples.indices], dtype=np.int64
        )
        self.neighbor_lin = []
        self.neighbor_wts = []
        for idx in samples.indices:
            ns = knn3d(cloud, idx, k_nb, weighting)
            self.neighbor_lin.append(
                np.array([r * w + c for (r, c), _ in ns.neighbors], dtype=np.int64)
            )
            self.neighbor_wts.append(
                np.array([wt for _, wt in ns.neighbors], dtype=np.float64)
            )

    def forward(self, code_map: np.ndarray, params: ProjectionParams) -> np.ndarray:
        """code_map is (P, Q) position-major; returns (A, Q) projected codes."""
        keep = self.anchor_keep
        mixed = np.empty((len(self.anchor_lin), code_map.shape[1]), dtype=np.float64)
        for a, (lin, nb, wt) in enumerate(
            zip(self.anchor_lin, self.neighbor_lin, self.neighbor_wts)
        ):
            mixed[a] = keep * code_map[lin] + (1.0 - keep) * np.einsum(
                "n,nq->q", wt, code_map[nb]
            )
        self._mixed = mixed
        return project(params, mixed)

    def backward(
        self, grad_projected: np.ndarray, params: ProjectionParams, p_positions: int
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (grad_code_map (P, Q), grad_weight, grad_bias)."""
        grad_w = np.einsum("ai,aj->ij", grad_projected, self._mixed)
        grad_b = grad_projected.sum(axis=0)
        grad_mixed = np.einsum("ij,ai->aj", params.weight, grad_projected)
        grad_map = np.zeros((p_positions, grad_projected.shape[1]), dtype=np.float64)
        keep = self.anchor_keep
        for a, (lin, nb, wt) in enumerate(
            zip(self.anchor_lin, self.neighbor_lin, self.neighbor_wts)
        ):
            grad_map[lin] += keep * grad_mixed[a]
            grad_map[nb] += (1.0 - keep) * wt[:, None] * grad_mixed[a]
        return grad_map, grad_w, grad_b


@dataclass(frozen=True)
class PropagatedPairResult:
    """Head-space loss plus beta * projected-space loss for one crop pair."""

    value: float
    head_value: float
    projected_value: float
    grad_map_i: np.ndarray = field(repr=False)  # (P, Q)
    grad_map_j: np.ndarray = field(repr=False)
    grad_proj_weight: np.ndarray = field(repr=False)
    grad_proj_bias: np.ndarray = field(repr=False)


def propagated_pair_loss(
    code_map_i: np.ndarray,
    code_map_j: np.ndarray,
    cloud_i: PointCloud,
    cloud_j: PointCloud,
    samples_i: SampleSet,
    samples_j: SampleSet,
    proj: ProjectionParams,
    terms: list[tuple[np.ndarray, LossTermConfig]],
    k_nb: int = 8,
    anchor_keep: float = 0.5,
    beta: float = 1.0,
    weighting: str = "inverse",
) -> PropagatedPairResult:
    """Contrastive terms on raw codes plus the same terms on propagated codes.

    ``terms`` holds (target, cfg) per term; each contributes
    cfg.weight * value on both the raw and the projected codes. Code maps
    are (P, Q) position-major. With beta = 0 the result equals the plain
    pair objective.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    h, w = cloud_i.grid
    lin_i = np.array([r * w + c for r, c in samples_i.indices], dtype=np.int64)
    hj, wj = cloud_j.grid
    lin_j = np.array([r * wj + c for r, c in samples_j.indices], dtype=np.int64)
    u = code_map_i[lin_i]
    v = code_map_j[lin_j]

    head_value = 0.0
    grad_map_i = np.zeros_like(code_map_i)
    grad_map_j = np.zeros_like(code_map_j)
    for target, cfg in terms:
        r = correlation_loss(target, u, v, cfg)
        head_value += cfg.weight * r.value
        np.add.at(grad_map_i, lin_i, cfg.weight * r.grad_i)
        np.add.at(grad_map_j, lin_j, cfg.weight * r.grad_j)

    if beta == 0.0:
        q = code_map_i.shape[1]
        return PropagatedPairResult(
            head_value, head_value, 0.0, grad_map_i, grad_map_j,
            np.zeros((q, q)), np.zeros(q),
        )

    op_i = PropagationOperator(cloud_i, samples_i, k_nb, anchor_keep, weighting)
    op_j = PropagationOperator(cloud_j, samples_j, k_nb, anchor_keep, weighting)
    pu = op_i.forward(code_map_i, proj)
    pv = op_j.forward(code_map_j, proj)

    projected_value = 0.0
    grad_pu = np.zeros_like(pu)
    grad_pv = np.zeros_like(pv)
    for target, cfg in terms:
        r = correlation_loss(target, pu, pv, cfg)
        projected_value += cfg.weight * r.value
        grad_pu += cfg.weight * r.grad_i
        grad_pv += cfg.weight * r.grad_j

    gmap_i, gw_i, gb_i = op_i.backward(beta * grad_pu, proj, code_map_i.shape[0])
    gmap_j, gw_j, gb_j = op_j.backward(beta * grad_pv, proj, code_map_j.shape[0])
    return PropagatedPairResult(
        head_value + beta * projected_value,
        head_value,
        projected_value,
        grad_map_i + gmap_i,
        grad_map_j + gmap_j,
        gw_i + gw_j,
        gb_i + gb_j,
    )
