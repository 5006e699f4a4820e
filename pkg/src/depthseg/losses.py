"""Scalar objectives and their exact analytic gradients.

Every loss here is a clamped contrastive term of the form

    L = -(1/M) * sum_pq (T'_pq - b) * max(S_pq, 0)

where T is a target correspondence tensor (feature cosines or depth
products), T' its optionally centered form, b a scalar bias, and S the
cosine similarities of the code vectors being trained. M is the entry
count for mean reduction (1 for the literal sum form). Gradients with
respect to the raw code vectors follow the cosine chain rule; entries with
S <= 0 contribute neither value nor gradient (the subgradient of max at 0
is taken as 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .correlation import CorrelationTensor, apply_centering, normalize_rows


@dataclass(frozen=True)
class LossTermConfig:
    """Weight, bias, and structural switches for one contrastive term."""

    weight: float
    bias: float
    centering: str = "none"  # {"none", "row", "row+col"}, applied to the target
    clamp: bool = True
    reduction: str = "mean"  # {"mean", "sum"}

    def __post_init__(self):
        if not np.isfinite(self.weight) or not np.isfinite(self.bias):
            raise ValueError("weight and bias must be finite")
        if self.centering not in ("none", "row", "row+col"):
            raise ValueError(f"unknown centering: {self.centering!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction: {self.reduction!r}")


@dataclass(frozen=True)
class TermResult:
    """Scalar of one term plus gradients on the two code matrices."""

    value: float
    grad_i: np.ndarray = field(repr=False)  # (A, Q)
    grad_j: np.ndarray = field(repr=False)  # (B, Q)


def _as_matrix(target) -> np.ndarray:
    if isinstance(target, CorrelationTensor):
        return target.data
    return np.asarray(target, dtype=np.float64)


def correlation_loss(
    target, codes_i: np.ndarray, codes_j: np.ndarray, cfg: LossTermConfig
) -> TermResult:
    """Clamped contrastive loss of code similarities against a target tensor.

    ``target`` is an (A, B) correspondence tensor; ``codes_i`` (A, Q) and
    ``codes_j`` (B, Q) are the raw code vectors whose cosine matrix is being
    shaped. Returns the scalar and dL/d(codes).
    """
    t = _as_matrix(target)
    u = np.asarray(codes_i, dtype=np.float64)
    v = np.asarray(codes_j, dtype=np.float64)
    if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
        raise ValueError("code matrices must be 2-d with matching width")
    if t.shape != (u.shape[0], v.shape[0]):
        raise ValueError(
            f"target shape {t.shape} does not match codes {(u.shape[0], v.shape[0])}"
        )
    uh, inv_u = normalize_rows(u)
    vh, inv_v = normalize_rows(v)
    s = np.einsum("ik,jk->ij", uh, vh)

    pressure = apply_centering(t, cfg.centering) - cfg.bias
    gate = s > 0.0 if cfg.clamp else np.ones_like(s, dtype=bool)
    s_act = np.where(gate, s, 0.0)
    m = float(t.size) if cfg.reduction == "mean" else 1.0

    value = float(-np.einsum("ij,ij->", pressure, s_act) / m)

    # dL/dS, zero where the clamp deactivates the entry
    dl_ds = np.where(gate, -pressure / m, 0.0)
    # cosine chain rule: d cos(u_p, v_q)/du_p = (v_qh - S_pq * u_ph) / ||u_p||
    row_dot = np.einsum("ij,ij->i", dl_ds, s)
    col_dot = np.einsum("ij,ij->j", dl_ds, s)
    grad_i = (np.einsum("ij,jk->ik", dl_ds, vh) - row_dot[:, None] * uh) * inv_u[:, None]
    grad_j = (np.einsum("ij,ik->jk", dl_ds, uh) - col_dot[:, None] * vh) * inv_v[:, None]
    return TermResult(value, grad_i, grad_j)


def depth_correlation_loss(
    target, codes_i: np.ndarray, codes_j: np.ndarray, cfg: LossTermConfig
) -> TermResult:
    """Correlation loss against a depth-product target (no centering by default)."""
    t = _as_matrix(target)
    if t.min() < 0.0 or t.max() > 1.0:
        raise ValueError("depth correspondence values must lie in [0, 1]")
    return correlation_loss(t, codes_i, codes_j, cfg)


@dataclass(frozen=True)
class PairInputs:
    """One (target, codes_i, codes_j, cfg) contrastive term."""

    target: object
    codes_i: np.ndarray = field(repr=False)
    codes_j: np.ndarray = field(repr=False)
    cfg: LossTermConfig


@dataclass(frozen=True)
class DistillationResult:
    """Weighted sum of the self/knn/random terms with per-pair gradients.

    Gradients already carry the term weights, so they add directly onto the
    code tensors of each pair.
    """

    value: float
    term_values: tuple[float, float, float]  # raw (unweighted) self/knn/random
    grads: tuple[tuple[np.ndarray, np.ndarray], ...]


def distillation_loss(
    self_pair: PairInputs, knn_pair: PairInputs, random_pair: PairInputs
) -> DistillationResult:
    """Weighted feature-distillation objective over the three pair types."""
    pairs = (self_pair, knn_pair, random_pair)
    for p in pairs:
        if p.cfg.weight < 0:
            raise ValueError("term weights must be >= 0")
    values = []
    grads = []
    total = 0.0
    for p in pairs:
        r = correlation_loss(p.target, p.codes_i, p.codes_j, p.cfg)
        values.append(r.value)
        total += p.cfg.weight * r.value
        grads.append((p.cfg.weight * r.grad_i, p.cfg.weight * r.grad_j))
    return DistillationResult(total, tuple(values), tuple(grads))


@dataclass(frozen=True)
class CombinedResult:
    """Distillation plus the weighted depth-guidance term.

    The depth term attaches to the self pair: its (weighted) gradients are
    already added into ``grads[0]``.
    """

    value: float
    term_values: tuple[float, float, float, float]  # self/knn/random/depth, raw
    grads: tuple[tuple[np.ndarray, np.ndarray], ...]


def combined_loss(
    distill: DistillationResult, depth_term: TermResult | None, depth_weight: float
) -> CombinedResult:
    """Full training objective: distillation + depth_weight * depth term."""
    if depth_weight < 0:
        raise ValueError("depth weight must be >= 0")
    if depth_term is None:
        return CombinedResult(
            distill.value, (*distill.term_values, 0.0), distill.grads
        )
    value = distill.value + depth_weight * depth_term.value
    gi, gj = distill.grads[0]
    grads = (
        (gi + depth_weight * depth_term.grad_i, gj + depth_weight * depth_term.grad_j),
        distill.grads[1],
        distill.grads[2],
    )
    return CombinedResult(value, (*distill.term_values, depth_term.value), grads)


def finite_diff_grad(loss_fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    if h <= 0:
        raise ValueError("h must be > 0")
    x = np.ascontiguousarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn(x)
        flat[i] = orig - h
        fm = loss_fn(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("non-finite loss during finite differences")
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |difference| / max(|analytic gradient entry|, 1e-8), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError("gradient shape mismatch")
    denom = np.maximum(np.abs(a), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def finite_diff_check(loss_fn, x: np.ndarray, analytic: np.ndarray, h: float = 1e-5) -> float:
    """Compare an analytic gradient against central differences.

    Returns the max relative error over all entries of ``x``.
    """
    numeric = finite_diff_grad(loss_fn, np.array(x, dtype=np.float64), h)
    return max_relative_error(analytic, numeric)


def scaled_bias_variant(cfg: LossTermConfig, alpha: float) -> LossTermConfig:
    """Config whose (target - bias) pressure is alpha times the original's.

    Useful with an alpha-scaled target for exactness checks; exact in
    floating point when alpha is a power of two.
    """
    return replace(cfg, bias=alpha * cfg.bias)
