"""Unsupervised evaluation: cluster probe, Hungarian alignment, linear probe.

The cluster probe runs spherical k-means on the code vectors (the training
objective is cosine-based), aligns predicted clusters to ground-truth
classes with an optimal injective assignment maximized over the global
confusion matrix, and reports accuracy and mIoU. The linear probe trains a
multinomial logistic classifier on frozen codes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Rng
from .correlation import normalize_rows
from .training import AdamState, adam_step

IGNORE_LABEL = 255


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[p, g] = pixels predicted as cluster p with ground-truth class g."""

    counts: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.ndim != 2 or np.any(arr < 0):
            raise ValueError("confusion matrix must be 2-d with non-negative counts")
        object.__setattr__(self, "counts", arr)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @staticmethod
    def from_labels(pred: np.ndarray, gt: np.ndarray, k_pred: int, k_gt: int) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        keep = gt != IGNORE_LABEL
        pred, gt = pred[keep], gt[keep]
        idx = pred.astype(np.int64) * k_gt + gt.astype(np.int64)
        counts = np.bincount(idx, minlength=k_pred * k_gt).reshape(k_pred, k_gt)
        return ConfusionMatrix(counts)


@dataclass(frozen=True)
class Assignment:
    """Injective map from predicted-cluster index to ground-truth class index."""

    mapping: tuple[int, ...]  # mapping[p] = gt class, or -1 for unassigned clusters

    def __post_init__(self):
        assigned = [m for m in self.mapping if m >= 0]
        if len(set(assigned)) != len(assigned):
            raise ValueError("assignment must be injective")


def _lexicographic_refine(cost: np.ndarray, best: float) -> list[int]:
    """Smallest assignment in lexicographic order among all optima.

    Fixes rows one by one: for each row, take the smallest column whose
    forced choice still admits an optimal completion. Exact for integer
    costs; a no-op when the optimum is unique.
    """
    k = cost.shape[0]
    rows = list(range(k))
    free_cols = list(range(k))
    chosen: list[int] = []
    remaining = cost.copy()
    target = best
    for _ in rows:
        found = None
        for ci, col in enumerate(free_cols):
            sub = np.delete(remaining[1:], ci, axis=1)
            rest = 0.0
            if sub.size:
                ri, cj = linear_sum_assignment(sub, maximize=True)
                rest = float(sub[ri, cj].sum())
            if float(remaining[0, ci]) + rest == target:
                found = (ci, col, rest)
                break
        if found is None:  # float ties without exact equality: keep solver's pick
            ri, cj = linear_sum_assignment(remaining, maximize=True)
            order = np.argsort(ri)
            for r, c in zip(ri[order], cj[order]):
                chosen.append(free_cols[int(c)])
            return chosen
        ci, col, rest = found
        chosen.append(col)
        target = rest
        remaining = np.delete(remaining[1:], ci, axis=1)
        free_cols.pop(ci)
    return chosen


def hungarian(cost, maximize: bool = True) -> Assignment:
    """Optimal injective assignment over a cost matrix.

    Rectangular inputs are zero-padded to square. Ties between co-optimal
    assignments break toward lexicographically smallest mapping (exact for
    integer costs, e.g. confusion matrices).
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a matrix")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    n_rows, n_cols = c.shape
    k = max(n_rows, n_cols)
    sq = np.zeros((k, k), dtype=np.float64)
    sq[:n_rows, :n_cols] = c if maximize else -c
    ri, cj = linear_sum_assignment(sq, maximize=True)
    best = float(sq[ri, cj].sum())
    cols = _lexicographic_refine(sq, best)
    mapping = tuple(cols[p] if cols[p] < n_cols else -1 for p in range(n_rows))
    return Assignment(mapping)


def metrics(conf: ConfusionMatrix, assign: Assignment) -> tuple[float, float, list[float]]:
    """(accuracy, mIoU, per-class IoU) under a cluster-to-class alignment.

    Accuracy is matched diagonal mass over all evaluated pixels. IoU is
    TP/(TP+FP+FN) per ground-truth class; mIoU averages over the classes
    present. Unassigned predicted clusters count entirely as errors.
    """
    counts = conf.counts
    if counts.size == 0 or conf.total == 0:
        raise ValueError("empty confusion matrix")
    k_pred, k_gt = counts.shape
    if len(assign.mapping) != k_pred:
        raise ValueError("assignment does not match confusion matrix")
    tp = np.zeros(k_gt, dtype=np.int64)
    fp = np.zeros(k_gt, dtype=np.int64)
    for p, g in enumerate(assign.mapping):
        if g < 0:
            continue
        tp[g] += counts[p, g]
        fp[g] += counts[p].sum() - counts[p, g]
    gt_total = counts.sum(axis=0)
    fn = gt_total - tp
    accuracy = float(tp.sum()) / float(conf.total)
    present = gt_total > 0
    iou = np.zeros(k_gt, dtype=np.float64)
    denom = tp + fp + fn
    nonzero = denom > 0
    iou[nonzero] = tp[nonzero] / denom[nonzero]
    miou = float(iou[present].mean()) if present.any() else 0.0
    return accuracy, miou, [float(x) for x in iou]


def kmeans(
    codes: np.ndarray, k: int, iters: int = 50, rng: Rng | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Spherical k-means via Lloyd iterations on unit-normalized codes.

    k-means++ initialization from the supplied stream; empty clusters are
    re-seeded from the point farthest from its assigned centroid. Returns
    (centroids (k, Q) unit rows, labels (n,)).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(codes, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("codes must be (n, Q)")
    n = x.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds {n} points")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = rng if rng is not None else Rng(0)
    xh, _ = normalize_rows(x)

    centroids = _kmeanspp_init(xh, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        sims = np.einsum("nq,kq->nk", xh, centroids)
        new_labels = np.argmax(sims, axis=1)  # first max = lowest cluster index
        assigned_sim = sims[np.arange(n), new_labels]
        for c in range(k):
            members = new_labels == c
            if not members.any():
                far = int(np.argmin(assigned_sim))
                new_labels[far] = c
                assigned_sim[far] = np.inf  # one reseed per point per sweep
        changed = bool(np.any(new_labels != labels))
        labels = new_labels
        for c in range(k):
            mean = xh[labels == c].sum(axis=0)
            norm = float(np.sqrt(np.einsum("i,i->", mean, mean)))
            if norm > 0:
                centroids[c] = mean / norm
        if not changed:
            break
    return centroids, labels


def _kmeanspp_init(xh: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = xh.shape[0]
    first = rng.randint(n)
    centroids = [xh[first].copy()]
    d2 = _sq_dist_to(xh, centroids[0])
    for _ in range(k - 1):
        total = float(d2.sum())
        if total <= 0.0:
            # all points coincide with chosen centroids: lowest-index fallback
            idx = int(np.argmax(d2 == d2.max()))
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
        centroids.append(xh[idx].copy())
        d2 = np.minimum(d2, _sq_dist_to(xh, centroids[-1]))
    return np.stack(centroids)


def _sq_dist_to(xh: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = xh - c
    return np.einsum("ij,ij->i", diff, diff)


def cluster_probe(
    codes: np.ndarray,
    labels: np.ndarray,
    k_gt: int,
    k_pred: int | None = None,
    iters: int = 50,
    rng: Rng | None = None,
) -> dict:
    """k-means + Hungarian alignment + metrics, in one call.

    ``labels`` are per-vector ground-truth classes (IGNORE_LABEL excluded
    from the confusion matrix but still clustered).
    """
    k_pred = k_pred if k_pred is not None else k_gt
    _, pred = kmeans(codes, k_pred, iters, rng)
    conf = ConfusionMatrix.from_labels(pred, labels, k_pred, k_gt)
    assign = hungarian(conf.counts, maximize=True)
    accuracy, miou, iou = metrics(conf, assign)
    return {
        "accuracy": accuracy,
        "miou": miou,
        "iou": iou,
        "confusion": conf,
        "assignment": assign,
        "pred": pred,
    }


@dataclass
class LinearProbeParams:
    weight: np.ndarray = field(repr=False)  # (Q, K)
    bias: np.ndarray = field(repr=False)  # (K,)


def softmax_cross_entropy(
    w: np.ndarray, b: np.ndarray, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy of logits x@w + b, with gradients on (w, b)."""
    logits = np.einsum("nq,qk->nk", x, w) + b
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    n = x.shape[0]
    nll = -np.log(np.maximum(probs[np.arange(n), y], 1e-300))
    value = float(nll.mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grad_w = np.einsum("nq,nk->qk", x, dlogits)
    grad_b = dlogits.sum(axis=0)
    return value, grad_w, grad_b


def linear_probe(
    train_codes: np.ndarray,
    train_labels: np.ndarray,
    eval_codes: np.ndarray,
    eval_labels: np.ndarray,
    k_gt: int,
    lr: float = 5e-3,
    steps: int = 200,
    rng: Rng | None = None,
) -> tuple[float, float]:
    """Multinomial logistic regression on frozen codes; returns (accuracy, mIoU)."""
    rng = rng if rng is not None else Rng(0)
    x = np.asarray(train_codes, dtype=np.float64)
    y = np.asarray(train_labels).reshape(-1).astype(np.int64)
    keep = y != IGNORE_LABEL
    x, y = x[keep], y[keep]
    if x.shape[0] == 0 or len(np.unique(y)) < 2:
        raise ValueError("training set must contain at least 2 classes")
    q = x.shape[1]
    limit = np.sqrt(6.0 / (q + k_gt))
    params = {"weight": rng.uniforms((q, k_gt), -limit, limit), "bias": np.zeros(k_gt)}
    state = AdamState.zeros_like(params)
    for _ in range(steps):
        _, gw, gb = softmax_cross_entropy(params["weight"], params["bias"], x, y)
        adam_step(params, {"weight": gw, "bias": gb}, state, lr)
    ex = np.asarray(eval_codes, dtype=np.float64)
    ey = np.asarray(eval_labels).reshape(-1).astype(np.int64)
    keep = ey != IGNORE_LABEL
    ex, ey = ex[keep], ey[keep]
    logits = np.einsum("nq,qk->nk", ex, params["weight"]) + params["bias"]
    pred = np.argmax(logits, axis=1)
    conf = ConfusionMatrix.from_labels(pred, ey, k_gt, k_gt)
    accuracy, miou, _ = metrics(conf, Assignment(tuple(range(k_gt))))
    return accuracy, miou
