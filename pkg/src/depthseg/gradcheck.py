"""Finite-difference verification of every analytic gradient in the package.

Each check builds small seeded instances (grid 4x4, feature dim 6, code
dim 5), computes the analytic gradient, and compares against central
differences at h=1e-5 in float64. Instances whose clamp or ReLU arguments
sit within a small margin of their kinks are re-drawn (deterministically)
so the finite-difference quotient is well defined.
"""

from __future__ import annotations

import numpy as np

from .core import Rng, Tensor2
from .losses import (
    LossTermConfig,
    PairInputs,
    combined_loss,
    correlation_loss,
    distillation_loss,
    finite_diff_grad,
    max_relative_error,
)
from .propagation import ProjectionParams, propagated_pair_loss, project
from .sampling import SampleSet, depth_to_pointcloud
from .evaluation import softmax_cross_entropy
from .training import SegHeadParams, seg_head_apply, seg_head_backward

H = W = 4
C = 6
Q = 5
KINK_MARGIN = 1e-3


def _codes(rng: Rng, rows: int, q: int = Q) -> np.ndarray:
    return rng.normals((rows, q))


def _target(rng: Rng, a: int, b: int) -> np.ndarray:
    return rng.uniforms((a, b), -1.0, 1.0)


def _cosine(u, v):
    from .correlation import cosine_matrix

    return cosine_matrix(u, v)


def _clamp_safe(u, v) -> bool:
    return float(np.min(np.abs(_cosine(u, v)))) > KINK_MARGIN


def check_correlation_loss(seed: int) -> float:
    rng = Rng(seed)
    while True:
        u = _codes(rng, H * W)
        v = _codes(rng, H * W)
        if _clamp_safe(u, v):
            break
    t = _target(rng, H * W, H * W)
    cfg = LossTermConfig(weight=1.0, bias=0.07, centering="row")
    res = correlation_loss(t, u, v, cfg)
    err_u = max_relative_error(
        res.grad_i, finite_diff_grad(lambda x: correlation_loss(t, x, v, cfg).value, u)
    )
    err_v = max_relative_error(
        res.grad_j, finite_diff_grad(lambda x: correlation_loss(t, u, x, cfg).value, v)
    )
    return max(err_u, err_v)


def check_depth_loss(seed: int) -> float:
    rng = Rng(seed)
    while True:
        u = _codes(rng, H * W)
        v = _codes(rng, H * W)
        if _clamp_safe(u, v):
            break
    d = np.einsum("i,j->ij", rng.uniforms((H * W,)), rng.uniforms((H * W,)))
    cfg = LossTermConfig(weight=1.0, bias=0.03, centering="none")
    res = correlation_loss(d, u, v, cfg)
    err_u = max_relative_error(
        res.grad_i, finite_diff_grad(lambda x: correlation_loss(d, x, v, cfg).value, u)
    )
    err_v = max_relative_error(
        res.grad_j, finite_diff_grad(lambda x: correlation_loss(d, u, x, cfg).value, v)
    )
    return max(err_u, err_v)


def check_combined_loss(seed: int) -> float:
    rng = Rng(seed)
    a = 9  # sampled positions per side
    while True:
        mats = [_codes(rng, a) for _ in range(6)]
        if all(_clamp_safe(mats[i], mats[i + 1]) for i in (0, 2, 4)):
            break
    targets = [_target(rng, a, a) for _ in range(3)]
    depth_t = np.einsum("i,j->ij", rng.uniforms((a,)), rng.uniforms((a,)))
    cfgs = [
        LossTermConfig(0.58, 0.07, centering="row"),
        LossTermConfig(0.36, 0.02, centering="row"),
        LossTermConfig(0.70, 0.76, centering="row"),
    ]
    depth_cfg = LossTermConfig(0.19, 0.03, centering="none")

    def full(mats):
        distill = distillation_loss(
            PairInputs(targets[0], mats[0], mats[1], cfgs[0]),
            PairInputs(targets[1], mats[2], mats[3], cfgs[1]),
            PairInputs(targets[2], mats[4], mats[5], cfgs[2]),
        )
        depth_res = correlation_loss(depth_t, mats[0], mats[1], depth_cfg)
        return combined_loss(distill, depth_res, depth_cfg.weight)

    result = full(mats)
    analytic = [
        result.grads[0][0], result.grads[0][1],
        result.grads[1][0], result.grads[1][1],
        result.grads[2][0], result.grads[2][1],
    ]
    worst = 0.0
    for i in range(6):
        def value_of(x, i=i):
            probe = list(mats)
            probe[i] = x
            return full(probe).value

        num = finite_diff_grad(value_of, mats[i])
        worst = max(worst, max_relative_error(analytic[i], num))
    return worst


def check_seg_head(seed: int) -> float:
    rng = Rng(seed)
    while True:
        x = rng.normals((H * W, C))
        head = SegHeadParams.init_random(C, Q, C, rng)
        _, pre = seg_head_apply(head, x)
        if float(np.min(np.abs(pre))) > KINK_MARGIN:
            break
    readout = rng.normals((H * W, Q))

    def scalar(params: SegHeadParams) -> float:
        codes, _ = seg_head_apply(params, x)
        return float(np.einsum("pq,pq->", readout, codes))

    codes, pre = seg_head_apply(head, x)
    grads = seg_head_backward(head, x, pre, readout)
    worst = 0.0
    for name, g in grads.items():
        def value_of(arr, name=name):
            d = head.as_dict()
            d[name] = arr
            return scalar(SegHeadParams(**d))

        num = finite_diff_grad(value_of, getattr(head, name))
        worst = max(worst, max_relative_error(g, num))
    return worst


def check_projection(seed: int) -> float:
    rng = Rng(seed)
    params = ProjectionParams.init_random(Q, rng)
    x = rng.normals((C, Q))
    readout = rng.normals((C, Q))

    # analytic gradients of sum(readout * (x @ W^T + b))
    grad_w = np.einsum("ai,aj->ij", readout, x)
    grad_b = readout.sum(axis=0)
    grad_x = np.einsum("ij,ai->aj", params.weight, readout)

    def scalar_w(w):
        return float(np.einsum("aq,aq->", readout, project(ProjectionParams(w, params.bias), x)))

    def scalar_b(b):
        return float(np.einsum("aq,aq->", readout, project(ProjectionParams(params.weight, b), x)))

    def scalar_x(xx):
        return float(np.einsum("aq,aq->", readout, project(params, xx)))

    return max(
        max_relative_error(grad_w, finite_diff_grad(scalar_w, params.weight)),
        max_relative_error(grad_b, finite_diff_grad(scalar_b, params.bias)),
        max_relative_error(grad_x, finite_diff_grad(scalar_x, x)),
    )


def _lhp_instance(seed: int):
    rng = Rng(seed)
    while True:
        depth_i = Tensor2(rng.uniforms((H, W)))
        depth_j = Tensor2(rng.uniforms((H, W)))
        cloud_i = depth_to_pointcloud(depth_i)
        cloud_j = depth_to_pointcloud(depth_j)
        samples = SampleSet.full(H, W)
        map_i = rng.normals((H * W, Q))
        map_j = rng.normals((H * W, Q))
        proj = ProjectionParams.init_random(Q, rng)
        terms = [
            (_target(rng, H * W, H * W), LossTermConfig(0.58, 0.07, centering="row")),
            (
                np.einsum("i,j->ij", depth_i.flat(), depth_j.flat()),
                LossTermConfig(0.19, 0.03, centering="none"),
            ),
        ]
        kwargs = dict(k_nb=3, anchor_keep=0.5, beta=0.7, weighting="inverse")

        def run(mi, mj, pw, pb):
            return propagated_pair_loss(
                mi, mj, cloud_i, cloud_j, samples, samples,
                ProjectionParams(pw, pb), terms, **kwargs
            )

        # margin on raw and projected cosine kinks
        res = run(map_i, map_j, proj.weight, proj.bias)
        u, v = map_i, map_j
        from .propagation import PropagationOperator

        op_i = PropagationOperator(cloud_i, samples, 3, 0.5)
        op_j = PropagationOperator(cloud_j, samples, 3, 0.5)
        pu = op_i.forward(map_i, proj)
        pv = op_j.forward(map_j, proj)
        if (
            _clamp_safe(u, v)
            and float(np.min(np.abs(_cosine(pu, pv)))) > KINK_MARGIN
        ):
            return run, map_i, map_j, proj, res


def check_lhp_loss(seed: int) -> float:
    run, map_i, map_j, proj, res = _lhp_instance(seed)
    checks = [
        (res.grad_map_i, lambda x: run(x, map_j, proj.weight, proj.bias).value, map_i),
        (res.grad_map_j, lambda x: run(map_i, x, proj.weight, proj.bias).value, map_j),
        (res.grad_proj_weight, lambda x: run(map_i, map_j, x, proj.bias).value, proj.weight),
        (res.grad_proj_bias, lambda x: run(map_i, map_j, proj.weight, x).value, proj.bias),
    ]
    worst = 0.0
    for analytic, fn, arg in checks:
        worst = max(worst, max_relative_error(analytic, finite_diff_grad(fn, arg)))
    return worst


def check_cross_entropy(seed: int) -> float:
    rng = Rng(seed)
    n, k = 20, 4
    x = rng.normals((n, Q))
    y = np.array([rng.randint(k) for _ in range(n)], dtype=np.int64)
    w = rng.normals((Q, k)) * 0.3
    b = rng.normals((k,)) * 0.1
    _, gw, gb = softmax_cross_entropy(w, b, x, y)
    err_w = max_relative_error(
        gw, finite_diff_grad(lambda p: softmax_cross_entropy(p, b, x, y)[0], w)
    )
    err_b = max_relative_error(
        gb, finite_diff_grad(lambda p: softmax_cross_entropy(w, p, x, y)[0], b)
    )
    return max(err_w, err_b)


CHECKS = {
    "correlation_loss": check_correlation_loss,
    "depth_correlation_loss": check_depth_loss,
    "combined_loss": check_combined_loss,
    "seg_head_forward": check_seg_head,
    "projection_head": check_projection,
    "propagated_pair_loss": check_lhp_loss,
    "linear_probe_cross_entropy": check_cross_entropy,
}


def run_suite(instances: int = 20, tol: float = 1e-6) -> dict[str, float]:
    """Worst relative error per check over seeded instances."""
    results = {}
    for name, fn in CHECKS.items():
        worst = 0.0
        for seed in range(instances):
            worst = max(worst, fn(seed))
        results[name] = worst
    return results
