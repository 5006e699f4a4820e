"""Segmentation head, optimizer, guidance scheduling, and the training loop.

The backbone is frozen by construction: features arrive precomputed, and
only the segmentation head (plus the optional projection head) is trained.
Every source of randomness is a named child stream of the run seed, so a
run is fully reproducible from (config, seed).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from .core import Rng, Tensor2, Tensor3, cosine_similarity
from .correlation import depth_correlation, feature_correlation
from .losses import (
    LossTermConfig,
    PairInputs,
    combined_loss,
    correlation_loss,
    depth_correlation_loss,
    distillation_loss,
)
from .propagation import ProjectionParams, propagated_pair_loss
from .sampling import (
    SampleSet,
    depth_to_pointcloud,
    farthest_point_sample,
    pairwise_sq_dists,
    random_sample,
)


@dataclass
class SegHeadParams:
    """Two-path head: a linear C->Q map summed with a small ReLU MLP."""

    w_lin: np.ndarray = field(repr=False)  # (C, Q)
    b_lin: np.ndarray = field(repr=False)  # (Q,)
    w1: np.ndarray = field(repr=False)  # (C, C_h)
    b1: np.ndarray = field(repr=False)  # (C_h,)
    w2: np.ndarray = field(repr=False)  # (C_h, Q)
    b2: np.ndarray = field(repr=False)  # (Q,)

    def __post_init__(self):
        for f in fields(self):
            arr = np.asarray(getattr(self, f.name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {f.name}")
            setattr(self, f.name, arr)
        if self.w_lin.shape[1] < 2:
            raise ValueError("code dimension Q must be >= 2")

    @property
    def in_dim(self) -> int:
        return self.w_lin.shape[0]

    @property
    def code_dim(self) -> int:
        return self.w_lin.shape[1]

    @staticmethod
    def init_random(c: int, q: int, c_hidden: int, rng: Rng) -> "SegHeadParams":
        def glorot(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniforms((fan_in, fan_out), -limit, limit)

        return SegHeadParams(
            glorot(c, q), np.zeros(q),
            glorot(c, c_hidden), np.zeros(c_hidden),
            glorot(c_hidden, q), np.zeros(q),
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def seg_head_apply(params: SegHeadParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward on a (P, C) feature matrix; returns (codes (P, Q), hidden pre-acts)."""
    if x.shape[1] != params.in_dim:
        raise ValueError(f"feature dim {x.shape[1]} != head input dim {params.in_dim}")
    pre = np.einsum("pc,ch->ph", x, params.w1) + params.b1
    hidden = np.maximum(pre, 0.0)
    codes = (
        np.einsum("pc,cq->pq", x, params.w_lin)
        + params.b_lin
        + np.einsum("ph,hq->pq", hidden, params.w2)
        + params.b2
    )
    return codes, pre


def seg_head_forward(params: SegHeadParams, f: Tensor3) -> Tensor3:
    """Forward on a C x H x W feature map; returns the Q x H x W code map."""
    codes, _ = seg_head_apply(params, f.positions_matrix())
    return Tensor3(codes.T.reshape(params.code_dim, f.height, f.width))


def seg_head_backward(
    params: SegHeadParams, x: np.ndarray, pre: np.ndarray, grad_codes: np.ndarray
) -> dict[str, np.ndarray]:
    """Parameter gradients given dL/d(codes); the frozen features get none."""
    grads = {
        "w_lin": np.einsum("pc,pq->cq", x, grad_codes),
        "b_lin": grad_codes.sum(axis=0),
        "w2": np.einsum("ph,pq->hq", np.maximum(pre, 0.0), grad_codes),
        "b2": grad_codes.sum(axis=0),
    }
    grad_hidden = np.einsum("pq,hq->ph", grad_codes, params.w2) * (pre > 0.0)
    grads["w1"] = np.einsum("pc,ph->ch", x, grad_hidden)
    grads["b1"] = grad_hidden.sum(axis=0)
    return grads


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @staticmethod
    def zeros_like(params: dict[str, np.ndarray]) -> "AdamState":
        return AdamState(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update, in place, deterministic key order."""
    state.step += 1
    t = state.step
    for k in sorted(params):
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape mismatch for {k!r}")
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = state.m[k] / (1.0 - beta1**t)
        v_hat = state.v[k] / (1.0 - beta2**t)
        params[k] -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass(frozen=True)
class Schedule:
    """Stepwise exponential decay: base * factor ** floor(t / decay_step)."""

    base: float
    decay_step: int | None = None
    decay_factor: float | None = None

    def __post_init__(self):
        if (self.decay_step is None) != (self.decay_factor is None):
            raise ValueError("decay_step and decay_factor must be set together")
        if self.decay_step is not None and self.decay_step < 1:
            raise ValueError("decay_step must be >= 1")
        if self.decay_factor is not None and not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must lie in (0, 1]")

    def value(self, t: int) -> float:
        if t < 0:
            raise ValueError("step must be >= 0")
        if self.decay_step is None:
            return self.base
        return self.base * self.decay_factor ** (t // self.decay_step)


def schedule_value(s: Schedule, t: int) -> float:
    return s.value(t)


def knn_pairs(
    features: list[Tensor3], k: int, exclude_groups: list[int] | None = None
) -> list[list[int]]:
    """k most cosine-similar items per item, by mean-pooled feature vector.

    ``exclude_groups`` removes same-group items (e.g. crops of the same
    image) from each item's candidate pool. Ties break toward the lower
    index.
    """
    n = len(features)
    if n < 2:
        raise ValueError("need at least 2 items")
    pooled = [f.positions_matrix().mean(axis=0) for f in features]
    out = []
    for i in range(n):
        candidates = [
            j
            for j in range(n)
            if j != i
            and (exclude_groups is None or exclude_groups[j] != exclude_groups[i])
        ]
        if k > len(candidates):
            raise ValueError(f"k={k} exceeds candidate pool of item {i}")
        sims = [(-cosine_similarity(pooled[i], pooled[j]), j) for j in candidates]
        sims.sort()
        out.append([j for _, j in sims[:k]])
    return out


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of the training loop (defaults follow the reference recipe)."""

    lambda_self: float = 0.58
    lambda_knn: float = 0.36
    lambda_random: float = 0.70
    lambda_depth: float = 0.19
    bias_self: float = 0.07
    bias_knn: float = 0.02
    bias_random: float = 0.76
    bias_depth: float = 0.03
    depth_decay_step: int | None = 250
    depth_decay_factor: float | None = 0.6
    n_samples: int = 9  # N; N^2 locations are sampled per crop
    n_decay_step: int | None = None  # reduce N by n_decay_amount every this many steps
    n_decay_amount: int = 1
    sampler: str = "fps"  # {"fps", "random", "full-map"}
    depth_scale: float = 1.0
    fps_init: str = "random"  # {"random", "zero"}
    centering: str = "row"  # applied to feature targets; depth targets get none
    reduction: str = "mean"
    clamp: bool = True
    lhp: bool = False
    lhp_neighbors: int = 8
    lhp_anchor_keep: float = 0.5
    lhp_beta: float = 1.0
    lhp_weighting: str = "inverse"
    code_dim: int = 64
    hidden_dim: int | None = None  # defaults to the feature dim C
    knn_k: int = 3
    lr: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    steps: int = 7000
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.sampler not in ("fps", "random", "full-map"):
            raise ValueError(f"unknown sampler: {self.sampler!r}")
        if self.fps_init not in ("random", "zero"):
            raise ValueError(f"unknown fps_init: {self.fps_init!r}")
        if min(self.lambda_self, self.lambda_knn, self.lambda_random, self.lambda_depth) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def depth_weight_schedule(self) -> Schedule:
        return Schedule(self.lambda_depth, self.depth_decay_step, self.depth_decay_factor)

    def depth_bias_schedule(self) -> Schedule:
        return Schedule(self.bias_depth, self.depth_decay_step, self.depth_decay_factor)

    def samples_per_side(self, t: int) -> int:
        n = self.n_samples
        if self.n_decay_step is not None:
            n = max(1, n - self.n_decay_amount * (t // self.n_decay_step))
        return n

    def term_cfg(self, kind: str, t: int = 0) -> LossTermConfig:
        biases = {"self": self.bias_self, "knn": self.bias_knn, "random": self.bias_random}
        weights = {"self": self.lambda_self, "knn": self.lambda_knn, "random": self.lambda_random}
        if kind == "depth":
            return LossTermConfig(
                weight=self.depth_weight_schedule().value(t),
                bias=self.depth_bias_schedule().value(t),
                centering="none",
                clamp=self.clamp,
                reduction=self.reduction,
            )
        return LossTermConfig(
            weight=weights[kind],
            bias=biases[kind],
            centering=self.centering,
            clamp=self.clamp,
            reduction=self.reduction,
        )


@dataclass
class Crop:
    """One precomputed crop: frozen features, depth, optional labels."""

    image_id: str
    crop_id: str
    features: Tensor3
    depth: Tensor2
    labels: np.ndarray | None = None  # (H, W) uint8, 255 = ignore
    knn: list[int] | None = None  # global crop indices, highest similarity first


@dataclass
class Dataset:
    """A loaded manifest: crops grouped by image."""

    crops: list[Crop]

    def __post_init__(self):
        self.images: list[str] = []
        self.by_image: dict[str, list[int]] = {}
        for i, c in enumerate(self.crops):
            if c.image_id not in self.by_image:
                self.by_image[c.image_id] = []
                self.images.append(c.image_id)
            self.by_image[c.image_id].append(i)
        for img, idxs in self.by_image.items():
            if len(idxs) < 2:
                raise ValueError(f"image {img!r} has fewer than 2 crops")

    @property
    def grid(self) -> tuple[int, int]:
        f = self.crops[0].features
        return f.height, f.width

    @property
    def feature_dim(self) -> int:
        return self.crops[0].features.channels


def format_log_record(step: int, depth_w: float, depth_b: float, comps: dict) -> str:
    """One metrics-log line; float repr keeps records byte-reproducible."""
    parts = [
        f"step={step}",
        f"depth_weight={depth_w!r}",
        f"depth_bias={depth_b!r}",
        f"loss_self={comps['self']!r}",
        f"loss_knn={comps['knn']!r}",
        f"loss_random={comps['random']!r}",
        f"loss_depth={comps['depth']!r}",
        f"loss_total={comps['total']!r}",
    ]
    return " ".join(parts)


def config_digest(cfg: TrainConfig) -> str:
    """Hex digest of the canonical config serialization, seed excluded."""
    lines = []
    for f in fields(cfg):
        if f.name == "seed":
            continue
        lines.append(f"{f.name}={getattr(cfg, f.name)!r}")
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


@dataclass
class TrainResult:
    head: SegHeadParams
    proj: ProjectionParams | None
    log_lines: list[str]
    final_loss: float


class _StepContext:
    """Per-run machinery shared by all steps (streams, caches, schedules)."""

    def __init__(self, cfg: TrainConfig, ds: Dataset):
        self.cfg = cfg
        self.ds = ds
        root = Rng(cfg.seed)
        self.rng_head = root.spawn(1)
        self.rng_proj = root.spawn(2)
        self.rng_order = root.spawn(3)
        self.rng_pairs = root.spawn(4)
        self.rng_fps = root.spawn(5)
        self.rng_sampling = root.spawn(6)
        self.order = list(ds.images)
        self.rng_order.shuffle(self.order)
        self.clouds = [
            depth_to_pointcloud(c.depth, cfg.depth_scale) for c in ds.crops
        ]
        self._dist_sq: dict[int, np.ndarray] = {}
        self.w_sched = cfg.depth_weight_schedule()
        self.b_sched = cfg.depth_bias_schedule()

    def dist_sq(self, crop_idx: int) -> np.ndarray:
        if crop_idx not in self._dist_sq:
            self._dist_sq[crop_idx] = pairwise_sq_dists(self.clouds[crop_idx])
        return self._dist_sq[crop_idx]

    def draw_pairs(self, t: int) -> tuple[int, int, int, int]:
        """Crop indices (self_a, self_b, knn, random) for step t."""
        ds = self.ds
        image = self.order[t % len(self.order)]
        crops = ds.by_image[image]
        a_pos = self.rng_pairs.randint(len(crops))
        b_pos = self.rng_pairs.randint(len(crops) - 1)
        if b_pos >= a_pos:
            b_pos += 1
        a, b = crops[a_pos], crops[b_pos]
        knn_list = ds.crops[a].knn
        c = knn_list[self.rng_pairs.randint(len(knn_list))]
        while True:
            d = self.rng_pairs.randint(len(ds.crops))
            if ds.crops[d].image_id != image:
                break
        return a, b, c, d

    def draw_samples(self, crop_idx: int, t: int) -> SampleSet | None:
        cfg = self.cfg
        h, w = self.ds.grid
        if cfg.sampler == "full-map":
            return None
        k = min(cfg.samples_per_side(t) ** 2, h * w)
        if cfg.sampler == "random":
            return random_sample(h, w, k, self.rng_sampling)
        cloud = self.clouds[crop_idx]
        init = 0 if cfg.fps_init == "zero" else self.rng_fps.randint(len(cloud))
        return farthest_point_sample(cloud, k, init, pairwise_sq=self.dist_sq(crop_idx))


def train(cfg: TrainConfig, ds: Dataset) -> TrainResult:
    """Run the full training loop; deterministic per (config, seed).

    Each step draws a self pair (two crops of one image), a knn pair and a
    random pair, samples locations per the configured sampler, assembles the
    combined objective with the scheduled depth weight/bias, and applies one
    Adam update (averaged over ``batch_size`` draws).
    """
    if len(ds.images) < 2:
        raise ValueError("training needs at least 2 images (for random pairs)")
    _ensure_knn(ds, cfg.knn_k)
    ctx = _StepContext(cfg, ds)
    c = ds.feature_dim
    c_h = cfg.hidden_dim if cfg.hidden_dim is not None else c
    head = SegHeadParams.init_random(c, cfg.code_dim, c_h, ctx.rng_head)
    proj = ProjectionParams.init_random(cfg.code_dim, ctx.rng_proj) if cfg.lhp else None

    params = head.as_dict()
    if proj is not None:
        params["proj_weight"] = proj.weight
        params["proj_bias"] = proj.bias
    state = AdamState.zeros_like(params)

    log_lines: list[str] = []
    final_loss = 0.0
    for t in range(cfg.steps):
        depth_w = ctx.w_sched.value(t)
        depth_b = ctx.b_sched.value(t)
        grads = {k: np.zeros_like(p) for k, p in params.items()}
        comps_acc = {"self": 0.0, "knn": 0.0, "random": 0.0, "depth": 0.0, "total": 0.0}
        for _ in range(cfg.batch_size):
            comps = _accumulate_step(ctx, head, proj, t, grads)
            for key in comps_acc:
                comps_acc[key] += comps[key]
        if cfg.batch_size > 1:
            for k in grads:
                grads[k] /= cfg.batch_size
            for key in comps_acc:
                comps_acc[key] /= cfg.batch_size
        adam_step(params, grads, state, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        final_loss = comps_acc["total"]
        if not np.isfinite(final_loss):
            raise FloatingPointError(f"non-finite loss at step {t}: {comps_acc}")
        log_lines.append(format_log_record(t, depth_w, depth_b, comps_acc))
    return TrainResult(head, proj, log_lines, final_loss)


def _ensure_knn(ds: Dataset, k: int) -> None:
    if all(c.knn for c in ds.crops):
        return
    groups = []
    group_of = {img: i for i, img in enumerate(ds.images)}
    for c in ds.crops:
        groups.append(group_of[c.image_id])
    lists = knn_pairs([c.features for c in ds.crops], k, exclude_groups=groups)
    for c, lst in zip(ds.crops, lists):
        if not c.knn:
            c.knn = lst


def _accumulate_step(
    ctx: _StepContext,
    head: SegHeadParams,
    proj: ProjectionParams | None,
    t: int,
    grads: dict[str, np.ndarray],
) -> dict:
    """One draw of the objective; adds parameter gradients into ``grads``."""
    cfg = ctx.cfg
    ds = ctx.ds
    a, b, c_idx, d_idx = ctx.draw_pairs(t)
    crop_ids = sorted(set([a, b, c_idx, d_idx]))
    samples = {i: ctx.draw_samples(i, t) for i in crop_ids}

    feats = {i: ds.crops[i].features.positions_matrix() for i in crop_ids}
    fwd = {i: seg_head_apply(head, feats[i]) for i in crop_ids}
    h, w = ds.grid

    def lin(sample_set):
        if sample_set is None:
            return np.arange(h * w)
        return np.array([r * w + cc for r, cc in sample_set.indices], dtype=np.int64)

    lins = {i: lin(samples[i]) for i in crop_ids}
    codes = {i: fwd[i][0] for i in crop_ids}

    def feature_target(i, j):
        return feature_correlation(
            ds.crops[i].features, ds.crops[j].features, samples[i], samples[j]
        )

    pairs = {
        "self": (a, b, feature_target(a, b)),
        "knn": (a, c_idx, feature_target(a, c_idx)),
        "random": (a, d_idx, feature_target(a, d_idx)),
    }

    grad_maps = {i: np.zeros_like(codes[i]) for i in crop_ids}
    comps = {}
    total = 0.0

    use_depth = cfg.lambda_depth > 0.0
    depth_cfg = ctx.cfg.term_cfg("depth", t) if use_depth else None
    depth_target = (
        depth_correlation(ds.crops[a].depth, ds.crops[b].depth, samples[a], samples[b])
        if use_depth
        else None
    )

    if cfg.lhp and proj is not None:
        # self pair goes through propagation; depth term rides along
        terms = [(pairs["self"][2].data, cfg.term_cfg("self", t))]
        if use_depth:
            terms.append((depth_target.data, depth_cfg))
        r = propagated_pair_loss(
            codes[a], codes[b],
            ctx.clouds[a], ctx.clouds[b],
            samples[a] or SampleSet.full(h, w), samples[b] or SampleSet.full(h, w),
            proj,
            terms,
            k_nb=cfg.lhp_neighbors,
            anchor_keep=cfg.lhp_anchor_keep,
            beta=cfg.lhp_beta,
            weighting=cfg.lhp_weighting,
        )
        grad_maps[a] += r.grad_map_i
        grad_maps[b] += r.grad_map_j
        grads["proj_weight"] += r.grad_proj_weight
        grads["proj_bias"] += r.grad_proj_bias
        total += r.value
        # raw per-term values for the log
        self_r = correlation_loss(
            pairs["self"][2].data, codes[a][lins[a]], codes[b][lins[b]], cfg.term_cfg("self", t)
        )
        comps["self"] = self_r.value
        comps["depth"] = (
            depth_correlation_loss(
                depth_target.data, codes[a][lins[a]], codes[b][lins[b]], depth_cfg
            ).value
            if use_depth
            else 0.0
        )
        for kind in ("knn", "random"):
            i, j, target = pairs[kind]
            term_cfg = cfg.term_cfg(kind, t)
            res = correlation_loss(target.data, codes[i][lins[i]], codes[j][lins[j]], term_cfg)
            comps[kind] = res.value
            total += term_cfg.weight * res.value
            np.add.at(grad_maps[i], lins[i], term_cfg.weight * res.grad_i)
            np.add.at(grad_maps[j], lins[j], term_cfg.weight * res.grad_j)
    else:
        term_inputs = {}
        for kind in ("self", "knn", "random"):
            i, j, target = pairs[kind]
            term_inputs[kind] = PairInputs(
                target.data, codes[i][lins[i]], codes[j][lins[j]], cfg.term_cfg(kind, t)
            )
        distill = distillation_loss(
            term_inputs["self"], term_inputs["knn"], term_inputs["random"]
        )
        depth_res = (
            depth_correlation_loss(
                depth_target.data,
                codes[a][lins[a]],
                codes[b][lins[b]],
                depth_cfg,
            )
            if use_depth
            else None
        )
        full = combined_loss(distill, depth_res, depth_cfg.weight if use_depth else 0.0)
        total += full.value
        comps["self"], comps["knn"], comps["random"] = distill.term_values
        comps["depth"] = full.term_values[3]
        for kind, (gi, gj) in zip(("self", "knn", "random"), full.grads):
            i, j, _ = pairs[kind]
            np.add.at(grad_maps[i], lins[i], gi)
            np.add.at(grad_maps[j], lins[j], gj)

    for i in crop_ids:
        if np.any(grad_maps[i]):
            for k, g in seg_head_backward(head, feats[i], fwd[i][1], grad_maps[i]).items():
                grads[k] += g

    comps["total"] = total
    return comps
