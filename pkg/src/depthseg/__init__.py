"""Depth-guided contrastive feature distillation for unsupervised segmentation.

Operates on precomputed feature/depth tensors: builds feature, code and
depth correspondence tensors, trains a small segmentation head with
manually differentiated clamped contrastive losses (optionally propagated
to 3D-nearest patches), samples feature locations by farthest point
sampling over depth-derived point clouds, and evaluates with cluster and
linear probes.
"""

from .core import (
    EPS_NORM,
    GridIndex,
    Rng,
    Tensor2,
    Tensor3,
    avg_pool_to,
    cosine_similarity,
    rng_new,
    rng_uniform,
)
from .correlation import (
    CorrelationTensor,
    center_rows,
    depth_correlation,
    feature_correlation,
)
from .sampling import (
    PointCloud,
    SampleSet,
    depth_to_pointcloud,
    farthest_point_sample,
    random_sample,
)
from .losses import (
    LossTermConfig,
    PairInputs,
    TermResult,
    combined_loss,
    correlation_loss,
    depth_correlation_loss,
    distillation_loss,
    finite_diff_check,
    finite_diff_grad,
    max_relative_error,
)
from .propagation import (
    NeighborSet,
    ProjectionParams,
    knn3d,
    project,
    propagate_mix,
    propagated_pair_loss,
)
from .training import (
    AdamState,
    Crop,
    Dataset,
    Schedule,
    SegHeadParams,
    TrainConfig,
    TrainResult,
    adam_step,
    config_digest,
    knn_pairs,
    schedule_value,
    seg_head_apply,
    seg_head_backward,
    seg_head_forward,
    train,
)
from .evaluation import (
    Assignment,
    ConfusionMatrix,
    cluster_probe,
    hungarian,
    kmeans,
    linear_probe,
    metrics,
)
from .dataio import (
    SynthConfig,
    gen_synthetic,
    generate_synthetic,
    load_manifest,
    read_checkpoint,
    read_tensor,
    write_checkpoint,
    write_manifest,
    write_overlay,
    write_tensor,
)

__version__ = "0.1.0"
