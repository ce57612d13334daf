"""Online class-incremental continual learning at desk scale.

The package streams labelled data class-group by class-group, trains a
single growing-head model in one pass per task, and compares replay-based
methods against forgetting floors and joint-training ceilings. The main
entry points are :class:`ContinualClassifier` for a single run and
:func:`run_experiment` for full method x seed grids.
"""

from .augment import (
    AugmentPolicy,
    augment_features,
    augment_image,
    gaussian_blur,
    make_contrastive_batch,
)
from .cluster import (
    AffinityGraph,
    ClusterAssignment,
    PowerIterationClustering,
    build_affinity_graph,
    cluster_class,
    extract_clusters,
    power_iteration_vector,
)
from .datasets import (
    Sample,
    StreamPartition,
    TaskSchedule,
    build_schedule,
    export_feature_csv,
    generate_blob_stream,
    ingest_feature_csv,
    ingest_idx_images,
    payload_matrix,
)
from .experiment import (
    PRESETS,
    ExperimentConfig,
    MethodSpec,
    config_hash,
    load_config,
    run_budget_sweep,
    run_cell,
    run_experiment,
)
from .learners import (
    ContinualClassifier,
    compose_balanced_batch,
    ncm_scores,
    predict_ncm,
)
from .memory import (
    ExemplarMemory,
    cluster_unit_features,
    draw_replay,
    greedy_balanced_update,
    reservoir_update,
    select_cluster_exemplars,
    select_herding_exemplars,
    select_random_exemplars,
)
from .metrics import (
    RunMetrics,
    aggregate_seeds,
    evaluate_step,
    read_metrics_csv,
    top_k_hits,
    write_metrics_csv,
    write_metrics_json,
)
from .net import (
    GrowableNet,
    LossConfig,
    cross_distillation_loss,
    cross_entropy_loss,
    distillation_loss,
    load_checkpoint,
    save_checkpoint,
    softened_probs,
    train_batch,
)

__version__ = "0.1.0"

__all__ = [
    "AffinityGraph",
    "AugmentPolicy",
    "ClusterAssignment",
    "ContinualClassifier",
    "ExemplarMemory",
    "ExperimentConfig",
    "GrowableNet",
    "LossConfig",
    "MethodSpec",
    "PRESETS",
    "PowerIterationClustering",
    "RunMetrics",
    "Sample",
    "StreamPartition",
    "TaskSchedule",
    "aggregate_seeds",
    "augment_features",
    "augment_image",
    "build_affinity_graph",
    "build_schedule",
    "cluster_class",
    "cluster_unit_features",
    "compose_balanced_batch",
    "config_hash",
    "cross_distillation_loss",
    "cross_entropy_loss",
    "distillation_loss",
    "draw_replay",
    "evaluate_step",
    "export_feature_csv",
    "extract_clusters",
    "gaussian_blur",
    "generate_blob_stream",
    "greedy_balanced_update",
    "ingest_feature_csv",
    "ingest_idx_images",
    "load_checkpoint",
    "load_config",
    "make_contrastive_batch",
    "ncm_scores",
    "payload_matrix",
    "power_iteration_vector",
    "predict_ncm",
    "read_metrics_csv",
    "reservoir_update",
    "run_budget_sweep",
    "run_cell",
    "run_experiment",
    "save_checkpoint",
    "select_cluster_exemplars",
    "select_herding_exemplars",
    "select_random_exemplars",
    "softened_probs",
    "top_k_hits",
    "train_batch",
    "write_metrics_csv",
    "write_metrics_json",
    "__version__",
]
