"""Transductive regression on embedding manifolds.

Ordered unit-norm embeddings are trained around reference anchors so that
geometry mirrors label order; predictions on a new domain come from a few
labeled support samples, either by weighted nearest neighbors or by diffusing
support indicators through a sparse affinity graph and reading out a weighted
label estimate. Includes inductive baselines, a synthetic domain-shift
benchmark, and a seeded experiment harness.
"""

from .baselines import (
    LinearHead,
    calibrate_linear,
    finetune_probe,
    fit_linear_probe,
    load_head,
    predict_knn,
    save_head,
)
from .core import (
    ConfigError,
    EmbeddingSet,
    HyperParams,
    IsolatedNodeWarning,
    NormalizationWarning,
    ReferencePoints,
    SolverError,
    SupportSet,
    SupportShortfallWarning,
    TrainingDivergedError,
    ValueGroups,
    Violation,
    load_embedding_csv,
    normalize_rows,
    save_embedding_csv,
    validate_embedding_set,
)
from .diffusion import (
    AffinityGraph,
    SupportMatrix,
    build_affinity,
    diffuse_closed,
    diffuse_iterative,
    export_graph,
    export_scores,
    make_support_matrix,
    predict_mdr,
)
from .evalbench import (
    METHODS,
    BenchmarkSpec,
    ExperimentConfig,
    ExperimentReport,
    MethodResult,
    SyntheticBenchmark,
    compute_group_bounds,
    make_synthetic_benchmark,
    project_2d,
    r2_score,
    run_experiment,
    run_method,
    sample_support,
    save_projection_csv,
    save_report_csv,
    save_report_json,
    wasserstein1,
)
from .order_learning import (
    Checkpoint,
    LinearEmbedder,
    LossBreakdown,
    LossGradients,
    PairBatch,
    TrainResult,
    TrainSchedule,
    assign_group,
    assign_groups,
    center_loss,
    composite_loss,
    load_checkpoint,
    loss_gradient,
    make_pair_batch,
    metric_loss,
    order_loss,
    save_checkpoint,
    save_loss_trace,
    train_toy_embedder,
)

__version__ = "0.1.0"
