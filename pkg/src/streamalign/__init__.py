"""Streaming test-time adaptation for small classifiers.

A frozen source classifier is adapted on an unlabeled test stream by pulling
the streaming feature statistics of each pseudo-class back onto frozen
source anchors (per-class and globally) while a confidence-gated weak/strong
self-training term sharpens predictions. Works with real source statistics
or, source-free, with statistics inferred from the classifier weights alone.
"""

from .banks import (
    SourceBank,
    TargetBank,
    cold_start_target_bank,
    load_source_bank,
    save_source_bank,
    warm_start_target_bank,
)
from .bench import (
    DomainData,
    DomainSpec,
    TrainConfig,
    generate_domain,
    prepare_source,
    run_cell,
    run_grid,
    train_source,
)
from .engine import (
    BASELINES,
    PROTOCOLS,
    ProtocolConfig,
    QueueState,
    Stream,
    StreamReport,
    load_stream,
    run_baseline,
    run_stream,
    save_stream,
)
from .filters import (
    FilterDecision,
    PosteriorEMA,
    ema_update,
    filtered_cluster_update,
    pp_filter,
    tc_filter,
)
from .gaussian import (
    DecompositionError,
    GaussianStats,
    MixtureWeights,
    RunningStats,
    batch_moments,
    cholesky_psd,
    clipped_rate,
    gaussian_kl,
    merge_mixture,
    regularize_cov,
    running_update,
    scale_eps,
    uniform_weights,
)
from .losses import (
    AugmentationConfig,
    LossBreakdown,
    anchored_clustering_loss,
    global_alignment_loss,
    self_training_loss,
    total_objective,
)
from .network import (
    ForwardTrace,
    Gradients,
    Layer,
    ModelParams,
    NonFiniteGradientError,
    OptimizerState,
    backward,
    cross_entropy_loss,
    entropy_loss,
    forward,
    init_mlp,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from .source import (
    InferenceConfig,
    InferenceResult,
    build_inferred_bank,
    choose_gamma,
    estimate_source_stats,
    infer_source_means,
)

__version__ = "0.1.0"
