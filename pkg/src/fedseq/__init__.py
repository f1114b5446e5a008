"""Deterministic simulator of federated sequential recommendation with
targeted poisoning attacks and robust aggregation."""

from .attacks import (
    AttackConfig,
    MaliciousAssignment,
    assign_malicious,
    contrastive_loss,
    darts_gradient,
    substitution,
)
from .data_ingest import (
    ClientDataset,
    InteractionLog,
    generate_synthetic,
    leave_one_out_split,
    load_interactions,
)
from .defense import DefenseConfig, geometric_median, mixed_rfa
from .fedsim import FederationConfig, RoundReport, run_training
from .harness import ExperimentSpec, parse_config, run_experiment
from .metrics import EvalConfig, MetricsReport, evaluate, exposure_ratio, hit_ndcg, rank_item
from .recmodel import (
    GradientUpdate,
    ModelConfig,
    ModelParams,
    bce_local_loss,
    embed,
    forward_scores,
    grad_params,
    grad_wrt_input_embeddings,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"
