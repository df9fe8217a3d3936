"""Continual node classification with graph-dependent replay and MLP-trained GCNs."""

from .continual_driver import RegimeConfig, RunRecord, class_mask_for, run_continual
from .efficient_learner import (
    ModelWeights,
    TrainConfig,
    cross_entropy,
    gcn_inference,
    init_weights,
    mlp_forward,
    normalized_adjacency,
    train_step,
)
from .evaluation import PerformanceMatrix, timing_report
from .graph_store import Graph, TaskSequence, TaskView, generate_sbm, load_dataset, save_dataset, task_subgraph
from .replay_sampler import (
    ImportanceConfig,
    MemoryBuffer,
    build_taylor_surrogate,
    diversity_scores,
    exact_attribute_transition_apply,
    importance_scores,
    surrogate_r,
    transition_matrix_apply,
    update_memory,
)

__version__ = "0.1.0"
