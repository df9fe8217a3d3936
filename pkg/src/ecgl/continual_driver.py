"""Task-by-task training, replay-buffer updates and backward evaluation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .efficient_learner import (
    Adam,
    ModelWeights,
    TrainConfig,
    gcn_train_step,
    gcn_forward,
    init_weights,
    masked_softmax,
    normalized_adjacency,
    train_epoch,
)
from .evaluation import PerformanceMatrix, metrics_dict
from .graph_store import Graph, TaskSequence, local_ids, task_subgraph
from .replay_sampler import (
    ImportanceConfig,
    MemoryBuffer,
    diversity_scores,
    dump_selection_csv,
    importance_scores,
    update_memory,
)

logger = logging.getLogger(__name__)

METHODS = ("ecgl", "ecgl_gcn_trainer", "finetune", "joint")
REGIMES = ("task_il", "class_il")


@dataclass(frozen=True)
class RegimeConfig:
    regime: str = "task_il"
    sample_budget: int = 1000
    diversity_ratio: float = 0.25
    importance: ImportanceConfig = field(default_factory=ImportanceConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    include_prior_edges: bool = False

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.sample_budget < 0:
            raise ValueError("sample_budget must be >= 0")
        if not 0.0 <= self.diversity_ratio <= 1.0:
            raise ValueError("diversity_ratio must lie in [0, 1]")


@dataclass
class RunRecord:
    method: str
    performance: PerformanceMatrix
    timings: list[dict[str, float]]
    buffer_sizes: list[int]
    convergence_flags: list[bool | None]
    config: dict
    weights: ModelWeights | None = None

    def to_dict(self, include_timings: bool = True) -> dict:
        out = {
            "method": self.method,
            "config": self.config,
            "performance_matrix": self.performance.to_list(),
            **metrics_dict(self.performance),
            "buffer_sizes": self.buffer_sizes,
            "convergence_flags": self.convergence_flags,
        }
        if include_timings:
            out["timings"] = self.timings
        return out

    def to_json(self, include_timings: bool = True) -> str:
        return json.dumps(self.to_dict(include_timings), sort_keys=True, indent=2) + "\n"


def class_mask_for(regime: str, task_eval: int, tasks_seen: int, tasks: TaskSequence) -> np.ndarray:
    """Class ids the model may predict when evaluating ``task_eval`` after ``tasks_seen``."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if not (0 <= task_eval <= tasks_seen < len(tasks)):
        raise ValueError(f"invalid task ids: task_eval={task_eval}, tasks_seen={tasks_seen}")
    if regime == "task_il":
        return np.array(tasks[task_eval].class_ids)
    return np.concatenate([tasks[k].class_ids for k in range(tasks_seen + 1)])


def _row_masks(origin_tasks: np.ndarray, tasks: TaskSequence, num_classes: int) -> np.ndarray:
    mask = np.zeros((len(origin_tasks), num_classes), dtype=bool)
    for k in np.unique(origin_tasks):
        mask[np.ix_(origin_tasks == k, tasks[k].class_ids)] = True
    return mask


def config_echo(config: RegimeConfig) -> dict:
    d = asdict(config)
    d["train"]["hidden_dims"] = list(config.train.hidden_dims)
    return d


class _EvalCache:
    def __init__(self, graph, tasks, include_prior_edges):
        self.graph, self.tasks, self.prior = graph, tasks, include_prior_edges
        self._items = {}

    def get(self, tt: int):
        if tt not in self._items:
            sub = task_subgraph(self.graph, self.tasks, tt, self.prior)
            test = local_ids(sub, self.tasks[tt].test_ids)
            self._items[tt] = (sub, normalized_adjacency(sub), test)
        return self._items[tt]


def run_continual(
    graph: Graph,
    tasks: TaskSequence,
    config: RegimeConfig,
    method: str = "ecgl",
    debug_dir=None,
) -> RunRecord:
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    tc = config.train
    num_classes = int(graph.labels.max()) + 1
    dims = (graph.feature_dim, *tc.hidden_dims, num_classes)
    weights = init_weights(dims, tc.seed)
    buffer = MemoryBuffer(budget_per_task=config.sample_budget, diversity_ratio=config.diversity_ratio)
    perf = PerformanceMatrix(len(tasks))
    evals = _EvalCache(graph, tasks, config.include_prior_edges)
    timings, sizes, flags = [], [], []
    rng = np.random.default_rng(tc.seed)
    task_il = config.regime == "task_il"

    for t, task in enumerate(tasks):
        seen = class_mask_for("class_il", t, t, tasks)
        if method == "joint":
            weights = init_weights(dims, tc.seed)
            ids = np.concatenate([tasks[k].train_ids for k in range(t + 1)])
            x_new, y_new = graph.features[ids], graph.labels[ids]
            mask_new = _row_masks(graph.node_task[ids], tasks, num_classes) if task_il else seen
        else:
            x_new, y_new = graph.features[task.train_ids], graph.labels[task.train_ids]
            mask_new = task.class_ids if task_il else seen

        use_buffer = method in ("ecgl", "ecgl_gcn_trainer")
        if use_buffer and len(buffer):
            x_rep, y_rep = buffer.features(graph.feature_dim), buffer.labels()
            mask_rep = _row_masks(buffer.origin_tasks(), tasks, num_classes) if task_il else seen
        else:
            x_rep, y_rep, mask_rep = np.zeros((0, graph.feature_dim)), np.zeros(0, np.int64), None

        state = Adam(weights) if tc.optimizer == "adam" else None
        epoch_ms = []
        if method == "ecgl_gcn_trainer":
            sub = task_subgraph(graph, tasks, t, include_prior_edges=False)
            adj = normalized_adjacency(sub)
            rows = local_ids(sub, task.train_ids)
            for _ in range(tc.epochs):
                t0 = time.perf_counter()
                weights, _, _ = gcn_train_step(
                    weights, adj, sub.features, rows, y_new, x_rep, y_rep, tc, mask_new, mask_rep, state
                )
                epoch_ms.append((time.perf_counter() - t0) * 1e3)
        else:
            for _ in range(tc.epochs):
                t0 = time.perf_counter()
                weights, _, _ = train_epoch(weights, x_new, y_new, x_rep, y_rep, tc, mask_new, mask_rep, state, rng)
                epoch_ms.append((time.perf_counter() - t0) * 1e3)
        weights.validate()

        sample_ms = 0.0
        flag = None
        if use_buffer:
            t0 = time.perf_counter()
            sub = task_subgraph(graph, tasks, t, include_prior_edges=False)
            result = importance_scores(sub, sub.features, config.importance)
            flag = result.converged
            imp = np.full(graph.num_nodes, np.nan)
            div = np.full(graph.num_nodes, np.nan)
            imp[sub.original_ids] = result.scores
            div[sub.original_ids] = diversity_scores(sub, sub.features)
            before = len(buffer)
            buffer = update_memory(buffer, graph, task, imp, div, config.sample_budget, config.diversity_ratio)
            sample_ms = (time.perf_counter() - t0) * 1e3
            if debug_dir is not None:
                picked = buffer.node_ids()[before:]
                dump_selection_csv(Path(debug_dir) / f"selection_task{t}.csv", task.node_ids, imp, div, picked)
        sizes.append(len(buffer))
        flags.append(flag)

        t0 = time.perf_counter()
        for tt in range(t + 1):
            sub, adj, test = evals.get(tt)
            logits, _ = gcn_forward(weights, adj, sub.features)
            pred = masked_softmax(logits, class_mask_for(config.regime, tt, t, tasks)).argmax(axis=1)
            acc = float(np.mean(pred[test] == sub.labels[test])) if len(test) else 0.0
            perf.record(t, tt, acc)
        infer_ms = (time.perf_counter() - t0) * 1e3

        timings.append({
            "train_ms_per_epoch": float(np.mean(epoch_ms)),
            "train_epoch_ms": [float(v) for v in epoch_ms],
            "sampling_ms": sample_ms,
            "inference_ms": infer_ms,
        })
        logger.info("task %d: AA=%.4f buffer=%d", t, perf.average_accuracy(t), len(buffer))

    return RunRecord(method, perf, timings, sizes, flags, config_echo(config), weights)
