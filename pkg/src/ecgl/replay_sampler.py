"""Graph-dependent replay: importance and diversity scores and the memory buffer.

Importance is an attributed PageRank, ``pi = d * T @ pi + (1 - d) * r``,
where ``T`` is the topology transition matrix and ``r`` is the stationary
distribution of the RBF-similarity walk over the fully connected graph.
``r`` is either computed exactly in O(N^2) or via a second-order Taylor
expansion of the RBF kernel in O(N K^2).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph_store import Graph, TaskView, csr_traversals

logger = logging.getLogger(__name__)

_CHUNK = 1024


@dataclass(frozen=True)
class ImportanceConfig:
    damping_d: float = 0.85
    rbf_gamma: float | None = None  # None -> median heuristic, see default_gamma
    max_iterations: int = 1000
    tolerance: float = 1e-10
    use_taylor_surrogate: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.damping_d <= 1.0:
            raise ValueError("damping_d must lie in [0, 1]")
        if self.rbf_gamma is not None and self.rbf_gamma <= 0:
            raise ValueError("rbf_gamma must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class TaylorSurrogate:
    """Precomputed terms of the expanded RBF row sums.

    ``offset`` is subtracted from features before every evaluation. The RBF
    kernel only sees differences, so any offset leaves the exact sums
    unchanged, while centring keeps ``2 * gamma * x_i . x_j`` near zero
    where the truncated expansion is accurate.
    """

    point_weights_w: np.ndarray
    scalar_a: float
    vector_b: np.ndarray
    matrix_Cmat: np.ndarray
    gamma: float
    offset: np.ndarray


@dataclass
class PageRankResult:
    scores: np.ndarray
    iterations: int
    converged: bool
    residual: float


def _check_vector(n: int, vector) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (n,):
        raise ValueError(f"vector has shape {v.shape}, expected ({n},)")
    return v


def transition_matrix_apply(graph: Graph, vector) -> np.ndarray:
    """Matrix-free ``T @ vector`` for the topology transition matrix.

    ``T[i, j] = 1 / outdeg(j)`` for every stored edge ``j -> i``; a column
    with zero out-degree is uniform ``1 / N``.
    """
    n = graph.num_nodes
    v = _check_vector(n, vector)
    deg = graph.out_degree()
    dangling = deg == 0
    csr_traversals.tick()
    share = np.where(dangling, 0.0, v / np.maximum(deg, 1))
    out = np.bincount(graph.csr_col_indices, weights=np.repeat(share, deg), minlength=n).astype(np.float64)
    out += v[dangling].sum() / n
    return out


def _sq_norms(x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, x)


def _rbf_block(x: np.ndarray, rows: slice, gamma: float, norms: np.ndarray) -> np.ndarray:
    d2 = norms[rows, None] + norms[None, :] - 2.0 * x[rows] @ x.T
    np.maximum(d2, 0.0, out=d2)
    return np.exp(-gamma * d2)


def exact_attribute_transition_apply(features, rbf_gamma: float, vector) -> np.ndarray:
    """``Q @ vector`` with ``Q[i, j] = s(i, j) / sum_k s(k, j)``, built densely in row chunks."""
    x = np.asarray(features, dtype=np.float64)
    x = x - x.mean(axis=0)
    n = x.shape[0]
    v = _check_vector(n, vector)
    norms = _sq_norms(x)
    # s is symmetric, so column sums equal row sums
    col_sums = exact_rbf_row_sums(x, rbf_gamma)
    scaled = v / col_sums
    out = np.empty(n)
    for start in range(0, n, _CHUNK):
        rows = slice(start, min(start + _CHUNK, n))
        out[rows] = _rbf_block(x, rows, rbf_gamma, norms) @ scaled
    return out


def exact_rbf_row_sums(features, rbf_gamma: float) -> np.ndarray:
    """Unnormalised ``sum_j exp(-gamma ||x_i - x_j||^2)`` for every node."""
    x = np.asarray(features, dtype=np.float64)
    x = x - x.mean(axis=0)
    n = x.shape[0]
    norms = _sq_norms(x)
    out = np.empty(n)
    for start in range(0, n, _CHUNK):
        rows = slice(start, min(start + _CHUNK, n))
        out[rows] = _rbf_block(x, rows, rbf_gamma, norms).sum(axis=1)
    return out


def exact_r(features, rbf_gamma: float) -> np.ndarray:
    s = exact_rbf_row_sums(features, rbf_gamma)
    return s / s.sum()


def build_taylor_surrogate(features, rbf_gamma: float, center: bool = False) -> TaylorSurrogate:
    if rbf_gamma <= 0:
        raise ValueError(f"rbf_gamma must be positive, got {rbf_gamma}")
    x = np.asarray(features, dtype=np.float64)
    offset = x.mean(axis=0) if center else np.zeros(x.shape[1])
    x = x - offset
    w = np.exp(-rbf_gamma * _sq_norms(x))
    wx = w[:, None] * x
    return TaylorSurrogate(
        point_weights_w=w,
        scalar_a=float(w.sum()),
        vector_b=2.0 * rbf_gamma * wx.sum(axis=0),
        matrix_Cmat=2.0 * rbf_gamma**2 * (wx.T @ x),
        gamma=rbf_gamma,
        offset=offset,
    )


def surrogate_r(surrogate: TaylorSurrogate, features) -> np.ndarray:
    """Normalised Taylor estimate of ``r``.

    Truncation can push entries slightly negative; those are clamped to zero
    before normalising. If nothing positive remains the result is uniform.
    """
    x = np.asarray(features, dtype=np.float64) - surrogate.offset
    quad = ((x @ surrogate.matrix_Cmat) * x).sum(axis=1)
    r_hat = surrogate.point_weights_w * (surrogate.scalar_a + x @ surrogate.vector_b + quad)
    r_hat = np.maximum(r_hat, 0.0)
    total = r_hat.sum()
    if not total > 0:
        logger.warning("Taylor surrogate degenerated to zero; falling back to uniform r")
        return np.full(len(r_hat), 1.0 / len(r_hat))
    return r_hat / total


def default_gamma(features, sample_size: int = 256, seed: int = 0) -> float:
    """``1 / (2 m^2)`` with ``m`` the median pairwise distance of a node sample."""
    x = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if len(x) > sample_size:
        x = x[np.sort(rng.choice(len(x), sample_size, replace=False))]
    d2 = _sq_norms(x)[:, None] + _sq_norms(x)[None, :] - 2.0 * x @ x.T
    iu = np.triu_indices(len(x), k=1)
    dist = np.sqrt(np.maximum(d2[iu], 0.0))
    m = float(np.median(dist)) if dist.size else 0.0
    if m <= 0:
        return 1.0
    return 1.0 / (2.0 * m * m)


def attribute_vector(features, config: ImportanceConfig) -> np.ndarray:
    gamma = config.rbf_gamma if config.rbf_gamma is not None else default_gamma(features)
    if config.use_taylor_surrogate:
        return surrogate_r(build_taylor_surrogate(features, gamma, center=True), features)
    return exact_r(features, gamma)


def importance_scores(graph: Graph, features, config: ImportanceConfig = ImportanceConfig()) -> PageRankResult:
    """Attributed PageRank by power iteration from the uniform vector."""
    n = graph.num_nodes
    r = attribute_vector(features, config)
    d = config.damping_d
    if d == 0.0:
        return PageRankResult(r.copy(), 1, True, 0.0)
    pi = np.full(n, 1.0 / n)
    residual = math.inf
    for it in range(1, config.max_iterations + 1):
        new = d * transition_matrix_apply(graph, pi) + (1.0 - d) * r
        residual = float(np.abs(new - pi).sum())
        pi = new
        if residual < config.tolerance:
            return PageRankResult(pi, it, True, residual)
    logger.warning("importance scores did not converge in %d iterations (residual %.3g)", config.max_iterations, residual)
    return PageRankResult(pi, config.max_iterations, False, residual)


def diversity_scores(graph: Graph, features) -> np.ndarray:
    """Distance between each node's features and the mean of its 1-hop neighbours.

    Isolated nodes compare against the zero vector.
    """
    x = np.asarray(features, dtype=np.float64)
    deg = graph.out_degree()
    csr_traversals.tick()
    n = graph.num_nodes
    adj = sp.csr_matrix((np.ones(graph.num_edges), graph.csr_col_indices, graph.csr_row_offsets), shape=(n, n))
    sums = adj @ x
    mean = sums / np.maximum(deg, 1)[:, None]
    return np.linalg.norm(x - mean, axis=1)


# ---------------------------------------------------------------------------
# memory buffer

@dataclass(frozen=True)
class MemoryRecord:
    features: np.ndarray
    class_id: int
    origin_task: int
    node_id: int


@dataclass
class MemoryBuffer:
    records: list[MemoryRecord] = field(default_factory=list)
    budget_per_task: int = 0
    diversity_ratio: float = 0.25

    def __len__(self) -> int:
        return len(self.records)

    def features(self, dim: int) -> np.ndarray:
        if not self.records:
            return np.zeros((0, dim))
        return np.stack([r.features for r in self.records])

    def labels(self) -> np.ndarray:
        return np.array([r.class_id for r in self.records], dtype=np.int64)

    def origin_tasks(self) -> np.ndarray:
        return np.array([r.origin_task for r in self.records], dtype=np.int64)

    def node_ids(self) -> np.ndarray:
        return np.array([r.node_id for r in self.records], dtype=np.int64)

    def count_for(self, task_id: int) -> int:
        return sum(r.origin_task == task_id for r in self.records)


def _ranked(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    # descending score, ties by ascending id
    return ids[np.lexsort((ids, -scores))]


@dataclass
class Selection:
    diversity: np.ndarray
    importance: np.ndarray

    @property
    def all(self) -> np.ndarray:
        return np.concatenate([self.diversity, self.importance])


def select_nodes(task: TaskView, imp, div, budget: int, diversity_ratio: float) -> Selection:
    """Pick replay nodes among the task's training nodes.

    ``ceil(ratio * budget)`` come from the diversity ranking and the rest
    from the importance ranking, skipping nodes already picked. ``imp`` and
    ``div`` are indexed by original node id.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if not 0.0 <= diversity_ratio <= 1.0:
        raise ValueError("diversity_ratio must lie in [0, 1]")
    pool = task.train_ids
    budget = min(budget, len(pool))
    n_div = min(math.ceil(diversity_ratio * budget), budget)
    imp = np.asarray(imp, dtype=np.float64)
    div = np.asarray(div, dtype=np.float64)
    by_div = _ranked(div[pool], pool)[:n_div]
    by_imp = _ranked(imp[pool], pool)
    by_imp = by_imp[~np.isin(by_imp, by_div)][: budget - n_div]
    return Selection(by_div, by_imp)


def update_memory(
    buffer: MemoryBuffer,
    graph: Graph,
    task: TaskView,
    imp,
    div,
    budget: int,
    diversity_ratio: float,
) -> MemoryBuffer:
    """Return a new buffer with the selected nodes of ``task`` appended.

    ``graph`` is the full graph; ``imp`` and ``div`` are indexed by its node ids.
    """
    sel = select_nodes(task, imp, div, budget, diversity_ratio)
    have = {(r.origin_task, r.node_id) for r in buffer.records}
    records = list(buffer.records)
    for nid in sel.all.tolist():
        if (task.task_id, nid) in have:
            continue
        records.append(MemoryRecord(graph.features[nid].copy(), int(graph.labels[nid]), task.task_id, nid))
    return MemoryBuffer(records, budget, diversity_ratio)


def dump_selection_csv(path, node_ids, imp, div, selected) -> None:
    """Debug dump of per-node scores for one task."""
    chosen = set(np.asarray(selected).tolist())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "importance", "diversity", "selected"])
        for nid in np.asarray(node_ids).tolist():
            w.writerow([nid, repr(float(imp[nid])), repr(float(div[nid])), int(nid in chosen)])
