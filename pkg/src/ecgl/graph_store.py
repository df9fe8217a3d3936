"""Attributed graphs in CSR form, task partitions, and the text dataset format.

Node ids are dense and 0-based. Undirected graphs store every edge in both
directions; directed graphs store out-edges only. Subgraphs keep the
original ids of their nodes in ``Graph.original_ids``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    """Raised for malformed dataset files or invariant violations."""


class OpCounter:
    """Counts traversals of CSR structure.

    Every routine that walks ``csr_col_indices`` bumps the counter, so tests
    can prove that a code path never touches graph structure.
    """

    def __init__(self) -> None:
        self.count = 0

    def tick(self, n: int = 1) -> None:
        self.count += n

    def reset(self) -> None:
        self.count = 0


csr_traversals = OpCounter()


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Graph:
    num_nodes: int
    csr_row_offsets: np.ndarray
    csr_col_indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    node_task: np.ndarray
    directed: bool = False
    original_ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "csr_row_offsets", _frozen(self.csr_row_offsets, np.int64))
        object.__setattr__(self, "csr_col_indices", _frozen(self.csr_col_indices, np.int64))
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(len(feats), -1)
        object.__setattr__(self, "features", _frozen(feats, np.float64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        object.__setattr__(self, "node_task", _frozen(self.node_task, np.int64))
        if self.original_ids is None:
            object.__setattr__(self, "original_ids", _frozen(np.arange(self.num_nodes), np.int64))
        else:
            object.__setattr__(self, "original_ids", _frozen(self.original_ids, np.int64))
        self.validate()

    @property
    def num_edges(self) -> int:
        """Number of stored (directed) CSR entries."""
        return len(self.csr_col_indices)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def out_degree(self) -> np.ndarray:
        return np.diff(self.csr_row_offsets)

    def edge_list(self) -> np.ndarray:
        """(E, 2) array of stored directed entries ``(row, col)``."""
        rows = np.repeat(np.arange(self.num_nodes), self.out_degree())
        return np.stack([rows, self.csr_col_indices], axis=1)

    def validate(self) -> None:
        n = self.num_nodes
        ro, ci = self.csr_row_offsets, self.csr_col_indices
        if len(ro) != n + 1:
            raise DatasetError(f"csr_row_offsets has length {len(ro)}, expected {n + 1}")
        if ro[0] != 0 or np.any(np.diff(ro) < 0):
            raise DatasetError("csr_row_offsets must start at 0 and be nondecreasing")
        if ro[-1] != len(ci):
            raise DatasetError("last row offset must equal the number of column indices")
        if len(ci) and (ci.min() < 0 or ci.max() >= n):
            raise DatasetError("column index out of range")
        if self.features.shape[0] != n or len(self.labels) != n or len(self.node_task) != n:
            raise DatasetError("features/labels/node_task must have one row per node")
        if len(self.original_ids) != n:
            raise DatasetError("original_ids must have one entry per node")
        rows = np.repeat(np.arange(n), np.diff(ro))
        if np.any(rows == ci):
            raise DatasetError("self-loops must not be stored")
        keys = rows * n + ci
        if len(np.unique(keys)) != len(keys):
            raise DatasetError("duplicate edges stored")
        if not self.directed:
            rev = np.sort(ci * n + rows)
            if not np.array_equal(np.sort(keys), rev):
                raise DatasetError("undirected graph must store every edge in both directions")

    @classmethod
    def from_edges(
        cls,
        num_nodes: int,
        edges,
        features,
        labels,
        node_task=None,
        directed: bool = False,
        original_ids=None,
    ) -> "Graph":
        """Build a graph from an edge list; undirected edges may be given once."""
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if len(e) and (e.min() < 0 or e.max() >= num_nodes):
            raise DatasetError("edge endpoint out of range")
        e = e[e[:, 0] != e[:, 1]]
        if not directed:
            e = np.concatenate([e, e[:, ::-1]])
        keys = np.unique(e[:, 0] * num_nodes + e[:, 1])
        rows, cols = keys // num_nodes, keys % num_nodes
        offsets = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=num_nodes), out=offsets[1:])
        if node_task is None:
            node_task = np.zeros(num_nodes, dtype=np.int64)
        return cls(num_nodes, offsets, cols, features, labels, node_task, directed, original_ids)


@dataclass(frozen=True)
class TaskView:
    task_id: int
    node_ids: np.ndarray
    train_ids: np.ndarray
    test_ids: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self) -> None:
        for name in ("node_ids", "train_ids", "test_ids", "class_ids"):
            object.__setattr__(self, name, _frozen(np.sort(getattr(self, name)), np.int64))
        if np.intersect1d(self.train_ids, self.test_ids).size:
            raise DatasetError(f"task {self.task_id}: train and test ids overlap")
        if np.setdiff1d(np.union1d(self.train_ids, self.test_ids), self.node_ids).size:
            raise DatasetError(f"task {self.task_id}: split ids outside the task node set")


@dataclass(frozen=True)
class TaskSequence:
    tasks: list[TaskView]
    classes_per_task: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "tasks", list(self.tasks))
        seen: dict[int, int] = {}
        for t in self.tasks:
            for c in t.class_ids.tolist():
                if c in seen:
                    raise DatasetError(
                        f"class overlap: class {c} appears in task {seen[c]} and task {t.task_id}"
                    )
                seen[c] = t.task_id

    def __len__(self) -> int:
        return len(self.tasks)

    def __getitem__(self, t: int) -> TaskView:
        return self.tasks[t]

    def __iter__(self):
        return iter(self.tasks)

    @property
    def num_classes(self) -> int:
        return sum(len(t.class_ids) for t in self.tasks)

    def validate_against(self, graph: Graph) -> None:
        covered = np.concatenate([t.node_ids for t in self.tasks]) if self.tasks else np.zeros(0, int)
        if len(np.unique(covered)) != len(covered):
            raise DatasetError("a node belongs to more than one task")
        if len(covered) and (covered.min() < 0 or covered.max() >= graph.num_nodes):
            raise DatasetError("task node id out of range")
        if len(covered) != graph.num_nodes:
            raise DatasetError("task node sets must cover every labeled node exactly once")
        for t in self.tasks:
            if np.any(graph.node_task[t.node_ids] != t.task_id):
                raise DatasetError(f"task {t.task_id}: node_task disagrees with task membership")
            if not np.all(np.isin(graph.labels[t.node_ids], t.class_ids)):
                raise DatasetError(f"task {t.task_id}: node label outside the task's class set")


def split_train_test(labels, node_ids, train_frac: float = 0.6, seed: int = 0):
    """Seeded per-class split of ``node_ids`` into train and test ids."""
    rng = np.random.default_rng(seed)
    node_ids = np.sort(np.asarray(node_ids, dtype=np.int64))
    train, test = [], []
    for c in np.unique(labels[node_ids]):
        members = node_ids[labels[node_ids] == c]
        members = members[rng.permutation(len(members))]
        k = int(round(train_frac * len(members)))
        if len(members) > 1:
            k = min(max(k, 1), len(members) - 1)
        train.append(members[:k])
        test.append(members[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def tasks_from_labels(graph: Graph, classes_per_task: int, train_frac: float = 0.6, seed: int = 0) -> TaskSequence:
    """Group consecutive class ids into tasks and split each task per class."""
    classes = np.unique(graph.labels)
    views = []
    for t in range(math.ceil(len(classes) / classes_per_task)):
        cls = classes[t * classes_per_task : (t + 1) * classes_per_task]
        nodes = np.flatnonzero(np.isin(graph.labels, cls))
        tr, te = split_train_test(graph.labels, nodes, train_frac, seed + t)
        views.append(TaskView(t, nodes, tr, te, cls))
    return TaskSequence(views, classes_per_task)


# ---------------------------------------------------------------------------
# synthetic data

def _sample_pairs_between(rng, na: int, nb: int, p: float) -> tuple[np.ndarray, np.ndarray]:
    total = na * nb
    if p <= 0 or total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    m = rng.binomial(total, p)
    idx = rng.choice(total, size=m, replace=False)
    return idx // nb, idx % nb


def _sample_pairs_within(rng, n: int, p: float) -> tuple[np.ndarray, np.ndarray]:
    total = n * (n - 1) // 2
    if p <= 0 or total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    m = rng.binomial(total, p)
    k = rng.choice(total, size=m, replace=False).astype(np.int64)
    # upper-triangle linear index -> (i, j), i < j
    i = n - 2 - np.floor(np.sqrt(-8.0 * k + 4.0 * n * (n - 1) - 7) / 2.0 - 0.5).astype(np.int64)
    j = k + i + 1 - total + (n - i) * (n - i - 1) // 2
    return i, j


def generate_sbm(
    num_tasks: int,
    classes_per_task: int,
    nodes_per_class: int,
    p_intra: float,
    p_inter: float,
    p_intertask: float,
    feature_dim: int,
    feature_shift: float,
    seed: int = 0,
    train_frac: float = 0.6,
) -> tuple[Graph, TaskSequence]:
    """Stochastic block model with one block per class.

    Edge probability is ``p_intra`` inside a class, ``p_inter`` between
    classes of the same task and ``p_intertask`` across tasks. Features of
    class ``c`` are ``feature_shift * u_c + N(0, I)`` with ``u_c`` a seeded
    random unit vector.
    """
    for name, p in (("p_intra", p_intra), ("p_inter", p_inter), ("p_intertask", p_intertask)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    for name, v in (
        ("num_tasks", num_tasks),
        ("classes_per_task", classes_per_task),
        ("nodes_per_class", nodes_per_class),
        ("feature_dim", feature_dim),
    ):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")

    rng = np.random.default_rng(seed)
    num_classes = num_tasks * classes_per_task
    n = num_classes * nodes_per_class
    labels = np.repeat(np.arange(num_classes), nodes_per_class)
    node_task = labels // classes_per_task
    start = np.arange(num_classes) * nodes_per_class

    src, dst = [], []
    for a in range(num_classes):
        i, j = _sample_pairs_within(rng, nodes_per_class, p_intra)
        src.append(start[a] + i)
        dst.append(start[a] + j)
        for b in range(a + 1, num_classes):
            p = p_inter if a // classes_per_task == b // classes_per_task else p_intertask
            i, j = _sample_pairs_between(rng, nodes_per_class, nodes_per_class, p)
            src.append(start[a] + i)
            dst.append(start[b] + j)
    edges = np.stack([np.concatenate(src), np.concatenate(dst)], axis=1)

    directions = rng.normal(size=(num_classes, feature_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    features = feature_shift * directions[labels] + rng.normal(size=(n, feature_dim))

    graph = Graph.from_edges(n, edges, features, labels, node_task, directed=False)
    tasks = tasks_from_labels(graph, classes_per_task, train_frac, seed)
    return graph, tasks


# ---------------------------------------------------------------------------
# subgraphs

def induced_subgraph(graph: Graph, node_ids) -> Graph:
    """Induced subgraph on ``node_ids`` (sorted), ids remapped densely."""
    node_ids = np.unique(np.asarray(node_ids, dtype=np.int64))
    local = np.full(graph.num_nodes, -1, dtype=np.int64)
    local[node_ids] = np.arange(len(node_ids))
    csr_traversals.tick()
    e = graph.edge_list()
    keep = (local[e[:, 0]] >= 0) & (local[e[:, 1]] >= 0)
    e = local[e[keep]]
    e = e[np.lexsort((e[:, 1], e[:, 0]))]
    offsets = np.zeros(len(node_ids) + 1, dtype=np.int64)
    np.cumsum(np.bincount(e[:, 0], minlength=len(node_ids)), out=offsets[1:])
    return Graph(
        len(node_ids),
        offsets,
        e[:, 1],
        graph.features[node_ids],
        graph.labels[node_ids],
        graph.node_task[node_ids],
        graph.directed,
        graph.original_ids[node_ids],
    )


def task_subgraph(graph: Graph, tasks: TaskSequence, t: int, include_prior_edges: bool = False) -> Graph:
    """Subgraph visible at task ``t``.

    Without prior edges this is the induced subgraph on task ``t``'s nodes.
    With prior edges, nodes of earlier tasks adjacent to task ``t`` are
    pulled in as a one-hop halo so inter-task edges take part in message
    passing. Nodes of later tasks are never included.
    """
    if not 0 <= t < len(tasks):
        raise IndexError(f"invalid task id {t}; sequence has {len(tasks)} tasks")
    core = tasks[t].node_ids
    if not include_prior_edges:
        return induced_subgraph(graph, core)
    csr_traversals.tick()
    e = graph.edge_list()
    nbrs = e[np.isin(e[:, 0], core), 1]
    if graph.directed:
        # in-neighbours also feed task nodes
        nbrs = np.concatenate([nbrs, e[np.isin(e[:, 1], core), 0]])
    halo = np.unique(nbrs)
    halo = halo[graph.node_task[halo] < t]
    return induced_subgraph(graph, np.concatenate([core, halo]))


def local_ids(sub: Graph, original) -> np.ndarray:
    """Map original node ids to the local ids of ``sub``."""
    original = np.asarray(original, dtype=np.int64)
    pos = np.searchsorted(sub.original_ids, original)
    if np.any(pos >= sub.num_nodes) or np.any(sub.original_ids[np.minimum(pos, sub.num_nodes - 1)] != original):
        raise KeyError("node id not present in subgraph")
    return pos


# ---------------------------------------------------------------------------
# file format

def save_dataset(path, graph: Graph, tasks: TaskSequence) -> None:
    """Write the line-oriented text format read by :func:`load_dataset`."""
    if graph.directed:
        edges = graph.edge_list()
    else:
        e = graph.edge_list()
        edges = e[e[:, 0] < e[:, 1]]
    lines = [
        "# ecgl dataset",
        f"HEADER {graph.num_nodes} {len(edges)} {graph.feature_dim} {len(tasks)} "
        f"{tasks.classes_per_task} {int(graph.directed)}",
    ]
    for i in range(graph.num_nodes):
        feats = " ".join(repr(float(v)) for v in graph.features[i])
        lines.append(f"NODE {i} {graph.node_task[i]} {graph.labels[i]} {feats}")
    lines.extend(f"EDGE {u} {v}" for u, v in edges.tolist())
    for t in tasks:
        tr = " ".join(map(str, t.train_ids.tolist()))
        te = " ".join(map(str, t.test_ids.tolist()))
        lines.append(f"TASK {t.task_id} train: {tr} test: {te}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _ints(tokens, lineno: int, what: str) -> list[int]:
    try:
        return [int(x) for x in tokens]
    except ValueError:
        raise DatasetError(f"line {lineno}: non-integer {what}") from None


def load_dataset(path) -> tuple[Graph, TaskSequence]:
    """Read a dataset file, validating every invariant with line context."""
    header = None
    nodes: dict[int, tuple[int, int, list[float], int]] = {}
    edges: list[tuple[int, int]] = []
    task_lines: list[tuple[int, list[int], list[int], int]] = []

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            kind = tok[0]
            if header is None and kind != "HEADER":
                raise DatasetError(f"line {lineno}: malformed header, expected HEADER record first")
            if kind == "HEADER":
                if header is not None:
                    raise DatasetError(f"line {lineno}: duplicate HEADER")
                vals = _ints(tok[1:], lineno, "header field")
                if len(vals) != 6 or vals[5] not in (0, 1) or min(vals[:5]) < 0:
                    raise DatasetError(
                        f"line {lineno}: malformed header, expected "
                        "'HEADER num_nodes num_edges feature_dim num_tasks classes_per_task directed'"
                    )
                header = vals
            elif kind == "NODE":
                n, _, k = header[0], header[1], header[2]
                if len(tok) != 4 + k:
                    raise DatasetError(f"line {lineno}: NODE record needs {k} features, got {len(tok) - 4}")
                nid, task, cls = _ints(tok[1:4], lineno, "node field")
                if not 0 <= nid < n:
                    raise DatasetError(f"line {lineno}: node id {nid} out of range [0, {n})")
                if nid in nodes:
                    raise DatasetError(f"line {lineno}: duplicate node id {nid}")
                try:
                    feats = [float(x) for x in tok[4:]]
                except ValueError:
                    raise DatasetError(f"line {lineno}: non-numeric feature") from None
                nodes[nid] = (task, cls, feats, lineno)
            elif kind == "EDGE":
                if len(tok) != 3:
                    raise DatasetError(f"line {lineno}: EDGE record needs two endpoints")
                u, v = _ints(tok[1:], lineno, "edge endpoint")
                n = header[0]
                if not (0 <= u < n and 0 <= v < n):
                    raise DatasetError(f"line {lineno}: edge ({u}, {v}) index out of range [0, {n})")
                if u == v:
                    raise DatasetError(f"line {lineno}: self-loop ({u}, {u}) not allowed")
                edges.append((u, v))
            elif kind == "TASK":
                if "train:" not in tok or "test:" not in tok:
                    raise DatasetError(f"line {lineno}: TASK record needs 'train:' and 'test:' sections")
                a, b = tok.index("train:"), tok.index("test:")
                if not (a == 2 and b > a):
                    raise DatasetError(f"line {lineno}: malformed TASK record")
                (tid,) = _ints(tok[1:2], lineno, "task id")
                train = _ints(tok[a + 1 : b], lineno, "train id")
                test = _ints(tok[b + 1 :], lineno, "test id")
                task_lines.append((tid, train, test, lineno))
            else:
                raise DatasetError(f"line {lineno}: unknown record type {kind!r}")

    if header is None:
        raise DatasetError("malformed header: file has no HEADER record")
    n, m, k, num_tasks, cpt, directed = header
    if len(nodes) != n:
        raise DatasetError(f"expected {n} NODE records, found {len(nodes)}")
    if len(edges) != m:
        raise DatasetError(f"expected {m} EDGE records, found {len(edges)}")
    if len(task_lines) != num_tasks:
        raise DatasetError(f"expected {num_tasks} TASK records, found {len(task_lines)}")

    node_task = np.array([nodes[i][0] for i in range(n)], dtype=np.int64)
    labels = np.array([nodes[i][1] for i in range(n)], dtype=np.int64)
    features = np.array([nodes[i][2] for i in range(n)], dtype=np.float64).reshape(n, k)
    graph = Graph.from_edges(n, np.array(edges, dtype=np.int64).reshape(-1, 2), features, labels, node_task, bool(directed))

    views = []
    class_owner: dict[int, int] = {}
    for tid, train, test, lineno in sorted(task_lines):
        members = np.flatnonzero(node_task == tid)
        cls = np.unique(labels[members])
        for c in cls.tolist():
            if c in class_owner:
                raise DatasetError(
                    f"line {lineno}: class overlap, class {c} used by task {class_owner[c]} and task {tid}"
                )
            class_owner[c] = tid
        bad = [i for i in train + test if not 0 <= i < n or node_task[i] != tid]
        if bad:
            raise DatasetError(f"line {lineno}: split id {bad[0]} out of range or not in task {tid}")
        try:
            views.append(TaskView(tid, members, np.array(train, np.int64), np.array(test, np.int64), cls))
        except DatasetError as exc:
            raise DatasetError(f"line {lineno}: {exc}") from None
    if [v.task_id for v in views] != list(range(num_tasks)):
        raise DatasetError("task ids must be 0..num_tasks-1")
    tasks = TaskSequence(views, cpt)
    tasks.validate_against(graph)
    return graph, tasks
