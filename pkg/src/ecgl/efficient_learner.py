"""MLP training with weights shared by a GCN at inference time.

A GCN layer ``relu(A_norm @ H @ W + b)`` and an MLP layer ``relu(H @ W + b)``
have the same parameters. Training runs the MLP on node features only and
never touches the graph; inference re-inserts message passing with the very
same :class:`ModelWeights`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph_store import Graph, csr_traversals


@dataclass
class ModelWeights:
    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.layers[0][0].shape[0],) + tuple(w.shape[1] for w, _ in self.layers)

    def copy(self) -> "ModelWeights":
        return ModelWeights([(w.copy(), b.copy()) for w, b in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in self.layers])

    def validate(self) -> None:
        for i, (w, b) in enumerate(self.layers):
            if b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and w.shape[0] != self.layers[i - 1][0].shape[1]:
                raise ValueError(f"layer {i}: input dim {w.shape[0]} does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise FloatingPointError(f"layer {i}: non-finite parameters")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.1
    weight_decay: float = 5e-4
    replay_lambda: float = 1.0
    seed: int = 0
    hidden_dims: tuple[int, ...] = (256,)
    optimizer: str = "gd"  # "gd" or "adam"
    batch_size: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0 or self.replay_lambda < 0:
            raise ValueError("weight_decay and replay_lambda must be nonnegative")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))


def init_weights(dims, seed: int = 0) -> ModelWeights:
    """Glorot-uniform weights, zero biases."""
    dims = list(dims)
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return ModelWeights(layers)


# ---------------------------------------------------------------------------
# MLP

@dataclass
class Cache:
    inputs: list[np.ndarray] = field(default_factory=list)  # layer inputs (after message passing for GCN)
    pre: list[np.ndarray] = field(default_factory=list)


def mlp_forward(weights: ModelWeights, features) -> tuple[np.ndarray, Cache]:
    h = np.asarray(features, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != weights.dims[0]:
        raise ValueError(f"features of shape {h.shape} do not match input dim {weights.dims[0]}")
    cache = Cache()
    last = len(weights.layers) - 1
    for i, (w, b) in enumerate(weights.layers):
        cache.inputs.append(h)
        z = h @ w + b
        cache.pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    return h, cache


def _backward(weights: ModelWeights, cache: Cache, grad_out: np.ndarray, propagate=None):
    """Gradients of every layer given d(loss)/d(logits).

    ``propagate`` maps a gradient w.r.t. a layer's (message-passed) input
    back to the previous layer's output; identity for the MLP.
    """
    grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(weights.layers)
    g = grad_out
    for i in range(len(weights.layers) - 1, -1, -1):
        w, _ = weights.layers[i]
        if i != len(weights.layers) - 1:
            g = g * (cache.pre[i] > 0)
        grads[i] = (cache.inputs[i].T @ g, g.sum(axis=0))
        if i:
            g = g @ w.T
            if propagate is not None:
                g = propagate(g)
    return grads


def mlp_backward(weights: ModelWeights, cache: Cache, grad_logits) -> list[tuple[np.ndarray, np.ndarray]]:
    return _backward(weights, cache, np.asarray(grad_logits, dtype=np.float64))


# ---------------------------------------------------------------------------
# loss

def _mask_matrix(class_mask, n_rows: int, n_cols: int) -> np.ndarray | None:
    if class_mask is None:
        return None
    m = np.asarray(class_mask)
    if m.dtype == bool and m.ndim == 2:
        if m.shape != (n_rows, n_cols):
            raise ValueError(f"row mask shape {m.shape} != logits shape {(n_rows, n_cols)}")
        return m
    ids = np.asarray(sorted(set(np.asarray(m, dtype=np.int64).ravel().tolist())), dtype=np.int64)
    if len(ids) and (ids.min() < 0 or ids.max() >= n_cols):
        raise ValueError("class mask id out of range")
    row = np.zeros(n_cols, dtype=bool)
    row[ids] = True
    return np.broadcast_to(row, (n_rows, n_cols))


def masked_softmax(logits, class_mask=None) -> np.ndarray:
    """Row softmax over the allowed columns; masked-out columns get probability 0.

    ``class_mask`` is a collection of class ids shared by every row or an
    ``(n, C)`` boolean array of per-row masks.
    """
    z = np.asarray(logits, dtype=np.float64)
    mask = _mask_matrix(class_mask, *z.shape)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels, class_mask=None) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = len(y)
    if n == 0:
        return 0.0, np.zeros_like(z)
    mask = _mask_matrix(class_mask, *z.shape)
    if mask is not None and not np.all(mask[np.arange(n), y]):
        raise ValueError("label outside class mask")
    zm = z if mask is None else np.where(mask, z, -np.inf)
    zmax = zm.max(axis=1, keepdims=True)
    shifted = zm - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), y]))
    p = np.exp(shifted - lse[:, None])
    p[np.arange(n), y] -= 1.0
    return loss, p / n


# ---------------------------------------------------------------------------
# optimisation

class Adam:
    """Adam state for a :class:`ModelWeights` (optional optimizer)."""

    def __init__(self, weights: ModelWeights, beta1=0.9, beta2=0.999, eps=1e-8):
        params = [p for pair in weights.layers for p in pair]
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def direction(self, grads):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        flat = [g for pair in grads for g in pair]
        steps = []
        for k, g in enumerate(flat):
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            steps.append((self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))
        return list(zip(steps[0::2], steps[1::2]))


def apply_update(weights: ModelWeights, grads, config: TrainConfig, state: Adam | None = None) -> ModelWeights:
    steps = state.direction(grads) if state is not None else grads
    lr, shrink = config.learning_rate, 1.0 - config.learning_rate * config.weight_decay
    return ModelWeights([(shrink * w - lr * gw, b - lr * gb) for (w, b), (gw, gb) in zip(weights.layers, steps)])


def combined_loss_and_grads(
    weights: ModelWeights,
    new_features,
    new_labels,
    replay_features,
    replay_labels,
    replay_lambda: float,
    class_mask_new=None,
    class_mask_replay=None,
):
    """``L_new + lambda * L_replay`` for the MLP, with gradients.

    Returns ``(total, loss_new, loss_replay, grads)``.
    """
    logits, cache = mlp_forward(weights, new_features)
    loss_new, g_new = cross_entropy(logits, new_labels, class_mask_new)
    grads = mlp_backward(weights, cache, g_new)
    loss_replay = 0.0
    if replay_lambda > 0 and len(replay_labels):
        logits_r, cache_r = mlp_forward(weights, replay_features)
        loss_replay, g_r = cross_entropy(logits_r, replay_labels, class_mask_replay)
        grads_r = mlp_backward(weights, cache_r, replay_lambda * g_r)
        grads = [(a + c, b + d) for (a, b), (c, d) in zip(grads, grads_r)]
    return loss_new + replay_lambda * loss_replay, loss_new, loss_replay, grads


def train_step(
    weights: ModelWeights,
    new_features,
    new_labels,
    replay_features,
    replay_labels,
    config: TrainConfig,
    class_mask_new=None,
    class_mask_replay=None,
    state: Adam | None = None,
) -> tuple[ModelWeights, float, float]:
    """One full-batch update of the MLP on new rows plus replayed rows."""
    _, loss_new, loss_replay, grads = combined_loss_and_grads(
        weights,
        new_features,
        new_labels,
        replay_features,
        replay_labels,
        config.replay_lambda,
        class_mask_new,
        class_mask_replay,
    )
    return apply_update(weights, grads, config, state), loss_new, loss_replay


def _row_subset(mask, rows):
    if mask is None:
        return None
    m = np.asarray(mask)
    if m.dtype == bool and m.ndim == 2:
        return m[rows]
    return mask


def train_epoch(
    weights: ModelWeights,
    new_features,
    new_labels,
    replay_features,
    replay_labels,
    config: TrainConfig,
    class_mask_new=None,
    class_mask_replay=None,
    state: Adam | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[ModelWeights, float, float]:
    """One epoch: a single full-batch step, or row chunks when ``batch_size`` is set."""
    n = len(new_labels)
    if config.batch_size is None or config.batch_size >= n:
        return train_step(weights, new_features, new_labels, replay_features, replay_labels,
                          config, class_mask_new, class_mask_replay, state)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    order = rng.permutation(n)
    losses = []
    for start in range(0, n, config.batch_size):
        rows = order[start : start + config.batch_size]
        weights, ln, lr_ = train_step(
            weights, new_features[rows], new_labels[rows], replay_features, replay_labels,
            config, _row_subset(class_mask_new, rows), class_mask_replay, state,
        )
        losses.append((ln, lr_))
    return weights, float(np.mean([a for a, _ in losses])), float(np.mean([b for _, b in losses]))


# ---------------------------------------------------------------------------
# message passing

class NormalizedAdjacency:
    """``D^-1/2 (A + I) D^-1/2`` applied through a CSR matrix.

    Every application counts as one CSR traversal.
    """

    def __init__(self, graph: Graph):
        n = graph.num_nodes
        a = sp.csr_matrix(
            (np.ones(graph.num_edges), graph.csr_col_indices, graph.csr_row_offsets), shape=(n, n)
        )
        a = a + sp.identity(n, format="csr")
        deg = np.asarray(a.sum(axis=1)).ravel()
        inv_sqrt = 1.0 / np.sqrt(deg)
        d = sp.diags(inv_sqrt)
        self.matrix = (d @ a @ d).tocsr()
        self.matrix.sort_indices()
        self.matrix_t = self.matrix.T.tocsr()
        self.shape = (n, n)

    def apply(self, h) -> np.ndarray:
        csr_traversals.tick()
        return self.matrix @ h

    def apply_transpose(self, h) -> np.ndarray:
        csr_traversals.tick()
        return self.matrix_t @ h

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()


def normalized_adjacency(graph: Graph) -> NormalizedAdjacency:
    return NormalizedAdjacency(graph)


def gcn_forward(weights: ModelWeights, adj: NormalizedAdjacency, features) -> tuple[np.ndarray, Cache]:
    """GCN logits: message passing, then the shared feature transformation."""
    h = np.asarray(features, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != weights.dims[0]:
        raise ValueError(f"features of shape {h.shape} do not match input dim {weights.dims[0]}")
    if h.shape[0] != adj.shape[0]:
        raise ValueError("feature rows do not match graph size")
    cache = Cache()
    last = len(weights.layers) - 1
    for i, (w, b) in enumerate(weights.layers):
        h = adj.apply(h)
        cache.inputs.append(h)
        z = h @ w + b
        cache.pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    return h, cache


def gcn_backward(weights: ModelWeights, adj: NormalizedAdjacency, cache: Cache, grad_logits):
    return _backward(weights, cache, np.asarray(grad_logits, dtype=np.float64), adj.apply_transpose)


def gcn_logits(weights: ModelWeights, graph: Graph, features=None) -> np.ndarray:
    feats = graph.features if features is None else features
    logits, _ = gcn_forward(weights, normalized_adjacency(graph), feats)
    return logits


def gcn_inference(weights: ModelWeights, graph: Graph, features=None, class_mask=None) -> np.ndarray:
    """Predicted class per node using the MLP-trained weights as a GCN."""
    logits = gcn_logits(weights, graph, features)
    return masked_softmax(logits, class_mask).argmax(axis=1)


def gcn_train_step(
    weights: ModelWeights,
    adj: NormalizedAdjacency,
    graph_features,
    train_rows,
    train_labels,
    replay_features,
    replay_labels,
    config: TrainConfig,
    class_mask_new=None,
    class_mask_replay=None,
    state: Adam | None = None,
) -> tuple[ModelWeights, float, float]:
    """One update of the message-passing trainer.

    The loss on training rows goes through the full GCN forward pass.
    Replayed rows carry no structure and are treated as isolated nodes,
    which makes their forward pass the plain MLP.
    """
    logits, cache = gcn_forward(weights, adj, graph_features)
    rows = np.asarray(train_rows, dtype=np.int64)
    loss_new, g_rows = cross_entropy(logits[rows], train_labels, class_mask_new)
    g = np.zeros_like(logits)
    np.add.at(g, rows, g_rows)
    grads = gcn_backward(weights, adj, cache, g)
    loss_replay = 0.0
    if config.replay_lambda > 0 and len(replay_labels):
        logits_r, cache_r = mlp_forward(weights, replay_features)
        loss_replay, g_r = cross_entropy(logits_r, replay_labels, class_mask_replay)
        grads_r = mlp_backward(weights, cache_r, config.replay_lambda * g_r)
        grads = [(a + c, b + d) for (a, b), (c, d) in zip(grads, grads_r)]
    return apply_update(weights, grads, config, state), loss_new, loss_replay


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"ECGLW001"


def save_weights(path, weights: ModelWeights, config: TrainConfig | None = None, seed: int | None = None) -> None:
    """Binary checkpoint plus a ``.json`` sidecar.

    Layout (little-endian): magic, uint32 number of dims, uint32 dims, then
    for each layer the row-major float64 weight matrix followed by its bias.
    """
    path = Path(path)
    dims = weights.dims
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
        for w, b in weights.layers:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    meta = {"dims": list(dims), "seed": seed, "config": asdict(config) if config is not None else None}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, sort_keys=True, indent=2), encoding="utf-8")


def load_weights(path) -> ModelWeights:
    data = Path(path).read_bytes()
    if data[: len(_MAGIC)] != _MAGIC:
        raise ValueError("not a weight checkpoint")
    off = len(_MAGIC)
    (k,) = struct.unpack_from("<I", data, off)
    dims = struct.unpack_from(f"<{k}I", data, off + 4)
    off += 4 + 4 * k
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=off).reshape(fan_in, fan_out)
        off += 8 * fan_in * fan_out
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        layers.append((w.astype(np.float64), b.astype(np.float64)))
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return ModelWeights(layers)
