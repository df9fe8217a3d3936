import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecgl.efficient_learner import (
    Adam,
    ModelWeights,
    TrainConfig,
    combined_loss_and_grads,
    cross_entropy,
    gcn_backward,
    gcn_forward,
    gcn_inference,
    gcn_logits,
    gcn_train_step,
    init_weights,
    load_weights,
    masked_softmax,
    mlp_backward,
    mlp_forward,
    normalized_adjacency,
    save_weights,
    train_epoch,
    train_step,
)
from ecgl.graph_store import Graph, csr_traversals

from conftest import dense_adjacency, random_graph


def naive_mlp(weights, x):
    h = [list(row) for row in x]
    last = len(weights.layers) - 1
    for li, (w, b) in enumerate(weights.layers):
        out = []
        for row in h:
            o = []
            for j in range(w.shape[1]):
                z = b[j]
                for k in range(w.shape[0]):
                    z += row[k] * w[k, j]
                o.append(z if li == last else max(z, 0.0))
            out.append(o)
        h = out
    return np.array(h)


def fd_grads(f, weights, eps=1e-5):
    out = []
    for w, b in weights.layers:
        pair = []
        for p in (w, b):
            g = np.zeros_like(p)
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                old = p[idx]
                p[idx] = old + eps
                up = f()
                p[idx] = old - eps
                down = f()
                p[idx] = old
                g[idx] = (up - down) / (2 * eps)
            pair.append(g)
        out.append(tuple(pair))
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


# --- init / forward ----------------------------------------------------------

def test_init_shapes():
    w = init_weights((4, 3), seed=1)
    assert len(w.layers) == 1
    assert w.layers[0][0].shape == (4, 3)
    np.testing.assert_array_equal(w.layers[0][1], np.zeros(3))


def test_init_deterministic():
    a, b = init_weights((5, 7, 2), 3), init_weights((5, 7, 2), 3)
    np.testing.assert_array_equal(a.flat(), b.flat())


def test_init_bound():
    w = init_weights((8, 16, 5), seed=0)
    assert np.abs(w.layers[0][0]).max() <= math.sqrt(6 / 24)
    assert np.abs(w.layers[1][0]).max() <= math.sqrt(6 / 21)


def test_init_rejects_single_dim():
    with pytest.raises(ValueError):
        init_weights((4,))


def test_forward_zero_weights(rng):
    w = ModelWeights([(np.zeros((3, 4)), np.zeros(4)), (np.zeros((4, 2)), np.zeros(2))])
    logits, _ = mlp_forward(w, rng.normal(size=(5, 3)))
    np.testing.assert_array_equal(logits, 0)


def test_forward_identity(rng):
    x = rng.normal(size=(6, 3))
    logits, _ = mlp_forward(ModelWeights([(np.eye(3), np.zeros(3))]), x)
    np.testing.assert_array_equal(logits, x)


def test_forward_matches_naive(rng):
    w = init_weights((4, 6, 3), seed=2)
    w.layers[0] = (w.layers[0][0], rng.normal(size=6) * 0.1)
    x = rng.normal(size=(7, 4))
    logits, _ = mlp_forward(w, x)
    np.testing.assert_allclose(logits, naive_mlp(w, x), rtol=1e-12, atol=1e-14)


def test_forward_dim_mismatch(rng):
    with pytest.raises(ValueError):
        mlp_forward(init_weights((4, 2)), rng.normal(size=(3, 5)))


# --- loss --------------------------------------------------------------------

@pytest.mark.parametrize("c", [2, 5, 10])
def test_ce_uniform_logits(c):
    loss, _ = cross_entropy(np.zeros((4, c)), [0, 1, 0, 1])
    assert loss == pytest.approx(math.log(c))


def test_ce_saturated():
    z = np.zeros((3, 4))
    z[np.arange(3), [0, 2, 3]] = 1000.0
    loss, g = cross_entropy(z, [0, 2, 3])
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(g))


def test_ce_label_outside_mask():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 4)), [3], class_mask=[0, 1])


@pytest.mark.parametrize("mask", [None, [1, 2, 4], "rows"])
def test_ce_gradient_finite_difference(rng, mask):
    z = rng.normal(size=(6, 5))
    y = np.array([1, 2, 4, 1, 2, 4])
    if mask == "rows":
        mask = np.zeros((6, 5), dtype=bool)
        mask[:3, [1, 2, 4]] = True
        mask[3:, [0, 1, 2, 4]] = True
    _, g = cross_entropy(z, y, mask)
    eps = 1e-5
    num = np.zeros_like(z)
    for idx in np.ndindex(*z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += eps
        zm[idx] -= eps
        num[idx] = (cross_entropy(zp, y, mask)[0] - cross_entropy(zm, y, mask)[0]) / (2 * eps)
    assert rel_err(g, num) <= 1e-4
    if mask is not None and not isinstance(mask, np.ndarray):
        assert np.all(g[:, [0, 3]] == 0)


@settings(max_examples=40, deadline=None)
@given(c=st.integers(2, 8), k=st.integers(1, 8), seed=st.integers(0, 2**31))
def test_ce_nonneg_and_uniform_value(c, k, seed):
    k = min(k, c)
    rng = np.random.default_rng(seed)
    mask = rng.choice(c, k, replace=False)
    y = rng.choice(mask, size=5)
    loss, _ = cross_entropy(np.zeros((5, c)), y, mask)
    assert loss == pytest.approx(math.log(k))
    loss2, _ = cross_entropy(rng.normal(size=(5, c)) * 5, y, mask)
    assert loss2 >= 0


@settings(max_examples=40, deadline=None)
@given(c=st.integers(1, 8), seed=st.integers(0, 2**31), scale=st.floats(0.1, 500))
def test_softmax_rows_sum_to_one(c, seed, scale):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(4, c)) * scale
    mask = rng.choice(c, max(1, c // 2), replace=False)
    for m in (None, mask):
        p = masked_softmax(z, m)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


# --- training ----------------------------------------------------------------

def test_train_step_lambda0_empty_replay(rng):
    w = init_weights((3, 5, 2), 0)
    x, y = rng.normal(size=(8, 3)), rng.integers(0, 2, 8)
    cfg = TrainConfig(replay_lambda=0.0, learning_rate=0.1)
    a, ln, lr_ = train_step(w, x, y, np.zeros((0, 3)), np.zeros(0, int), cfg)
    _, g = cross_entropy(mlp_forward(w, x)[0], y)
    grads = mlp_backward(w, mlp_forward(w, x)[1], g)
    shrink = 1 - 0.1 * cfg.weight_decay
    for (wa, ba), (w0, b0), (gw, gb) in zip(a.layers, w.layers, grads):
        np.testing.assert_allclose(wa, shrink * w0 - 0.1 * gw)
        np.testing.assert_allclose(ba, b0 - 0.1 * gb)
    assert lr_ == 0.0


def test_train_step_lambda0_ignores_replay_contents(rng):
    w = init_weights((3, 5, 2), 0)
    x, y = rng.normal(size=(8, 3)), rng.integers(0, 2, 8)
    cfg = TrainConfig(replay_lambda=0.0)
    a = train_step(w, x, y, rng.normal(size=(4, 3)), np.array([0, 1, 1, 0]), cfg)[0]
    b = train_step(w, x, y, rng.normal(size=(6, 3)) * 9, np.array([1, 1, 1, 0, 0, 0]), cfg)[0]
    np.testing.assert_array_equal(a.flat(), b.flat())


def test_train_step_lambda_weights_losses(rng):
    w = init_weights((3, 4, 2), 0)
    x, y = rng.normal(size=(8, 3)), rng.integers(0, 2, 8)
    xr, yr = rng.normal(size=(5, 3)), rng.integers(0, 2, 5)
    total, ln, lr_, _ = combined_loss_and_grads(w, x, y, xr, yr, 1.0)
    assert total == pytest.approx(ln + lr_)
    assert TrainConfig().replay_lambda == 1.0


def test_training_decreases_loss():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-2, 1, size=(20, 2)), rng.normal(2, 1, size=(20, 2))])
    y = np.repeat([0, 1], 20)
    w = init_weights((2, 8, 2), 0)
    cfg = TrainConfig(learning_rate=0.1)
    empty_x, empty_y = np.zeros((0, 2)), np.zeros(0, int)
    start = cross_entropy(mlp_forward(w, x)[0], y)[0]
    for _ in range(200):
        w, loss, _ = train_step(w, x, y, empty_x, empty_y, cfg)
    assert cross_entropy(mlp_forward(w, x)[0], y)[0] < start
    assert loss < start


def test_adam_optimizer_runs():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(30, 3)), rng.integers(0, 3, 30)
    w = init_weights((3, 8, 3), 0)
    cfg = TrainConfig(learning_rate=0.01, optimizer="adam")
    state = Adam(w)
    start = cross_entropy(mlp_forward(w, x)[0], y)[0]
    for _ in range(100):
        w, _, _ = train_step(w, x, y, np.zeros((0, 3)), np.zeros(0, int), cfg, state=state)
    assert cross_entropy(mlp_forward(w, x)[0], y)[0] < start


def test_minibatch_epoch(rng):
    x, y = rng.normal(size=(25, 3)), rng.integers(0, 2, 25)
    w = init_weights((3, 4, 2), 0)
    cfg = TrainConfig(batch_size=10)
    out, ln, _ = train_epoch(w, x, y, np.zeros((0, 3)), np.zeros(0, int), cfg)
    assert not np.array_equal(out.flat(), w.flat())
    assert np.isfinite(ln)


def test_combined_gradient_finite_difference():
    rng = np.random.default_rng(7)
    w = init_weights((4, 6, 5), 1)
    w.layers[0] = (w.layers[0][0], rng.normal(size=6) * 0.1)
    x, y = rng.normal(size=(14, 4)), rng.choice([0, 1, 2], 14)
    xr, yr = rng.normal(size=(6, 4)), rng.choice([3, 4], 6)
    mask_r = np.zeros((6, 5), dtype=bool)
    mask_r[:, [3, 4]] = True
    args = (x, y, xr, yr, 0.7, [0, 1, 2], mask_r)
    _, _, _, grads = combined_loss_and_grads(w, *args)
    num = fd_grads(lambda: combined_loss_and_grads(w, *args)[0], w)
    for (gw, gb), (nw, nb) in zip(grads, num):
        assert rel_err(gw, nw) <= 1e-4
        assert rel_err(gb, nb) <= 1e-4


def test_mlp_epoch_never_touches_csr(rng):
    x, y = rng.normal(size=(40, 3)), rng.integers(0, 2, 40)
    w = init_weights((3, 8, 2), 0)
    csr_traversals.reset()
    for _ in range(5):
        w, _, _ = train_epoch(w, x, y, x[:5], y[:5], TrainConfig())
    assert csr_traversals.count == 0


# --- message passing ---------------------------------------------------------

def dense_norm_adj(graph):
    a = dense_adjacency(graph) + np.eye(graph.num_nodes)
    d = a.sum(axis=1)
    return a / np.sqrt(d)[:, None] / np.sqrt(d)[None, :]


def test_norm_adj_edgeless():
    g = Graph.from_edges(4, np.zeros((0, 2)), np.zeros((4, 1)), np.zeros(4, int))
    np.testing.assert_array_equal(normalized_adjacency(g).to_dense(), np.eye(4))


def test_norm_adj_single_edge():
    g = Graph.from_edges(2, [(0, 1)], np.zeros((2, 1)), np.zeros(2, int))
    np.testing.assert_allclose(normalized_adjacency(g).to_dense(), np.full((2, 2), 0.5))


def test_norm_adj_path():
    g = Graph.from_edges(3, [(0, 1), (1, 2)], np.zeros((3, 1)), np.zeros(3, int))
    a = normalized_adjacency(g).to_dense()
    assert a[0, 1] == pytest.approx(1 / math.sqrt(6))
    np.testing.assert_allclose(a, dense_norm_adj(g), rtol=1e-14)


def dense_gcn(weights, a, x):
    h = x
    last = len(weights.layers) - 1
    for i, (w, b) in enumerate(weights.layers):
        z = (a @ h) @ w + b
        h = z if i == last else np.maximum(z, 0)
    return h


@pytest.mark.parametrize("seed", range(3))
def test_gcn_matches_dense(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(12, 0.3, rng, feature_dim=4)
    w = init_weights((4, 8, 3), seed)
    logits = gcn_logits(w, g)
    np.testing.assert_allclose(logits, dense_gcn(w, dense_norm_adj(g), g.features), rtol=1e-10, atol=1e-12)
    np.testing.assert_array_equal(gcn_inference(w, g), logits.argmax(axis=1))


def test_gcn_edgeless_equals_mlp(rng):
    x = rng.normal(size=(9, 4))
    g = Graph.from_edges(9, np.zeros((0, 2)), x, np.zeros(9, int))
    w = init_weights((4, 16, 3), 5)
    mlp_logits, _ = mlp_forward(w, x)
    np.testing.assert_array_equal(gcn_logits(w, g), mlp_logits)
    np.testing.assert_array_equal(gcn_inference(w, g), mlp_logits.argmax(axis=1))


def test_gcn_symmetric_features_give_equal_predictions():
    n = 6
    g = Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)], np.tile([[0.4, -1.0, 2.0]], (n, 1)), np.zeros(n, int))
    w = init_weights((3, 8, 4), 0)
    pred = gcn_inference(w, g)
    assert len(set(pred.tolist())) == 1


def test_gcn_masked_predictions(rng):
    g = random_graph(10, 0.3, rng, feature_dim=3)
    w = init_weights((3, 8, 6), 0)
    pred = gcn_inference(w, g, class_mask=[2, 5])
    assert set(pred.tolist()) <= {2, 5}


def test_gcn_train_gradient_finite_difference():
    rng = np.random.default_rng(3)
    g = random_graph(12, 0.3, rng, feature_dim=3)
    adj = normalized_adjacency(g)
    w = init_weights((3, 5, 4), 2)
    rows = np.array([0, 2, 3, 7, 9])
    y = rng.integers(0, 4, len(rows))

    def loss():
        logits, _ = gcn_forward(w, adj, g.features)
        return cross_entropy(logits[rows], y)[0]

    logits, cache = gcn_forward(w, adj, g.features)
    _, g_rows = cross_entropy(logits[rows], y)
    full = np.zeros_like(logits)
    full[rows] = g_rows
    grads = gcn_backward(w, adj, cache, full)
    num = fd_grads(loss, w)
    for (gw, gb), (nw, nb) in zip(grads, num):
        assert rel_err(gw, nw) <= 1e-4
        assert rel_err(gb, nb) <= 1e-4


def test_gcn_train_step_counts_traversals(rng):
    g = random_graph(15, 0.3, rng, feature_dim=3)
    adj = normalized_adjacency(g)
    w = init_weights((3, 6, 2), 0)
    csr_traversals.reset()
    gcn_train_step(w, adj, g.features, np.arange(10), g.labels[:10], np.zeros((0, 3)), np.zeros(0, int), TrainConfig())
    assert csr_traversals.count > 0


# --- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    w = init_weights((5, 7, 3), 9)
    cfg = TrainConfig(hidden_dims=(7,), seed=9)
    p = tmp_path / "w.bin"
    save_weights(p, w, cfg, seed=9)
    back = load_weights(p)
    assert back.dims == (5, 7, 3)
    np.testing.assert_array_equal(back.flat(), w.flat())
    meta = json.loads((tmp_path / "w.bin.json").read_text())
    assert meta["dims"] == [5, 7, 3] and meta["seed"] == 9 and meta["config"]["hidden_dims"] == [7]
    # header: magic, count, dims; then 8 bytes per parameter
    assert p.stat().st_size == 8 + 4 + 4 * 3 + 8 * (5 * 7 + 7 + 7 * 3 + 3)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_weights(p)
