# # Where the time goes
#
# Training a GCN touches the sparse adjacency twice per layer per epoch.
# Training the MLP does not touch it at all, and the operation counter
# proves it. The graph here has 20k nodes and a mean degree near 27.

import numpy as np

from ecgl.continual_driver import RegimeConfig, run_continual
from ecgl.efficient_learner import TrainConfig, init_weights, train_epoch
from ecgl.evaluation import format_speedup, timing_report
from ecgl.graph_store import csr_traversals, generate_sbm

graph, tasks = generate_sbm(1, 4, 5000, 0.004, 0.0005, 0.0, 64, 3.0, seed=0)
print(f"{graph.num_nodes} nodes, mean stored degree {graph.num_edges / graph.num_nodes:.1f}")

cfg = RegimeConfig(regime="class_il", sample_budget=100,
                   train=TrainConfig(epochs=5, hidden_dims=(256,), seed=0))
epochs = {}
for method in ("ecgl", "ecgl_gcn_trainer"):
    rec = run_continual(graph, tasks, cfg, method)
    epochs[method] = rec.timings[0]["train_epoch_ms"]
    print(f"{method:17s} mean epoch {np.mean(epochs[method]):7.1f} ms")

print("training speedup:", format_speedup(timing_report(epochs).speedup))

# ## Counting structure accesses

w = init_weights((64, 256, 4), seed=0)
train = tasks[0].train_ids
csr_traversals.reset()
train_epoch(w, graph.features[train], graph.labels[train], np.zeros((0, 64)), np.zeros(0, int), cfg.train)
print("CSR traversals during one MLP epoch:", csr_traversals.count)
