# # A class-incremental run
#
# Four tasks arrive in sequence, two new classes each. Fine-tuning forgets
# the old classes; replaying a small buffer of well-chosen nodes does not;
# joint training on everything seen so far is the ceiling.

from ecgl.continual_driver import RegimeConfig, run_continual
from ecgl.efficient_learner import TrainConfig
from ecgl.graph_store import generate_sbm

graph, tasks = generate_sbm(4, 2, 100, 0.05, 0.01, 0.002, 16, 3.0, seed=0)
cfg = RegimeConfig(regime="class_il", sample_budget=20,
                   train=TrainConfig(epochs=200, hidden_dims=(64,), seed=0))

records = {m: run_continual(graph, tasks, cfg, m) for m in ("finetune", "ecgl", "joint")}

# ## Performance matrices
#
# Row i is the state after training through task i; column j is accuracy on
# task j.

for method, rec in records.items():
    print(f"\n{method}")
    print(rec.performance.to_csv(), end="")

# ## Summary

print()
for method, rec in records.items():
    pm = rec.performance
    last = pm.num_tasks - 1
    print(f"{method:9s} AA={pm.average_accuracy(last):.3f} AF={pm.average_forgetting(last):+.3f} "
          f"buffer={rec.buffer_sizes[-1]}")
