"""Performance-matrix bookkeeping, AA/AF metrics and timing summaries.

Task indices are 0-based: entry ``(i, j)`` is the accuracy on task ``j``
after training through task ``i``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


class PerformanceMatrix:
    def __init__(self, num_tasks: int):
        self.entries = np.full((num_tasks, num_tasks), np.nan)
        self.populated = np.zeros((num_tasks, num_tasks), dtype=bool)

    @property
    def num_tasks(self) -> int:
        return self.entries.shape[0]

    def record(self, i: int, j: int, accuracy: float) -> "PerformanceMatrix":
        if not (0 <= i < self.num_tasks and 0 <= j < self.num_tasks):
            raise MetricError(f"entry ({i}, {j}) outside a {self.num_tasks}-task matrix")
        if j > i:
            raise MetricError(f"cannot record task {j} after training only through task {i} (future task)")
        if not 0.0 <= accuracy <= 1.0:
            raise MetricError(f"accuracy {accuracy} outside [0, 1]")
        if self.populated[i, j]:
            raise MetricError(f"entry ({i}, {j}) already recorded; overwrite refused")
        self.entries[i, j] = accuracy
        self.populated[i, j] = True
        return self

    def get(self, i: int, j: int) -> float:
        if not self.populated[i, j]:
            raise MetricError(f"entry ({i}, {j}) not populated")
        return float(self.entries[i, j])

    def _require(self, cells) -> None:
        missing = [c for c in cells if not self.populated[c]]
        if missing:
            raise MetricError(f"unpopulated entries: {missing}")

    def average_accuracy(self, i: int) -> float:
        self._require([(i, j) for j in range(i + 1)])
        return float(sum(self.entries[i, j] for j in range(i + 1)) / (i + 1))

    def average_forgetting(self, i: int) -> float:
        """Mean of ``M[i, j] - M[j, j]`` over ``j < i``; usually negative."""
        if i < 1:
            raise MetricError("average forgetting is undefined after the first task")
        self._require([(i, j) for j in range(i)] + [(j, j) for j in range(i)])
        return float(sum(self.entries[i, j] - self.entries[j, j] for j in range(i)) / i)

    def aa_series(self) -> list[float]:
        return [self.average_accuracy(i) for i in range(self.num_tasks)]

    def af_series(self) -> list[float | None]:
        return [None] + [self.average_forgetting(i) for i in range(1, self.num_tasks)]

    def to_list(self) -> list[list[float | None]]:
        return [
            [float(self.entries[i, j]) if self.populated[i, j] else None for j in range(self.num_tasks)]
            for i in range(self.num_tasks)
        ]

    @classmethod
    def from_list(cls, rows) -> "PerformanceMatrix":
        pm = cls(len(rows))
        for i, row in enumerate(rows):
            for j, v in enumerate(row):
                if v is not None:
                    pm.record(i, j, v)
        return pm

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task"] + [f"task_{j}" for j in range(self.num_tasks)])
        for i, row in enumerate(self.to_list()):
            w.writerow([i] + ["" if v is None else repr(v) for v in row])
        return buf.getvalue()


def metrics_dict(pm: PerformanceMatrix) -> dict:
    """AA/AF per task index, JSON-ready."""
    return {"average_accuracy": pm.aa_series(), "average_forgetting": pm.af_series()}


# ---------------------------------------------------------------------------
# timing

@dataclass
class TimingStats:
    mean: float
    std: float
    samples: int


@dataclass
class TimingReport:
    methods: dict[str, TimingStats]
    speedup: float | None  # ecgl_gcn_trainer mean / ecgl mean

    def speedup_text(self) -> str:
        return "n/a" if self.speedup is None else format_speedup(self.speedup)


def format_speedup(ratio: float) -> str:
    return f"{ratio:.2f}x"


def timing_report(records: dict[str, list[float]], baseline: str = "ecgl_gcn_trainer", target: str = "ecgl") -> TimingReport:
    """Mean and population std of per-epoch wall-clock samples for each method."""
    if not records:
        raise MetricError("no timing samples")
    stats = {}
    for name, samples in records.items():
        if len(samples) == 0:
            raise MetricError(f"no timing samples for {name}")
        a = np.asarray(samples, dtype=np.float64)
        stats[name] = TimingStats(float(a.mean()), float(a.std()), len(a))
    speedup = None
    if baseline in stats and target in stats and stats[target].mean > 0:
        speedup = stats[baseline].mean / stats[target].mean
    return TimingReport(stats, speedup)


def timing_table_csv(train: dict[str, list[float]], inference: dict[str, list[float]]) -> str:
    """Train/inference ms per method, plus an ``Improv.`` row of speedups."""
    tr, inf = timing_report(train), timing_report(inference)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "train_ms_mean", "train_ms_std", "train_samples",
                "inference_ms_mean", "inference_ms_std", "inference_samples"])
    for name in tr.methods:
        t, i = tr.methods[name], inf.methods.get(name)
        w.writerow([
            name, f"{t.mean:.4f}", f"{t.std:.4f}", t.samples,
            "" if i is None else f"{i.mean:.4f}",
            "" if i is None else f"{i.std:.4f}",
            "" if i is None else i.samples,
        ])
    if tr.speedup is not None or inf.speedup is not None:
        w.writerow(["Improv.", tr.speedup_text(), "", "", inf.speedup_text(), "", ""])
    return buf.getvalue()


def mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        return math.nan, math.nan
    return float(a.mean()), float(a.std())
