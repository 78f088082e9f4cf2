"""Per-task metrics and the relative multi-task performance score."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .network import MultiTaskNet
from .tasks import TaskFamily


class ZeroBaseline(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class MetricTable:
    names: tuple
    values: tuple
    lower_is_better: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "lower_is_better", tuple(bool(v) for v in self.lower_is_better))
        if not len(self.names) == len(self.values) == len(self.lower_is_better):
            raise ValueError("names, values and directions must align")

    @property
    def directions(self) -> List[int]:
        return [1 if d else 0 for d in self.lower_is_better]

    def to_dict(self) -> dict:
        return {"names": list(self.names), "values": list(self.values), "lower_is_better": list(self.lower_is_better)}

    @classmethod
    def from_dict(cls, d) -> "MetricTable":
        return cls(d["names"], d["values"], d["lower_is_better"])

    def subset(self, idx: Sequence[int]) -> "MetricTable":
        return MetricTable([self.names[i] for i in idx], [self.values[i] for i in idx], [self.lower_is_better[i] for i in idx])


def delta_mtl(model: MetricTable, baseline: MetricTable) -> float:
    """Mean direction-corrected relative improvement over the baseline, in percent."""
    if model.names != baseline.names or model.lower_is_better != baseline.lower_is_better:
        raise ValueError("model and baseline tables are not aligned")
    total = 0.0
    for m, b, low in zip(model.values, baseline.values, model.lower_is_better):
        if b == 0:
            raise ZeroBaseline("baseline metric is zero")
        sign = -1.0 if low else 1.0
        total += sign * (m - b) / b
    return 100.0 * total / len(model.values)


def task_metric(net: MultiTaskNet, family: TaskFamily, task: int, split: str = "test") -> float:
    x, y = family.data(split, task)
    out = net.predict(task, x)
    if family.tasks[task].loss == "softmax_ce":
        return float(np.mean(np.argmax(out, axis=1) == np.asarray(y)))
    y = np.asarray(y, dtype=np.float64).reshape(out.shape)
    return float(np.mean((out - y) ** 2))


def evaluate(net: MultiTaskNet, family: TaskFamily, split: str = "test") -> MetricTable:
    """MSE (lower better) for regression tasks, accuracy for classification."""
    vals = [task_metric(net, family, t, split) for t in range(family.num_tasks)]
    return MetricTable(family.names, vals, [t.lower_is_better for t in family.tasks])
