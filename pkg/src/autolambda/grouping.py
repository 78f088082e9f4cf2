"""Exhaustive fixed-grouping search and Auto-Lambda relationship matrices."""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
from scipy.stats import kendalltau

from .config import RunConfig
from .experiment import run
from .tasks import TaskFamily


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class GroupingResult:
    subset: tuple  # task indices trained jointly
    metrics: Dict[int, float]  # task -> test metric
    val_loss: Dict[int, float]  # task -> loss on the held-out val split
    delta_pct: Dict[int, float]  # task -> signed % change vs its single-task run

    @property
    def bitmask(self) -> int:
        return sum(1 << t for t in self.subset)


@dataclass(frozen=True)
class RelationshipMatrix:
    names: tuple
    values: np.ndarray  # (i, j): converged lambda_j with primary set {i}

    def __getitem__(self, ij):
        return self.values[ij]


def all_subsets(K: int) -> List[tuple]:
    """Nonempty subsets ordered by bitmask."""
    return [tuple(t for t in range(K) if m >> t & 1) for m in range(1, 2 ** K)]


def _map(fn, jobs: Sequence, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _grouping_job(args):
    cfg, family, subset, seeds = args
    K = family.num_tasks
    mask = [1.0 if t in subset else 0.0 for t in range(K)]
    metrics, vals = [], []
    for s in seeds:
        c = cfg.replace(**{"strategy.kind": "equal", "strategy.mask": mask, "strategy.primary": list(subset), "seed": s})
        log = run(c, family=family)
        metrics.append(log.final.values)
        vals.append(log.final_val.values)
    return np.mean(metrics, axis=0), np.mean(vals, axis=0)


def grouping_search(family: TaskFamily, cfg: RunConfig, max_runs: int = 63, seeds: int = 1, jobs: int = 1) -> List[GroupingResult]:
    """Train one equal-weighted network per nonempty task subset.

    Each run uses the same family, budget and seed; with ``seeds=2`` every
    subset is averaged over two seeds. Results are ordered by subset bitmask.
    """
    K = family.num_tasks
    subsets = all_subsets(K)
    if len(subsets) * seeds > max_runs:
        raise BudgetExceeded(f"{len(subsets) * seeds} trainings exceed the cap of {max_runs}")
    seed_list = [cfg.seed + i for i in range(seeds)]
    outs = _map(_grouping_job, [(cfg, family, s, seed_list) for s in subsets], jobs)
    single = {s[0]: outs[i][0][s[0]] for i, s in enumerate(subsets) if len(s) == 1}
    lower = [t.lower_is_better for t in family.tasks]
    results = []
    for subset, (metric, val) in zip(subsets, outs):
        delta = {}
        for t in subset:
            sign = -1.0 if lower[t] else 1.0
            delta[t] = 100.0 * sign * (metric[t] - single[t]) / single[t] if single[t] else float("nan")
        results.append(GroupingResult(subset, {t: float(metric[t]) for t in subset}, {t: float(val[t]) for t in subset}, delta))
    return results


def best_groupings(results: Sequence[GroupingResult], family: TaskFamily, key: str = "metrics") -> Dict[int, GroupingResult]:
    """For each task, the grouping with the best value of ``key`` (metrics or val_loss)."""
    best: Dict[int, GroupingResult] = {}
    for t, info in enumerate(family.tasks):
        lower = info.lower_is_better if key == "metrics" else True
        cands = [r for r in results if t in r.subset]
        score = lambda r: getattr(r, key)[t]  # noqa: E731
        best[t] = min(cands, key=score) if lower else max(cands, key=score)
    return best


def write_grouping_csv(results: Sequence[GroupingResult], family: TaskFamily, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subset_bitmask", "task", "metric", "delta_pct"])
        for r in results:
            for t in r.subset:
                w.writerow([r.bitmask, family.names[t], repr(r.metrics[t]), repr(r.delta_pct[t])])
    return path


def _relation_job(args):
    cfg, family, i = args
    c = cfg.replace(**{"strategy.kind": "autolambda", "strategy.primary": [i]})
    return run(c, family=family).converged_lambda()


def relationship_matrix(family: TaskFamily, cfg: RunConfig, jobs: int = 1) -> RelationshipMatrix:
    """Row i holds the converged weights of an auxiliary-learning run with primary task i."""
    K = family.num_tasks
    rows = _map(_relation_job, [(cfg, family, i) for i in range(K)], jobs)
    return RelationshipMatrix(tuple(family.names), np.vstack(rows))


def write_relationship_csv(mat: RelationshipMatrix, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["primary_task", "task", "metric", "delta_pct"])
        for i, name in enumerate(mat.names):
            for j, other in enumerate(mat.names):
                # metric column carries the converged weight; no baseline applies
                w.writerow([name, other, repr(float(mat.values[i, j])), ""])
    return path


def rank_agreement(scores: Sequence[float], reference: Sequence[float]) -> float:
    """Kendall tau between two orderings (ties handled by the tau-b variant)."""
    return float(kendalltau(scores, reference).statistic)
