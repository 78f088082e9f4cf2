"""Strategy comparison and the one-command reproduction presets.

Every preset builds its own planted family, runs a handful of trainings and
returns a plain dict of results; when ``out_dir`` is given it also writes
CSV tables, per-run trajectories and matplotlib figures there.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .config import RunConfig
from .experiment import RunLog, build_family, run
from .grouping import _map, best_groupings, grouping_search, rank_agreement, relationship_matrix, write_grouping_csv, write_relationship_csv
from .metrics import MetricTable, delta_mtl
from .tasks import TaskFamily

log = logging.getLogger("autolambda")


class MismatchedFamily(ValueError):
    pass


# -- compare ---------------------------------------------------------------------


@dataclass
class CompareRow:
    label: str
    delta: float
    metrics: MetricTable
    final_lambda: List[float]
    config_hash: str
    log: RunLog = field(repr=False, default=None)


@dataclass
class CompareResult:
    names: List[str]
    scored: List[int]
    baseline: MetricTable
    rows: List[CompareRow]

    def row(self, label: str) -> CompareRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strategy", "delta_mtl_pct"] + [f"metric_{n}" for n in self.names] + [f"lambda_{n}" for n in self.names])
            w.writerow(["single_task", "0.0"] + [repr(v) for v in self.baseline.values] + [""] * len(self.names))
            for r in self.rows:
                w.writerow([r.label, repr(r.delta)] + [repr(v) for v in r.metrics.values] + [repr(v) for v in r.final_lambda])
        return path

    def format(self) -> str:
        head = f"{'strategy':<16}{'delta%':>9}" + "".join(f"{n[:10]:>11}" for n in self.names)
        lines = [head]
        lines.append(f"{'single_task':<16}{0.0:>9.2f}" + "".join(f"{v:>11.4f}" for v in self.baseline.values))
        for r in self.rows:
            lines.append(f"{r.label:<16}{r.delta:>9.2f}" + "".join(f"{v:>11.4f}" for v in r.metrics.values))
        lines.append("final weights:")
        for r in self.rows:
            lines.append(f"  {r.label:<14}" + " ".join(f"{v:.4f}" for v in r.final_lambda))
        return "\n".join(lines)


def _family_key(cfg: RunConfig) -> str:
    return json.dumps({"family": cfg.to_dict()["family"], "seed": cfg.seed}, sort_keys=True)


def single_task_baselines(cfg: RunConfig, family: TaskFamily, tasks: Sequence[int]) -> Dict[int, float]:
    """Test metric of each task trained alone (equal weighting, one-task mask)."""
    out = {}
    K = family.num_tasks
    for t in tasks:
        mask = [1.0 if j == t else 0.0 for j in range(K)]
        c = cfg.replace(**{"strategy.kind": "equal", "strategy.mask": mask, "strategy.primary": [t]})
        out[t] = run(c, family=family).final.values[t]
    return out


def scored_tasks(cfg: RunConfig, family: TaskFamily) -> List[int]:
    """Tasks entering the relative score: everything except an appended noise task."""
    K = family.num_tasks
    return list(range(K - 1)) if cfg.family.noise_task else list(range(K))


def _compare_job(args):
    cfg, run_dir, family = args
    return run(cfg, out_dir=run_dir, family=family)


def compare(
    configs: Mapping[str, RunConfig],
    out_dir=None,
    scored: Optional[Sequence[int]] = None,
    baseline: Optional[Dict[int, float]] = None,
    family: Optional[TaskFamily] = None,
    jobs: int = 1,
) -> CompareResult:
    """Train every config on one shared family and tabulate the relative score against single-task runs."""
    if len(configs) < 1:
        raise ValueError("nothing to compare")
    items = list(configs.items())
    key = _family_key(items[0][1])
    for label, c in items[1:]:
        if _family_key(c) != key:
            raise MismatchedFamily(f"config {label!r} describes a different family or seed")
    first = items[0][1]
    family = build_family(first) if family is None else family
    scored = scored_tasks(first, family) if scored is None else list(scored)
    if baseline is None:
        baseline = single_task_baselines(first, family, scored)
    lower = [family.tasks[t].lower_is_better for t in scored]
    names = [family.names[t] for t in scored]
    base = MetricTable(names, [baseline[t] for t in scored], lower)

    out = Path(out_dir) if out_dir is not None else None
    logs = _map(_compare_job, [(c, None if out is None else out / label, family) for label, c in items], jobs)
    rows = []
    for (label, c), rl in zip(items, logs):
        model = MetricTable(names, [rl.final.values[t] for t in scored], lower)
        rows.append(CompareRow(label, delta_mtl(model, base), rl.final, list(rl.lam[-1]) if rl.lam else [], rl.config_hash, rl))
        log.info("%s: delta=%.3f%%", label, rows[-1].delta)
    result = CompareResult(family.names, scored, MetricTable(family.names, [baseline.get(t, float("nan")) for t in range(family.num_tasks)], [t.lower_is_better for t in family.tasks]), rows)
    if out is not None:
        from .plotting import plot_trajectory, plot_weight_comparison

        result.to_csv(out / "compare.csv")
        for r in rows:
            plot_trajectory(r.log, out / r.label / "trajectory.png", r.label)
        plot_weight_comparison({r.label: r.log for r in rows}, out / "weights.png")
    return result


# -- preset families -------------------------------------------------------------

# three real tasks with pairwise overlap 0.6, optionally plus the noise task
NOISE_FAMILY = {"num_tasks": 3, "rho": [[1, 0.6, 0.6], [0.6, 1, 0.6], [0.6, 0.6, 1]], "noise_task": True}
# primary task 0 plus auxiliaries ranked by overlap 0.8 > 0.4 > 0
RANKED_RHO = [[1, 0.8, 0.4, 0], [0.8, 1, 0.2, 0], [0.4, 0.2, 1, 0], [0, 0, 0, 1]]
RANKED_LEVELS = [0.8, 0.4, 0.0]
RANKED_FAMILY = {"num_tasks": 4, "rho": RANKED_RHO, "input_dim": 80}
# task A reads 4 of the 16 shared teacher units that task B reads
ASYM_FAMILY = {"num_tasks": 2, "rho": [[1, 1], [1, 1]], "features_per_task": [4, 16], "names": ["A", "B"], "teacher_kind": "units"}
GROUPING_FAMILY = {"num_tasks": 3, "rho": [[1, 0.8, 0.2], [0.8, 1, 0.2], [0.2, 0.2, 1]]}


def base_config(seed: int = 0, **overrides) -> RunConfig:
    cfg = RunConfig(seed=seed)
    return cfg.replace(**overrides) if overrides else cfg


def _with_family(family: dict, seed: int, overrides: Optional[dict] = None) -> RunConfig:
    d = RunConfig(seed=seed).to_dict()
    d["family"].update(family)
    cfg = RunConfig.from_dict(d)
    return cfg.replace(**overrides) if overrides else cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=float))


def preset_noise_sanity(seed: int = 0, out_dir=None, overrides: Optional[dict] = None) -> dict:
    """Equal vs Uncertainty vs Auto-Lambda on three real tasks plus the noise task."""
    base = _with_family(NOISE_FAMILY, seed, overrides)
    real = [0, 1, 2]
    configs = {
        "equal": base.replace(**{"strategy.kind": "equal"}),
        "uncertainty": base.replace(**{"strategy.kind": "uncertainty"}),
        "autolambda": base.replace(**{"strategy.kind": "autolambda", "strategy.primary": real}),
    }
    res = compare(configs, out_dir=out_dir)
    al = res.row("autolambda").log.converged_lambda()
    unc = res.row("uncertainty").log.lambda_array()
    summary = {
        "delta": {r.label: r.delta for r in res.rows},
        "final_lambda_noise": {r.label: r.final_lambda[-1] for r in res.rows},
        "autolambda_noise_ratio": float(al[-1] / np.mean(al[real])),
        # weights start at exp(0) = 1, so the minimum is already relative to the initial value
        "uncertainty_noise_min_weight": float(unc[:, -1].min()),
    }
    if out_dir is not None:
        _write_json(Path(out_dir) / "noise_sanity.json", summary)
    summary["result"] = res
    return summary


def preset_fd_vs_exact(seed: int = 0, out_dir=None, overrides: Optional[dict] = None) -> dict:
    """Auto-Lambda with the finite-difference and the exact meta-gradient on the noise family."""
    base = _with_family(NOISE_FAMILY, seed, overrides).replace(**{"strategy.kind": "autolambda", "strategy.primary": [0, 1, 2]})
    family = build_family(base)
    out = Path(out_dir) if out_dir is not None else None
    logs = {}
    for mode in ("fd", "exact"):
        logs[mode] = run(base.replace(**{"strategy.mode": mode}), out_dir=None if out is None else out / mode, family=family)
    diff = np.abs(logs["fd"].lambda_array() - logs["exact"].lambda_array())
    summary = {"mean_abs_diff": float(diff.mean()), "max_abs_diff": float(diff.max()), "per_task_mean_abs_diff": diff.mean(axis=0).tolist()}
    if out is not None:
        from .plotting import plot_weight_comparison

        plot_weight_comparison(logs, out / "fd_vs_exact.png", "finite difference vs exact")
        _write_json(out / "fd_vs_exact.json", summary)
    summary["logs"] = logs
    return summary


def preset_planted_relatedness(seed: int = 0, out_dir=None, overrides: Optional[dict] = None, full_matrix: bool = True) -> dict:
    """Relationship matrix on the ranked family plus the subset/superset pair."""
    out = Path(out_dir) if out_dir is not None else None
    ranked = _with_family(RANKED_FAMILY, seed, overrides)
    fam = build_family(ranked)
    if full_matrix:
        mat = relationship_matrix(fam, ranked)
        row0 = mat.values[0]
    else:
        row0 = run(ranked.replace(**{"strategy.kind": "autolambda", "strategy.primary": [0]}), family=fam).converged_lambda()
        mat = None
    tau = rank_agreement(row0[1:], RANKED_LEVELS)

    pair = _with_family(ASYM_FAMILY, seed, overrides)
    pfam = build_family(pair)
    pmat = relationship_matrix(pfam, pair)
    summary = {
        "ranked_row": row0.tolist(),
        "kendall_tau": tau,
        "asym_matrix": pmat.values.tolist(),
        # row = primary task: weight on A when B is primary vs weight on B when A is primary
        "lambda_B_to_A": float(pmat.values[1, 0]),
        "lambda_A_to_B": float(pmat.values[0, 1]),
    }
    if out is not None:
        from .plotting import plot_matrix

        out.mkdir(parents=True, exist_ok=True)
        if mat is not None:
            write_relationship_csv(mat, out / "relationship.csv")
            plot_matrix(mat.values, mat.names, out / "relationship.png", "converged weights")
        write_relationship_csv(pmat, out / "asymmetric_pair.csv")
        plot_matrix(pmat.values, pmat.names, out / "asymmetric_pair.png", "subset/superset pair")
        _write_json(out / "relatedness.json", summary)
    return summary


def preset_grouping_search(seed: int = 0, out_dir=None, overrides: Optional[dict] = None, jobs: int = 1) -> dict:
    """All 7 fixed groupings of a 3-task family against Auto-Lambda with every task primary."""
    cfg = _with_family(GROUPING_FAMILY, seed, overrides)
    fam = build_family(cfg)
    results = grouping_search(fam, cfg, jobs=jobs)
    best = best_groupings(results, fam, "val_loss")
    al = run(cfg.replace(**{"strategy.kind": "autolambda", "strategy.primary": None}), family=fam)
    K = fam.num_tasks
    ratio = [al.final_val.values[t] / best[t].val_loss[t] for t in range(K)]
    single = MetricTable(fam.names, [next(r for r in results if r.subset == (t,)).metrics[t] for t in range(K)], [True] * K)
    full = next(r for r in results if len(r.subset) == K)
    equal_delta = delta_mtl(MetricTable(fam.names, [full.metrics[t] for t in range(K)], [True] * K), single)
    summary = {
        "best_grouping": {fam.names[t]: list(best[t].subset) for t in range(K)},
        "autolambda_over_best_val": ratio,
        "autolambda_delta": delta_mtl(MetricTable(fam.names, al.final.values, [True] * K), single),
        "equal_delta": equal_delta,
        "autolambda_final_lambda": al.lam[-1],
    }
    if out_dir is not None:
        from .plotting import plot_bars

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_grouping_csv(results, fam, out / "grouping.csv")
        labels, vals = [], []
        for r in results:
            for t in r.subset:
                labels.append(f"{fam.names[t]}|{r.bitmask:0{K}b}")
                vals.append(r.delta_pct[t])
        plot_bars(labels, vals, out / "grouping.png", "delta vs single task (%)")
        _write_json(out / "grouping.json", summary)
    summary["results"] = results
    return summary


ABLATION_ROWS = {
    "default": {},
    "init_0.01": {"strategy.init": 0.01},
    "init_1.0": {"strategy.init": 1.0},
    "beta_3e-5": {"strategy.beta": 3e-5},
    "beta_3e-4": {"strategy.beta": 3e-4},
    "beta_1e-3": {"strategy.beta": 1e-3},
    "no_swap": {"training.batch_mode": "no_swap"},
}


def preset_ablation_grid(seed: int = 0, out_dir=None, overrides: Optional[dict] = None, rows: Optional[Sequence[str]] = None) -> dict:
    """One-factor-at-a-time Auto-Lambda ablations on the noise family."""
    base = _with_family(NOISE_FAMILY, seed, overrides).replace(**{"strategy.kind": "autolambda", "strategy.primary": [0, 1, 2]})
    rows = list(ABLATION_ROWS) if rows is None else list(rows)
    configs = {name: base.replace(**ABLATION_ROWS[name]) for name in rows}
    res = compare(configs, out_dir=out_dir)
    table = {}
    for r in res.rows:
        lam = r.log.converged_lambda()
        table[r.label] = {
            "delta": r.delta,
            "mean_real_lambda": float(lam[:-1].mean()),
            "noise_lambda": float(lam[-1]),
            "noise_ratio": float(lam[-1] / lam[:-1].mean()),
        }
    if out_dir is not None:
        _write_json(Path(out_dir) / "ablation.json", table)
    return {"table": table, "result": res}


PRESETS = {
    "noise-sanity": preset_noise_sanity,
    "planted-relatedness": preset_planted_relatedness,
    "grouping-search": preset_grouping_search,
    "fd-vs-exact": preset_fd_vs_exact,
    "ablation-grid": preset_ablation_grid,
}
