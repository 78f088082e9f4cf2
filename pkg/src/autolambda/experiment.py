"""Training loop, run logs and trajectory CSV files."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .autodiff import NonFinite
from .config import RunConfig
from .metrics import MetricTable, evaluate
from .network import SGD, MultiTaskNet, NetworkSpec, build_network
from .tasks import (
    IoError,
    RelatednessPlan,
    TaskFamily,
    add_noise_task,
    gen_teacher_family,
    load_csv_dataset,
    sample_batch_pair,
)
from .weighting import DWA, GCS, AutoLambda, Equal, LambdaState, Strategy, Uncertainty

log = logging.getLogger("autolambda")


class NumericalDivergence(FloatingPointError):
    def __init__(self, message, partial_log=None):
        super().__init__(message)
        self.partial_log = partial_log


@dataclass
class RunLog:
    names: List[str]
    steps: List[int] = field(default_factory=list)
    lam: List[List[float]] = field(default_factory=list)
    train_loss: List[List[float]] = field(default_factory=list)
    val_loss: List[List[float]] = field(default_factory=list)
    final: Optional[MetricTable] = None  # test split
    final_val: Optional[MetricTable] = None  # held-out val split
    config_hash: str = ""
    wall_clock: float = 0.0
    strategy_state: dict = field(default_factory=dict)

    @property
    def num_tasks(self) -> int:
        return len(self.names)

    def lambda_array(self) -> np.ndarray:
        return np.asarray(self.lam, dtype=np.float64).reshape(len(self.steps), self.num_tasks)

    def converged_lambda(self, tail: float = 0.1) -> np.ndarray:
        """Mean weights over the final ``tail`` fraction of steps."""
        lam = self.lambda_array()
        if not len(lam):
            raise ValueError("empty log")
        n = max(1, int(math.ceil(tail * len(lam))))
        return lam[-n:].mean(axis=0)

    def summary(self) -> dict:
        return {
            "names": self.names,
            "steps": len(self.steps),
            "final_metrics": None if self.final is None else self.final.to_dict(),
            "final_val_metrics": None if self.final_val is None else self.final_val.to_dict(),
            "final_lambda": self.lam[-1] if self.lam else None,
            "config_hash": self.config_hash,
            "wall_clock_s": self.wall_clock,
            "strategy_state": self.strategy_state,
        }


# -- construction from config ----------------------------------------------------


def build_family(cfg: RunConfig) -> TaskFamily:
    f = cfg.family
    if f.kind == "csv":
        fam = load_csv_dataset(f.csv_path, f.csv_schema, seed=cfg.seed)
    else:
        rho = np.eye(f.num_tasks) if f.rho is None else np.asarray(f.rho, dtype=np.float64)
        tseed = cfg.seed if f.teacher_seed is None else f.teacher_seed
        plan = RelatednessPlan(rho, tseed, f.features_per_task)
        fam = gen_teacher_family(
            f.num_tasks,
            f.input_dim,
            plan,
            f.noise_std,
            seed=cfg.seed,
            n_train=f.n_train,
            n_val=f.n_val,
            n_test=f.n_test,
            teacher_width=f.teacher_width,
            teacher_gain=f.teacher_gain,
            classes=f.classes,
            single_domain=f.single_domain,
            names=f.names,
            teacher_kind=f.teacher_kind,
        )
    if f.noise_task:
        fam = add_noise_task(fam, seed=cfg.seed + 7919, dim=f.noise_dim)
    return fam


def build_net(cfg: RunConfig, family: TaskFamily) -> MultiTaskNet:
    n = cfg.network
    heads = [list(n.head_hidden) + [t.output_dim] for t in family.tasks]
    spec = NetworkSpec(family.input_dim, list(n.trunk_layers), heads, n.activation, cfg.seed, [t.loss for t in family.tasks], n.zero_head_output)
    return build_network(spec)


def primary_set(cfg: RunConfig, num_tasks: int) -> List[int]:
    p = cfg.strategy.primary
    return list(range(num_tasks)) if p is None else sorted(set(p))


def make_strategy(cfg: RunConfig, num_tasks: int) -> Strategy:
    s = cfg.strategy
    mask = s.mask
    if mask is not None and len(mask) != num_tasks:
        raise ValueError(f"strategy.mask needs {num_tasks} entries")
    primary = primary_set(cfg, num_tasks)
    if s.kind == "equal":
        return Equal(num_tasks, mask)
    if s.kind == "dwa":
        return DWA(num_tasks, s.temperature, mask)
    if s.kind == "uncertainty":
        return Uncertainty(num_tasks, mask)
    if s.kind == "gcs":
        return GCS(num_tasks, primary, s.gcs_mode, mask)
    state = LambdaState.initial(num_tasks, primary, s.init, beta=s.beta, floor=s.floor, eps_rule=s.eps_rule, eps=s.eps, sample_size=s.sample_size, optimizer=s.lambda_optimizer)
    return AutoLambda(state, cfg.training.lr, s.mode, mask)


# -- trajectory CSV --------------------------------------------------------------


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def trajectory_header(names: List[str]) -> List[str]:
    return ["step"] + [f"lambda_{n}" for n in names] + [f"train_loss_{n}" for n in names] + [f"val_loss_{n}" for n in names]


def _row(step, lam, tr, va) -> List[str]:
    return [str(step)] + [_fmt(v) for v in lam] + [_fmt(v) for v in tr] + [_fmt(v) for v in va]


def emit_trajectory(run_log: RunLog, path) -> Path:
    if not run_log.steps:
        raise ValueError("log has no steps")
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(trajectory_header(run_log.names))
            for i, step in enumerate(run_log.steps):
                w.writerow(_row(step, run_log.lam[i], run_log.train_loss[i], run_log.val_loss[i]))
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return path


def load_trajectory(path) -> RunLog:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    k = (len(header) - 1) // 3
    names = [h[len("lambda_"):] for h in header[1:1 + k]]
    out = RunLog(names)
    parse = lambda c: float("nan") if c == "" else float(c)  # noqa: E731
    for r in rows[1:]:
        out.steps.append(int(r[0]))
        out.lam.append([parse(c) for c in r[1:1 + k]])
        out.train_loss.append([parse(c) for c in r[1 + k:1 + 2 * k]])
        out.val_loss.append([parse(c) for c in r[1 + 2 * k:1 + 3 * k]])
    return out


# -- the loop ----------------------------------------------------------------------


def run(cfg: RunConfig, out_dir=None, family: Optional[TaskFamily] = None, return_net: bool = False):
    """Train one network under ``cfg``; writes ``trajectory.csv`` and ``summary.json`` to ``out_dir``.

    Per iteration: sample a batch pair, let the strategy prepare (Auto-Lambda
    updates its weights here), then take one optimizer step on the weighted
    training loss with the current weights.
    """
    t0 = time.perf_counter()
    family = build_family(cfg) if family is None else family
    K = family.num_tasks
    net = build_net(cfg, family)
    strategy = make_strategy(cfg, K)
    primary = primary_set(cfg, K)
    val_tasks = list(range(K)) if family.single_domain else primary
    tr = cfg.training
    opt = SGD(tr.lr, tr.momentum, tr.weight_decay)
    rng = np.random.default_rng([cfg.seed, 1])
    steps_per_epoch = tr.steps_per_epoch or max(1, family.pool_size("train") // tr.batch_size)
    runlog = RunLog(family.names, config_hash=cfg.config_hash())

    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "trajectory.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(trajectory_header(family.names))
        fh.flush()

    epoch_sum = np.zeros(K)
    try:
        for step in range(tr.steps):
            pair = sample_batch_pair(family, tr.batch_size, tr.batch_mode, primary, rng)
            if family.single_domain and len(pair.val) < K:
                x_va = next(iter(pair.val.values()))[0]
                vsplit = "val" if tr.batch_mode == "disjoint_split" else "train"
                idx = next(iter(pair.val_index.values()))
                val_batches = {t: (x_va, family.targets[vsplit][t][idx]) for t in val_tasks}
            else:
                val_batches = pair.val
            try:
                val_vals = net.loss_values(val_batches, sorted(val_batches))
                strategy.prepare(net, pair, rng)
                grads, train_vals = strategy.grads(net, pair.train)
            except NonFinite as exc:
                # debug mode screens every op, so overflow surfaces here first
                raise NumericalDivergence(f"non-finite value at step {step}: {exc}", runlog) from exc
            losses = list(train_vals.values()) + list(val_vals.values())
            if not all(math.isfinite(v) for v in losses):
                raise NumericalDivergence(f"non-finite loss at step {step}", runlog)
            opt.step(net, grads)
            strategy.apply_extra(tr.lr)
            lam = strategy.weights().tolist()
            trl = [train_vals.get(t, float("nan")) for t in range(K)]
            val = [val_vals.get(t, float("nan")) for t in range(K)]
            runlog.steps.append(step)
            runlog.lam.append(lam)
            runlog.train_loss.append(trl)
            runlog.val_loss.append(val)
            if writer is not None:
                writer.writerow(_row(step, lam, trl, val))
                if (step + 1) % tr.eval_every == 0:
                    fh.flush()
            epoch_sum += np.asarray(trl)
            if (step + 1) % steps_per_epoch == 0:
                strategy.end_epoch(epoch_sum / steps_per_epoch)
                epoch_sum[:] = 0.0
            if (step + 1) % tr.eval_every == 0:
                log.debug("step %d lambda=%s", step + 1, np.round(lam, 4).tolist())
    except NumericalDivergence:
        if fh is not None:
            fh.flush()
            fh.close()
        raise
    if fh is not None:
        fh.close()

    runlog.final = evaluate(net, family, "test")
    runlog.final_val = evaluate(net, family, "val")
    runlog.strategy_state = strategy.state()
    runlog.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        (out_dir / "summary.json").write_text(json.dumps(runlog.summary(), indent=2))
        (out_dir / "config.json").write_text(cfg.to_json())
    return (runlog, net) if return_net else runlog
