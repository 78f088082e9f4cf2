"""Command line entry point: ``autolambda <verb> [flags]``.

Verbs: run, compare, grouping, relmatrix, ablate, gradcheck. Every verb that
trains writes CSV tables plus PNG figures to ``--out`` and prints a
tab-delimited summary on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from .config import ConfigError, RunConfig
from .experiment import NumericalDivergence, build_family, run
from .tasks import InfeasiblePlan, IoError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
PRESET_ALIASES = {"grouping": "grouping-search", "relatedness": "planted-relatedness", "ablation": "ablation-grid"}

log = logging.getLogger("autolambda")


def _setup_logging() -> None:
    name = os.environ.get("AUTOLAMBDA_LOG_LEVEL", "error").lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"AUTOLAMBDA_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: Optional[str], seed: Optional[int], sets: List[str]) -> RunConfig:
    """Config file (JSON), then ``--set key=value`` overrides, then ``--seed``."""
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        cfg = RunConfig.from_json(text)
    else:
        cfg = RunConfig()
    overrides = {}
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = _parse_value(v)
    if seed is not None:
        overrides["seed"] = seed
    return cfg.replace(**overrides) if overrides else cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_rows(header, rows) -> None:
    print("\t".join(header))
    for r in rows:
        print("\t".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in r))


# -- verbs -------------------------------------------------------------------------


def cmd_run(args) -> int:
    from .plotting import plot_trajectory

    cfg = load_config(args.config, args.seed, args.set)
    out = _out_dir(args, "runs/" + cfg.name)
    rl = run(cfg, out_dir=out)
    plot_trajectory(rl, out / "trajectory.png", cfg.name)
    lam = rl.converged_lambda()
    _print_rows(["task", "test_metric", "val_metric", "final_lambda", "converged_lambda"], [
        (n, rl.final.values[i], rl.final_val.values[i], rl.lam[-1][i] if rl.lam else float("nan"), lam[i] if rl.lam else float("nan"))
        for i, n in enumerate(rl.names)
    ] if rl.lam else [(n, rl.final.values[i], rl.final_val.values[i], "", "") for i, n in enumerate(rl.names)])
    print(f"# config_hash\t{rl.config_hash}\twall_clock_s\t{rl.wall_clock:.2f}\tout\t{out}")
    return EXIT_OK


def _run_preset(name: str, args) -> int:
    from . import recipes

    name = PRESET_ALIASES.get(name, name)
    if name not in recipes.PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(recipes.PRESETS)}")
    out = _out_dir(args, "runs/" + name)
    seed = 0 if args.seed is None else args.seed
    fn = recipes.PRESETS[name]
    kwargs = {"seed": seed, "out_dir": out}
    if name == "grouping-search":
        kwargs["jobs"] = args.jobs
    res = fn(**kwargs)
    printable = {k: v for k, v in res.items() if k not in ("result", "results", "logs")}
    for k, v in printable.items():
        print(f"{k}\t{json.dumps(v, default=float)}")
    if "result" in res:
        print(res["result"].format())
    print(f"# out\t{out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .recipes import compare

    if args.preset:
        return _run_preset(args.preset, args)
    if not args.config:
        raise ConfigError("compare needs --config or --preset")
    try:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read compare file: {exc}") from exc
    entries = doc.get("configs") if isinstance(doc, dict) else None
    if not isinstance(entries, dict) or len(entries) < 2:
        raise ConfigError('compare file must hold {"configs": {label: config, ...}} with >= 2 entries')
    configs = {}
    for label, d in entries.items():
        cfg = RunConfig.from_dict(d)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        configs[label] = cfg
    out = _out_dir(args, "runs/compare")
    res = compare(configs, out_dir=out, jobs=args.jobs)
    print(res.format())
    print(f"# out\t{out}")
    return EXIT_OK


def cmd_grouping(args) -> int:
    from .grouping import best_groupings, grouping_search, write_grouping_csv
    from .plotting import plot_bars

    if args.preset:
        return _run_preset(args.preset, args)
    cfg = load_config(args.config, args.seed, args.set)
    fam = build_family(cfg)
    out = _out_dir(args, "runs/grouping")
    results = grouping_search(fam, cfg, max_runs=args.max_runs, seeds=args.seeds, jobs=args.jobs)
    write_grouping_csv(results, fam, out / "grouping.csv")
    labels = [f"{fam.names[t]}|{r.bitmask}" for r in results for t in r.subset]
    plot_bars(labels, [r.delta_pct[t] for r in results for t in r.subset], out / "grouping.png", "delta vs single task (%)")
    _print_rows(["subset_bitmask", "task", "metric", "delta_pct"], [(r.bitmask, fam.names[t], r.metrics[t], r.delta_pct[t]) for r in results for t in r.subset])
    best = best_groupings(results, fam)
    for t, r in best.items():
        print(f"# best\t{fam.names[t]}\t{r.bitmask}")
    return EXIT_OK


def cmd_relmatrix(args) -> int:
    from .grouping import relationship_matrix, write_relationship_csv
    from .plotting import plot_matrix

    if args.preset:
        return _run_preset(args.preset, args)
    cfg = load_config(args.config, args.seed, args.set)
    fam = build_family(cfg)
    out = _out_dir(args, "runs/relmatrix")
    mat = relationship_matrix(fam, cfg, jobs=args.jobs)
    write_relationship_csv(mat, out / "relationship.csv")
    plot_matrix(mat.values, mat.names, out / "relationship.png", "converged weights")
    _print_rows(["primary_task"] + list(mat.names), [[n] + list(map(float, mat.values[i])) for i, n in enumerate(mat.names)])
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .recipes import preset_ablation_grid

    if args.preset and PRESET_ALIASES.get(args.preset, args.preset) != "ablation-grid":
        return _run_preset(args.preset, args)
    out = _out_dir(args, "runs/ablation")
    overrides = {}
    for item in args.set:
        k, _, v = item.partition("=")
        overrides[k] = _parse_value(v)
    res = preset_ablation_grid(0 if args.seed is None else args.seed, out, overrides or None)
    _print_rows(["row", "delta_pct", "mean_real_lambda", "noise_lambda", "noise_ratio"], [
        (k, v["delta"], v["mean_real_lambda"], v["noise_lambda"], v["noise_ratio"]) for k, v in res["table"].items()
    ])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import meta_grad_checks, partition_violations, random_graph_checks

    seed = 0 if args.seed is None else args.seed
    reports = random_graph_checks(args.graphs, seed)
    worst = max(r.max_error for r in reports)
    ok_graphs = all(r.passed for r in reports)
    meta = meta_grad_checks(args.nets, seed)
    cos = min(m.cosine for m in meta)
    rel = max(m.rel_l2 for m in meta)
    orc = max(m.oracle_rel for m in meta)
    bad = partition_violations(20, seed)
    rows = [
        ("random_graphs", len(reports), worst, "PASS" if ok_graphs else "FAIL"),
        ("meta_fd_cosine_min", len(meta), cos, "PASS" if cos >= 0.999 else "FAIL"),
        ("meta_fd_rel_l2_max", len(meta), rel, "PASS" if rel <= 1e-2 else "FAIL"),
        ("meta_exact_vs_oracle_max", len(meta), orc, "PASS" if orc <= 1e-6 else "FAIL"),
        ("head_partition_nonzeros", 20, float(bad), "PASS" if bad == 0 else "FAIL"),
    ]
    _print_rows(["check", "count", "value", "status"], rows)
    return EXIT_OK if all(r[-1] == "PASS" for r in rows) else EXIT_FAIL


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="autolambda", description="Meta-learned task weighting on synthetic multi-task families.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, preset=True):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--jobs", type=int, default=1, help="max concurrent trainings")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override, e.g. strategy.beta=1e-3")
        if preset:
            sp.add_argument("--preset", help="noise-sanity | planted-relatedness | grouping-search | fd-vs-exact | ablation-grid")

    sp = sub.add_parser("run", help="train one config")
    common(sp)
    sp.set_defaults(fn=cmd_run)
    sp = sub.add_parser("compare", help="compare strategies on one family")
    common(sp)
    sp.set_defaults(fn=cmd_compare)
    sp = sub.add_parser("grouping", help="exhaustive fixed-grouping search")
    common(sp)
    sp.add_argument("--seeds", type=int, default=1, help="seeds averaged per subset")
    sp.add_argument("--max-runs", type=int, default=63)
    sp.set_defaults(fn=cmd_grouping)
    sp = sub.add_parser("relmatrix", help="converged weights with each task as the only primary")
    common(sp)
    sp.set_defaults(fn=cmd_relmatrix)
    sp = sub.add_parser("ablate", help="Auto-Lambda ablation rows")
    common(sp)
    sp.set_defaults(fn=cmd_ablate)
    sp = sub.add_parser("gradcheck", help="numerical self-checks")
    common(sp, preset=False)
    sp.add_argument("--graphs", type=int, default=100)
    sp.add_argument("--nets", type=int, default=50)
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        if args.verb == "run" and args.preset:
            return _run_preset(args.preset, args)
        return args.fn(args)
    except (ConfigError, InfeasiblePlan) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalDivergence as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except IoError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
