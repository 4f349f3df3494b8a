"""Command-line front-end: ``fcbo reduce|criteria|estimate|run``.

Exit codes: 0 success, 2 input error, 3 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import statistics
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, defaults_for, format_config, parse_config
from .graph import (
    CausalGraph,
    GraphError,
    hard_optimality_criterion,
    hard_suboptimality_criterion,
    is_valid_mps,
    nrmps_reduce,
    read_graph,
)
from .optimizer import RunResult, derive_seed, run
from .policy import format_policy, parse_policy, policy_cost
from .scm import (
    BUILTIN_SCMS,
    InsufficientMassError,
    PredicateError,
    builtin_graph,
    builtin_scm,
    check_predicate,
    parse_predicate,
    performance_gain,
    sample,
)

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3

TRIAL_COLUMNS = ("method", "seed", "trial", "mps_id", "policy_id", "mu_hat", "best_so_far", "cost", "wall_ms")
SUMMARY_COLUMNS = ("method", "trial", "mean", "sd", "n")
INCUMBENT_COLUMNS = ("method", "seed", "mps", "mu_hat", "cost")
PGAIN_COLUMNS = ("method", "seed", "predicate", "pgain")
COST_COLUMNS = ("method", "seed", "cost_kind", "cost")


class InputError(Exception):
    pass


def _load_graph(ref: str) -> CausalGraph:
    """A graph file path, or the name of a built-in model."""
    path = Path(ref)
    if path.exists():
        return read_graph(path)
    if ref in BUILTIN_SCMS:
        return builtin_graph(ref)
    raise InputError(f"no graph file or built-in model named {ref!r}")


# CSV helpers -----------------------------------------------------------------


def _num(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows([_num(v) for v in row] for row in rows)


_INT_COLUMNS = {"seed", "trial", "mps_id", "policy_id", "n"}
_FLOAT_COLUMNS = {"mu_hat", "best_so_far", "cost", "wall_ms", "mean", "sd", "pgain"}


def read_csv(path: str | Path) -> list[dict]:
    """Rows of a CSV written by ``fcbo run``, with numeric columns converted."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in row:
            if key in _INT_COLUMNS:
                row[key] = int(row[key])
            elif key in _FLOAT_COLUMNS:
                row[key] = float(row[key])
    return rows


def summarize(trial_rows: Sequence[dict], methods: Sequence[str]) -> list[tuple]:
    """Per (method, trial) mean and sample sd of best-so-far across seeds."""
    out = []
    for method in methods:
        by_trial: dict[int, list[float]] = {}
        for row in trial_rows:
            if row["method"] == method:
                by_trial.setdefault(row["trial"], []).append(row["best_so_far"])
        for t in sorted(by_trial):
            vals = by_trial[t]
            sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
            out.append((method, t, statistics.fmean(vals), sd, len(vals)))
    return out


# Subcommands -----------------------------------------------------------------


def cmd_reduce(args) -> int:
    g = _load_graph(args.graph)
    for s in nrmps_reduce(g):
        print(s)
    return EXIT_OK


def cmd_criteria(args) -> int:
    g = _load_graph(args.graph)
    report = hard_suboptimality_criterion(g)
    print(f"optimality (hard interventions suffice): {'holds' if hard_optimality_criterion(g) else 'does not hold'}")
    print(f"sub-optimality (hard interventions can lose): {'holds' if report.holds else 'does not hold'}")
    for x, c, case in report.witnesses:
        print(f"witness X={x} C={c} case={case}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    try:
        scm = builtin_scm(args.scm)
    except KeyError as exc:
        raise InputError(str(exc.args[0])) from None
    policy = None
    if args.policy != "none":
        try:
            policy = parse_policy(Path(args.policy).read_text())
        except OSError as exc:
            raise InputError(f"cannot read policy file: {exc}") from None
        except ValueError as exc:
            raise InputError(str(exc)) from None
        g = scm.graph
        stray = [x for x in policy.mps.variables if x not in g.intervenable]
        if stray or not set(policy.mps.contexts) <= set(g.nodes) or not is_valid_mps(g, policy.mps):
            raise InputError(f"policy scope {policy.mps} is not valid for the {args.scm} graph")
    draws = sample(scm, policy, args.n, args.seed)
    if args.given:
        pred = parse_predicate(args.given)
        check_predicate(scm, pred)
        keep = np.ones(args.n, dtype=bool)
        for var, (lo, hi) in pred.items():
            keep &= (draws[var] > lo) & (draws[var] < hi)
        y = draws[scm.target][keep]
        if len(y) < 2:
            raise InsufficientMassError("fewer than two draws satisfy the condition")
    else:
        y = draws[scm.target]
    se = float(np.std(y, ddof=1) / math.sqrt(len(y))) if len(y) > 1 else float("nan")
    print(f"{float(np.mean(y))!r} +/- {se!r}")
    return EXIT_OK


def _load_experiment(args) -> ExperimentConfig:
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise InputError(f"cannot read config: {exc}") from None
    else:
        text = f"scm = {args.scm}\n"
    text += "".join(f"{item}\n" for item in args.set)
    if args.seed is not None:
        text += f"seed = {args.seed}\n"
    return parse_config(text)


def run_experiment(cfg: ExperimentConfig, out_dir: Path, log=print) -> dict[str, list]:
    """Run every (method, seed) pair and write the result files into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    scm = builtin_scm(cfg.scm)
    trials, incumbents, pgains, costs = [], [], [], []
    best: dict[str, tuple] = {}
    for method in cfg.methods:
        for seed in cfg.seeds():
            start = time.perf_counter()
            result: RunResult = run(cfg.run_config(method, seed), scm, record_timing=cfg.record_timing)
            mps, d, mu = result.incumbent
            cost = policy_cost(d, cfg.cost_kind, cfg.context_range, cfg.cost_grid_points)
            log(f"{method} seed={seed} best={mu:.6g} scope={mps} ({time.perf_counter() - start:.1f}s)")
            for r in result.trial_log:
                trials.append(
                    {"method": method, "seed": seed, **{k: getattr(r, k) for k in TRIAL_COLUMNS[2:]}}
                )
            incumbents.append((method, seed, str(mps), mu, cost))
            costs.append((method, seed, cfg.cost_kind, cost))
            for text in cfg.pgain:
                pg = performance_gain(scm, d, parse_predicate(text), cfg.pgain_samples, derive_seed(seed, "pgain"))
                pgains.append((method, seed, text, pg))
            if method not in best or mu < best[method][1]:
                best[method] = (d, mu)
    order = {m: i for i, m in enumerate(cfg.methods)}
    trials.sort(key=lambda r: (order[r["method"]], r["seed"], r["trial"]))
    write_csv(out_dir / "trials.csv", TRIAL_COLUMNS, [[r[c] for c in TRIAL_COLUMNS] for r in trials])
    write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, summarize(trials, cfg.methods))
    write_csv(out_dir / "incumbents.csv", INCUMBENT_COLUMNS, incumbents)
    write_csv(out_dir / "cost.csv", COST_COLUMNS, costs)
    if cfg.pgain:
        write_csv(out_dir / "pgain.csv", PGAIN_COLUMNS, pgains)
    for method, (d, _) in best.items():
        (out_dir / f"best_policy_{method}.txt").write_text(format_policy(d))
    (out_dir / "best_policy.txt").write_text(format_policy(best[cfg.methods[0]][0]))
    (out_dir / "config.txt").write_text(format_config(cfg))
    return {"trials": trials, "incumbents": incumbents, "pgain": pgains, "cost": costs}


def cmd_run(args) -> int:
    if args.print_defaults:
        sys.stdout.write(format_config(defaults_for(args.print_defaults)))
        return EXIT_OK
    if not args.out:
        raise InputError("run needs --out DIR")
    cfg = _load_experiment(args)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise InputError(f"output directory not writable: {exc}") from None
    run_experiment(cfg, out, log=lambda msg: print(msg, file=sys.stderr))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcbo", description="Functional causal Bayesian optimisation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reduce", help="print the non-redundant mixed policy scopes of a graph")
    p.add_argument("graph", help="graph file, or a built-in model name (chain, health, ...)")
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("criteria", help="check when hard interventions are (sub)optimal")
    p.add_argument("graph", help="graph file, or a built-in model name")
    p.set_defaults(func=cmd_criteria)

    p = sub.add_parser("estimate", help="Monte Carlo estimate of the target under a policy")
    p.add_argument("scm", help=f"built-in model: {', '.join(sorted(BUILTIN_SCMS))}")
    p.add_argument("policy", help="policy file, or 'none' for the observational mean")
    p.add_argument("-n", type=int, default=100_000, help="number of draws (default 100000)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--given", help="condition on a predicate, e.g. 'X<0' or '55<Age<60&BMI>25'")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("run", help="run an experiment and write CSV results")
    p.add_argument("config", nargs="?", help="key = value config file")
    p.add_argument("--scm", default="chain", help="built-in model used when no config file is given")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="base seed; seeds used are seed .. seed+n_seeds-1")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")
    p.add_argument("--print-defaults", metavar="SCM", help="print the default config for a model and exit")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "n", 1) < 1:
        print("error: -n must be positive", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.errors:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, GraphError, PredicateError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InsufficientMassError, np.linalg.LinAlgError, FloatingPointError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
