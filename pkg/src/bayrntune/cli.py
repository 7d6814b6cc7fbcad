"""Command-line front end: ``bayrntune {run,compare,curve,scatter,validate-config}``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config, parse_config
from .orchestrator import (
    RUNNERS,
    CadenceError,
    aggregate_seeds,
    load_record,
    max_historical_curve,
    run,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SCATTER_GT_ITERATION = -1


class CliError(RuntimeError):
    pass


def runner_label(runner: str, strategy: str) -> str:
    return f"{runner}_{strategy.replace(':', '-')}" if runner == "bayrntune" else runner


def _parse_seeds(text: str) -> tuple:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--seeds: expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds: at least one seed required")
    return seeds


def _run_one(job):
    runner, cfg_path, overrides, seed, run_dir = job
    logging.basicConfig(level=logging.INFO, format=f"[{runner} seed={seed}] %(message)s", force=True)
    cfg = load_config(cfg_path, overrides)
    rec = run(runner, cfg, seed, run_dir, overrides)
    return runner, seed, str(run_dir), rec.best_iteration, rec.best_reward, rec.total_steps


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.override)
    seeds = _parse_seeds(args.seeds) if args.seeds else cfg.seeds
    runners = list(RUNNERS) if args.runner == "all" else [args.runner]
    out = Path(args.out or cfg.output_dir)
    jobs = []
    for runner in runners:
        for seed in seeds:
            run_dir = out / runner_label(runner, cfg.strategy) / f"seed_{seed}"
            if run_dir.exists():
                if not args.force:
                    raise CliError(f"{run_dir} already exists (use --force to overwrite)")
                if not (run_dir / "config.snapshot").exists():
                    raise CliError(f"{run_dir} exists but is not a run directory; refusing to delete it")
                shutil.rmtree(run_dir)
            jobs.append((runner, args.config, tuple(args.override), seed, run_dir))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    for runner, seed, run_dir, best_i, best_r, steps in results:
        print(f"[{runner} seed={seed}] best iteration {best_i} reward {best_r:.4f} "
              f"steps {steps} -> {run_dir}", flush=True)
    return EXIT_OK


def _expand_run_dirs(paths) -> list:
    dirs = []
    for p in map(Path, paths):
        if (p / "history.csv").exists():
            dirs.append(p)
        elif p.is_dir():
            found = sorted(q.parent for q in p.rglob("history.csv"))
            if not found:
                raise CliError(f"no run directories under {p}")
            dirs.extend(found)
        else:
            raise CliError(f"{p}: not a run directory")
    return dirs


def _group(paths) -> dict:
    groups: dict = {}
    for d in _expand_run_dirs(paths):
        rec = load_record(d)
        groups.setdefault(runner_label(rec.runner, rec.strategy), []).append(rec)
    return groups


def compare_table(groups: dict, mode: str = "median") -> list:
    """Rows ``(label, n_seeds, final aggregated max-historical reward, ratio to weakest)``."""
    finals = {}
    for label, recs in groups.items():
        curve = aggregate_seeds([max_historical_curve(r) for r in recs], mode)
        finals[label] = (len(recs), curve[-1].reward)
    weakest = min(v for _, v in finals.values())
    rows = []
    for label, (n, final) in finals.items():
        ratio = final / weakest if weakest > 0 else float("nan")
        rows.append((label, n, final, ratio))
    return rows


def cmd_compare(args) -> int:
    groups = _group(args.run_dirs)
    if len(groups) < 2 and not args.allow_single:
        raise CliError("compare needs at least two runner groups")
    rows = compare_table(groups, args.mode)
    width = max(len(r[0]) for r in rows)
    print(f"{'runner':<{width}}  seeds  final_{args.mode:<6}  ratio_vs_weakest")
    for label, n, final, ratio in rows:
        print(f"{label:<{width}}  {n:>5}  {final:>12.4f}  {ratio:>16.4f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["runner", "seeds", "final_reward", "ratio_vs_weakest"])
            for label, n, final, ratio in rows:
                w.writerow([label, n, repr(final), repr(ratio)])
    return EXIT_OK


def cmd_curve(args) -> int:
    groups = _group(args.run_dirs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["runner", "cumulative_steps", "max_historical_reward"])
    for label, recs in groups.items():
        for p in aggregate_seeds([max_historical_curve(r) for r in recs], args.mode):
            w.writerow([label, p.timesteps, repr(p.reward)])
    _emit(buf.getvalue(), args.csv)
    return EXIT_OK


def scatter_rows(run_dir) -> tuple:
    """Header and rows of the performance-over-parameters table for one run."""
    run_dir = Path(run_dir)
    snap = run_dir / "config.snapshot"
    if not snap.exists():
        raise CliError(f"{snap} not found")
    rec = load_record(run_dir)
    cfg = parse_config(snap.read_text(), str(snap))
    spec = cfg.env_spec()
    header = ["iteration", *[f"phi_{n}" for n in spec.space.names], "reward", "ground_truth"]
    rows = [[row.iteration, *row.phi, row.reward, 0] for row in rec.rows]
    rows.append([SCATTER_GT_ITERATION, *spec.ground_truth.phi.tolist(), float("nan"), 1])
    return header, rows


def cmd_scatter(args) -> int:
    header, rows = scatter_rows(args.run_dir)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, float) else x for x in row])
    _emit(buf.getvalue(), args.csv)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config, args.override)
    print(f"{args.config}: ok (env={cfg.env}, strategy={cfg.strategy}, N={cfg.n_iterations}, "
          f"budget={cfg.total_budget} steps)")
    return EXIT_OK


def _emit(text: str, path) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bayrntune", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run experiments for one or all runners across seeds")
    r.add_argument("--config", required=True)
    r.add_argument("--seeds", help="comma-separated seeds (default: the config's seeds)")
    r.add_argument("--runner", default="bayrntune", choices=[*RUNNERS, "all"])
    r.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--out", help="output root (default: config output_dir / $BAYRNTUNE_OUT)")
    r.add_argument("--force", action="store_true", help="overwrite existing run directories")
    r.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("compare", help="aggregate final max-historical reward per runner")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--mode", choices=["median", "mean"], default="median")
    c.add_argument("--csv")
    c.add_argument("--allow-single", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(fn=cmd_compare)

    k = sub.add_parser("curve", help="aggregated max-historical curves as CSV")
    k.add_argument("run_dirs", nargs="+")
    k.add_argument("--mode", choices=["median", "mean"], default="median")
    k.add_argument("--csv")
    k.set_defaults(fn=cmd_curve)

    s = sub.add_parser("scatter", help="reward over DR parameters for one run, with the ground truth")
    s.add_argument("run_dir")
    s.add_argument("--csv")
    s.set_defaults(fn=cmd_scatter)

    v = sub.add_parser("validate-config", help="check a config file without running it")
    v.add_argument("--config", required=True)
    v.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    v.set_defaults(fn=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CliError, CadenceError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures inside a run
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
