"""Desk puck experiment: all four runners over the configured seeds.

Writes run directories plus ``compare.csv``, ``curve.csv`` and one
``scatter_seed_<k>.csv`` per BayRnTune seed under ``--out``, and prints the
comparison table.

    python3 scripts/run_desk_experiment.py --out runs/desk
    python3 scripts/run_desk_experiment.py --config configs/smoke.cfg --out /tmp/smoke --jobs 2
"""

import argparse
import sys
from pathlib import Path

from bayrntune.cli import main as cli
from bayrntune.cli import runner_label
from bayrntune.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "puck.cfg"))
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seeds", help="override the config's seeds, e.g. 0,1,2")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args(argv)

    out = Path(args.out)
    run_args = ["run", "--config", args.config, "--runner", "all", "--out", str(out), "--jobs", str(args.jobs)]
    if args.seeds:
        run_args += ["--seeds", args.seeds]
    if args.force:
        run_args.append("--force")
    code = cli(run_args)
    if code:
        return code

    groups = sorted(p for p in out.iterdir() if p.is_dir())
    code = cli(["compare", *map(str, groups), "--csv", str(out / "compare.csv")])
    code = code or cli(["curve", *map(str, groups), "--csv", str(out / "curve.csv")])
    cfg = load_config(args.config)
    tune_dir = out / runner_label("bayrntune", cfg.strategy)
    for seed_dir in sorted(tune_dir.iterdir()):
        code = code or cli(["scatter", str(seed_dir), "--csv", str(out / f"scatter_{seed_dir.name}.csv")])
    return code


if __name__ == "__main__":
    sys.exit(main())
