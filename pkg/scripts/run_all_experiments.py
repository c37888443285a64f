"""Run every shipped config through the pipeline and print a headline table.

Usage::

    python3 scripts/run_all_experiments.py --out runs --workers 1
"""

import argparse
import logging
import pathlib
import sys

from ergodic_hjb.cli import ConfigError, load_config, run_experiment

CONFIGS = pathlib.Path(__file__).resolve().parents[1] / "configs"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs", help="parent directory for run outputs")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--only", nargs="*", help="config stems to run (default: all)")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    worst = 0
    for path in sorted(CONFIGS.glob("*.yaml")):
        if args.only and path.stem not in args.only:
            continue
        try:
            report, code = run_experiment(load_config(str(path)), out_dir=str(pathlib.Path(args.out) / path.stem), workers=args.workers)
        except ConfigError as exc:
            print(f"{path.stem}: config error: {exc}")
            worst = max(worst, 2)
            continue
        worst = max(worst, code)
        print(f"{path.stem}: exit {code}")
        for stage, res in report["experiments"].items():
            print(f"  {stage:<12} {res['status']:<18} {res['wall_clock_s']:8.1f} s")
        for k, v in report["headline"].items():
            print(f"  {k} = {v:.6g}")
    return worst


if __name__ == "__main__":
    sys.exit(main())
