"""Desk-scale run: data, stages 1.1 to 3, final metrics.

    python3 scripts/run_pipeline.py --out runs/paper
    python3 scripts/run_pipeline.py --config configs/tiny.json --out runs/tiny
"""

import argparse
import sys

from mmexperts.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/paper")
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    argv = ["pipeline", "--out", args.out]
    if args.config:
        argv += ["--config", args.config]
        if "tiny" in args.config:
            argv += ["--profile", "tiny"]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    sys.exit(main(argv))
