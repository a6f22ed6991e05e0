"""Closed-loop rollouts: expert and trained model in a straight and a curved corridor."""

import argparse
import sys
import tempfile
from pathlib import Path

from mmexperts.cli import main

WORLDS = {
    "straight": "width_m = 2.0\nsegments = straight:40\n",
    "curved": "width_m = 2.0\nsegments = straight:4, left:2.5:90, straight:3, right:4:60, straight:8\n",
}

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--run", help="pipeline directory; the model driver needs its checkpoints")
    ap.add_argument("--out", default="runs/rollout")
    ap.add_argument("--steps", type=int, default=120)
    ap.add_argument("--profile", default="paper")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp())
    for name, text in WORLDS.items():
        (tmp / f"{name}.txt").write_text(text)
        base = ["rollout", "--config", str(tmp / f"{name}.txt"), "--steps", str(args.steps),
                "--profile", args.profile]
        print(f"[{name}] expert")
        main(base + ["--driver", "expert", "--out", str(out / f"{name}_expert.csv")])
        if args.run:
            run = Path(args.run)
            ckpts = []
            for c in ("stage1_2.mmen", "stage2_2.mmen", "stage3.mmen"):
                ckpts += ["--ckpt", str(run / c)]
            print(f"[{name}] model")
            rc = main(base + ["--driver", "model", *ckpts, "--out", str(out / f"{name}_model.csv")])
            if rc:
                sys.exit(rc)
