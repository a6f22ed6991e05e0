"""Loss and end-to-end ablations on the data of an earlier pipeline run.

    python3 scripts/ablations.py --run runs/paper --out runs/paper/ablations
"""

import argparse
import sys
from pathlib import Path

from mmexperts.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", required=True, help="directory written by run_pipeline.py")
    ap.add_argument("--out", required=True)
    ap.add_argument("--config")
    ap.add_argument("--profile", default="paper")
    args = ap.parse_args()
    run = Path(args.run)
    common = ["--data", str(run), "--profile", args.profile, "--out", args.out]
    if args.config:
        common += ["--config", args.config]
    rc = main(["ablate", "--kind", "loss", *common])
    if rc:
        sys.exit(rc)
    ckpts = []
    for name in ("stage2_1.mmen", "stage2_2.mmen"):
        ckpts += ["--ckpt", str(run / name)]
    sys.exit(main(["ablate", "--kind", "e2e", *ckpts, *common]))
