"""Print the per-architecture FLOPs table with the reference column and the two savings ratios."""

import sys

from mmexperts.cli import PAPER_FLOPS_M, flops_table
from mmexperts.specs import FLOPS_CONVENTION, PAPER


def main():
    names = ["lidar_only", "single_camera", "three_cameras", "baseline_concat", "lidar_with_gating", "final_net"]
    rows = flops_table(names, PAPER)
    print(f"# {FLOPS_CONVENTION}")
    print(f"{'arch':<22}{'MFLOPs':>10}{'ref':>10}{'ratio':>8}")
    got = {}
    for key, _, mflops, ref, *_ in rows:
        got[key] = mflops
        print(f"{key:<22}{mflops:10.2f}{ref:10.2f}{mflops / ref:8.3f}")
    ours = got["final_net:lidar"] / got["baseline_concat"]
    gating = got["lidar_with_gating"] / got["lidar_only"]
    ref_ours = PAPER_FLOPS_M["final_net:lidar"] / PAPER_FLOPS_M["baseline_concat"]
    ref_gating = PAPER_FLOPS_M["lidar_with_gating"] / PAPER_FLOPS_M["lidar_only"]
    print(f"ours (LiDAR path) / baseline      {ours:.3f}  (reference {ref_ours:.3f})")
    print(f"LiDAR with gating / LiDAR only    {gating:.3f}  (reference {ref_gating:.3f})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
