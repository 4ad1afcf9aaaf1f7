#!/usr/bin/env python3
"""Depth sweep of DRAM traffic for block-based denoising models.

For each trunk depth the script reports the analytic and planned
normalized bandwidth ratios and the absolute traffic at a chosen
resolution and frame rate, next to what a conventional frame-at-a-time
engine would need.  The shallow-to-deep ladder (roughly 2.2x, 2.5x,
2.7x of the output frame for 6, 11, and 15 layer models) falls out of
the overlap recomputation geometry.
"""

import argparse
import csv
import sys

from ecnnkit import blockflow, modelir


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--res", default="3840x2160", help="frame size WxH")
    parser.add_argument("--fps", type=float, default=30.0)
    parser.add_argument("--block", type=int, default=128)
    parser.add_argument("--depths", type=int, nargs="*",
                        default=[3, 5, 8, 12, 20, 30],
                        help="ER module counts to sweep")
    parser.add_argument("--bits", type=int, default=16,
                        help="feature bits of the frame-based reference")
    parser.add_argument("-o", "--output", help="CSV path (stdout otherwise)")
    args = parser.parse_args()

    w, h = (int(v) for v in args.res.split("x"))
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    writer = csv.writer(out)
    writer.writerow(["B", "conv_layers", "nbr_analytic", "nbr_planned",
                     "block_gb_per_s", "frame_based_gb_per_s"])
    for B in args.depths:
        m = modelir.build_ernet("dn", B, 1, 0)
        depth = B + 3
        plan = blockflow.plan_blocks(m, (w, h), args.block)
        bw = blockflow.block_bandwidth(plan, args.fps)
        frame_gb = blockflow.frame_bandwidth(h, w, m.channels, depth,
                                             args.fps, args.bits) / 1e9
        writer.writerow([B, depth,
                         f"{blockflow.nbr_plain(depth, args.block):.3f}",
                         f"{bw.nbr:.3f}", f"{bw.gb_per_s:.3f}",
                         f"{frame_gb:.3f}"])
    if args.output:
        out.close()
        print(f"wrote {args.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
