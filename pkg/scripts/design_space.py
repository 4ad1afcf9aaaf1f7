#!/usr/bin/env python3
"""Pick the richest model each pixel-rate budget affords.

The engine's peak throughput fixes a per-pixel operation budget at
every resolution/frame-rate point.  For each family this script scans
depth against effective expansion ratio, keeps the largest model whose
block-mode compute (including overlap recomputation) fits the budget,
and prints the frontier the hardware designer would choose from.
"""

import argparse
import sys

from ecnnkit import modelir, simcore

RATES = {
    "UHD30": (3840, 2160, 30.0),
    "HD60": (1920, 1080, 60.0),
    "HD30": (1920, 1080, 30.0),
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--families", nargs="*", default=list(modelir.FAMILIES))
    parser.add_argument("--rates", nargs="*", default=list(RATES),
                        choices=list(RATES))
    parser.add_argument("--block", type=int, default=128)
    parser.add_argument("--clock", type=float, default=250e6)
    args = parser.parse_args()

    engine = simcore.EngineModel(clock_hz=args.clock)
    for label in args.rates:
        w, h, fps = RATES[label]
        budget = modelir.kop_per_pixel_budget(engine.peak_ops_per_s, w, h, fps)
        print(f"{label}: budget {budget:.1f} KOP/pixel "
              f"({w}x{h} @ {fps:g} fps, {engine.peak_ops_per_s / 1e12:.2f} TOPS)")
        for family in args.families:
            entries = modelir.scan_models(family, budget, args.block)
            if not entries:
                print(f"  {family}: no feasible model")
                continue
            best = modelir.pick_model(entries)
            print(f"  {family}: B={best.B} R={best.R} N={best.N} "
                  f"(R_E={best.r_e:.2f}) effective {best.effective_kop:.1f} "
                  f"KOP/pixel, recompute x{best.ncr:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
