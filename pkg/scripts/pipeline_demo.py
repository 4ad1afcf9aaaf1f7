#!/usr/bin/env python3
"""Whole-toolchain walkthrough on one synthetic frame.

Builds a model with seeded weights, calibrates a quantization plan on
the input frame, compiles the block program, entropy-codes the
parameters, runs the bit-exact block simulation, and cross-checks the
result against the frame-level oracle and the floating-point
reference.  Optionally writes the input and output as PPM images.
"""

import argparse
import sys
import time

import numpy as np

from ecnnkit import blockflow, fbisa, modelir, quantflow, simcore


def synthetic_frame(w: int, h: int, seed: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    base = np.stack([
        120 + 80 * np.sin(2 * np.pi * xx / w) * np.cos(2 * np.pi * yy / h),
        128 + 60 * (xx / w - 0.5),
        100 + 90 * (yy / h - 0.5),
    ])
    noise = np.random.default_rng(seed).normal(0, 12, base.shape)
    return np.clip(base + noise, 0, 255).astype(np.int64)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--model", default="dnernet-b3r1n0")
    parser.add_argument("--res", default="192x192")
    parser.add_argument("--block", type=int, default=96)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--norm", choices=("l1", "l2"), default="l2")
    parser.add_argument("--save-prefix", help="write PREFIX_in.ppm / PREFIX_out.ppm")
    args = parser.parse_args()

    import re
    m_ref = re.match(r"^(dn12|dn|sr2|sr4)ernet-b(\d+)r(\d+)n(\d+)$", args.model)
    if not m_ref:
        parser.error(f"unsupported model name {args.model!r}")
    m = modelir.build_ernet(m_ref.group(1), *(int(g) for g in m_ref.groups()[1:]))
    weights = {i: {k: v * 0.4 for k, v in d.items()}
               for i, d in modelir.init_weights(m, seed=args.seed).items()}

    w, h = (int(v) for v in args.res.split("x"))
    frame = synthetic_frame(w, h, args.seed)

    t0 = time.perf_counter()
    stats = quantflow.collect_stats(m, weights, [frame])
    qplan = quantflow.assign_formats(stats, norm=args.norm)
    print(f"calibration: {qplan.container_bytes} container bytes, "
          f"{len(qplan.demoted_groups())} demoted groups "
          f"({time.perf_counter() - t0:.2f}s)")

    plan = blockflow.plan_blocks(m, (w, h), args.block)
    program, layout = fbisa.compile_model(m, plan, qmap=qplan.qmap(),
                                          weights=weights)
    container = fbisa.encode_parameters(m, layout, weights, qplan.qmap())
    print(f"compiled: {len(program.instructions)} instructions, "
          f"{plan.n_blocks} blocks, {container.total_bytes} parameter bytes")

    t0 = time.perf_counter()
    out = simcore.run_image(program, container, frame, plan)
    sim_s = time.perf_counter() - t0
    oracle = simcore.oracle_frame(m, weights, frame, qmap=qplan.qmap())
    print(f"simulated {out.shape[2]}x{out.shape[1]} in {sim_s:.2f}s; "
          f"bit-exact vs oracle: {np.array_equal(out, oracle)}")

    fvals, _ = quantflow.float_forward(m, weights, frame * (1 / 256.0),
                                       collect=False)
    fmt = program.instructions[-1].qo
    err = np.abs(out * fmt.step - np.clip(fvals, fmt.min_value, fmt.max_value))
    print(f"vs float reference: max {err.max():.4f}, mean {err.mean():.5f} "
          "(output scale 0..1)")

    if args.save_prefix:
        simcore.write_ppm(f"{args.save_prefix}_in.ppm", frame)
        simcore.write_ppm(f"{args.save_prefix}_out.ppm", np.clip(out, 0, 255))
        print(f"wrote {args.save_prefix}_in.ppm and {args.save_prefix}_out.ppm")
    return 0


if __name__ == "__main__":
    sys.exit(main())
