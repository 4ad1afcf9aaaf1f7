"""Command-line driver for the toolchain.

One executable, ``ecnnkit``, with subcommands for model analysis,
design-space scans, compilation to the coarse instruction set,
assembling and disassembling programs, entropy-coding parameters,
calibrating quantization plans, bit-exact simulation, and the cycle
and bandwidth performance model.

Models are referenced either by a container file written with ``init``
or by a canonical name such as ``dnernet-b3r1n0`` or ``plain-d20c64``,
which builds the model in place with seeded weights.  All commands are
deterministic for a fixed ``--seed``; reports carry no timestamps.
"""

from __future__ import annotations

import argparse
import csv
import io
import re
import sys
from pathlib import Path

import numpy as np

from ecnnkit import blockflow, fbisa, modelir, paramcodec, quantflow, simcore

_RES_RE = re.compile(r"^(\d+)x(\d+)$")
_ERNET_RE = re.compile(r"^(dn12|dn|sr2|sr4)ernet-b(\d+)r(\d+)n(\d+)$")
_PLAIN_RE = re.compile(r"^plain-d(\d+)c(\d+)$")


def _parse_res(text: str) -> tuple[int, int]:
    m = _RES_RE.match(text.strip())
    if m is None:
        raise ValueError(f"resolution must look like 1920x1080, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _build_named(name: str) -> modelir.ModelIR:
    m = _ERNET_RE.match(name)
    if m:
        family, B, R, N = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
        return modelir.build_ernet(family, B, R, N)
    m = _PLAIN_RE.match(name)
    if m:
        return modelir.build_plain(int(m.group(1)), int(m.group(2)))
    raise ValueError(
        f"{name!r} is neither a model file nor a canonical model name "
        "(dnernet-bBrRnN, dn12ernet-..., sr2ernet-..., sr4ernet-..., plain-dDcC)")


def _model_ref(text: str):
    """Resolve a model argument to (model, weights or None, qmap or None)."""
    if Path(text).is_file():
        return modelir.load_model(text)
    return _build_named(text), None, None


def _resolve(args):
    m, weights, qmap = _model_ref(args.model)
    if weights is None:
        weights = modelir.init_weights(m, seed=args.seed)
    if getattr(args, "plan", None):
        qmap = quantflow.load_plan(args.plan).qmap()
    return m, weights, qmap


def _block_plan(m, args, default_res=None):
    if getattr(args, "res", None):
        w, h = _parse_res(args.res)
    elif default_res is not None:
        w, h = default_res
    else:
        w = h = args.block
    return blockflow.plan_blocks(m, (w, h), args.block)


def _compile(m, plan, qmap, weights):
    return fbisa.compile_model(m, plan, qmap=qmap, weights=weights)


def _out(args, fallback: str | None = None) -> Path | None:
    if args.output:
        return Path(args.output)
    return Path(fallback) if fallback else None


# ---------------------------------------------------------------------------
# subcommands


def cmd_init(args) -> int:
    m = _build_named(args.name)
    weights = modelir.init_weights(m, seed=args.seed)
    path = _out(args, f"{m.name}.json")
    modelir.save_model(path, m, weights=weights)
    n_params = sum(a.size for d in weights.values() for a in d.values())
    print(f"model: {m.name}")
    print(f"layers: {len(m.layers)}")
    print(f"parameters: {n_params}")
    print(f"wrote: {path}")
    return 0


def cmd_analyze(args) -> int:
    m, _weights, _qmap = _model_ref(args.model)
    w, h = _parse_res(args.res)
    plan = blockflow.plan_blocks(m, (w, h), args.block)
    bw = blockflow.block_bandwidth(plan, args.fps)
    comp = modelir.intrinsic_complexity(m, "hardware", x_i=args.block)
    depth = comp.plain_equivalent_depth
    engine = simcore.EngineModel(clock_hz=args.clock)
    out_w, out_h = plan.out_frame
    budget = modelir.kop_per_pixel_budget(engine.peak_ops_per_s, out_w, out_h, args.fps)
    frame_gb = blockflow.frame_bandwidth(h, w, m.channels, depth, args.fps,
                                         args.bits) / 1e9

    rows, cols = plan.grid
    print(f"model: {m.name}")
    print(f"input: {w}x{h} @ {args.fps:g} fps")
    print(f"output: {out_w}x{out_h}")
    print(f"block: {plan.x_i} -> {plan.x_o} valid (grid {cols}x{rows}, "
          f"{plan.n_blocks} blocks)")
    print(f"plain-equivalent-depth: {depth:g}")
    print(f"nbr-analytic: {blockflow.nbr_plain(depth, args.block):.3f}")
    print(f"nbr-discrete: {bw.nbr:.3f}")
    print(f"ncr-analytic: {blockflow.ncr_plain(depth, args.block):.3f}")
    print(f"ncr-discrete: {blockflow.ncr_discrete(m, args.block):.3f}")
    print(f"kop-intrinsic: {comp.intrinsic_kop_per_pixel:.3f}")
    print(f"kop-effective: {comp.effective_kop_per_pixel:.3f}")
    print(f"budget-kop: {budget:.3f}")
    print(f"compute-feasible: "
          f"{'true' if comp.effective_kop_per_pixel <= budget else 'false'}")
    print(f"dram-gb-per-s: {bw.gb_per_s:.3f}")
    print(f"frame-based-gb-per-s: {frame_gb:.3f}")
    return 0


def cmd_scan(args) -> int:
    if args.family not in modelir.FAMILIES:
        raise ValueError(f"unknown family {args.family!r}; "
                         f"choose from {', '.join(modelir.FAMILIES)}")
    entries = modelir.scan_models(args.family, args.budget, args.block)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["B", "R", "N", "r_e", "intrinsic_kop", "ncr", "effective_kop"])
    for e in entries:
        writer.writerow([e.B, e.R, e.N, f"{e.r_e:.4f}", f"{e.intrinsic_kop:.3f}",
                         f"{e.ncr:.4f}", f"{e.effective_kop:.3f}"])
    path = _out(args)
    if path:
        path.write_text(buf.getvalue())
        print(f"candidates: {len(entries)}")
        print(f"wrote: {path}")
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_compile(args) -> int:
    m, weights, qmap = _resolve(args)
    plan = _block_plan(m, args)
    program, _layout = _compile(m, plan, qmap, weights)
    path = _out(args)
    if path:
        fbisa.save_program(path, program)
        print(f"instructions: {len(program.instructions)}")
        print(f"wrote: {path}")
    else:
        sys.stdout.write(fbisa.disassemble(program))
    return 0


def cmd_asm(args) -> int:
    program = fbisa.assemble(Path(args.input).read_text())
    path = _out(args, Path(args.input).stem + ".fbisa")
    fbisa.save_program(path, program)
    print(f"instructions: {len(program.instructions)}")
    print(f"wrote: {path}")
    return 0


def cmd_disasm(args) -> int:
    program = fbisa.load_program(args.input)
    text = fbisa.disassemble(program)
    path = _out(args)
    if path:
        path.write_text(text)
        print(f"wrote: {path}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_encode(args) -> int:
    m, weights, qmap = _resolve(args)
    plan = _block_plan(m, args)
    _program, layout = _compile(m, plan, qmap, weights)
    container = fbisa.encode_parameters(m, layout, weights,
                                        qmap or fbisa.default_qmap(m))
    report = paramcodec.compression_report(container)
    gaps = [code - ent for code, ent in zip(report.segment_mean_code_bits,
                                            report.segment_entropy_bits)]
    print(f"segments: {len(container.directory)}")
    print(f"raw-bytes: {report.raw_bytes}")
    print(f"coded-bytes: {report.coded_bytes}")
    print(f"ratio: {report.ratio:.3f}")
    print(f"shannon-gap-mean-bits: {sum(gaps) / len(gaps):.4f}")
    print(f"shannon-gap-max-bits: {max(gaps):.4f}")
    path = _out(args)
    if path:
        paramcodec.save_container(path, container)
        print(f"wrote: {path}")
    return 0


def cmd_quantize(args) -> int:
    m, weights, _qmap = _resolve(args)
    if args.frames:
        frames = [simcore.read_ppm(p).astype(np.int64) for p in args.frames]
    else:
        w, h = _parse_res(args.res)
        rng = np.random.default_rng(args.seed)
        frames = [rng.integers(0, 256, size=(3, h, w)) for _ in range(2)]
    stats = quantflow.collect_stats(m, weights, frames)
    plan = quantflow.assign_formats(stats, norm=args.norm,
                                    budget_bytes=args.budget)
    demoted = plan.demoted_groups()
    print(f"model: {m.name}")
    print(f"frames: {len(frames)}")
    print(f"norm: {plan.norm}")
    print(f"container-bytes: {plan.container_bytes}")
    print(f"budget-bytes: {args.budget if args.budget else paramcodec.PARAM_MEM_BYTES}")
    print("demoted: " + (",".join(f"{i}:{g}" for i, g in demoted) if demoted else "none"))
    path = _out(args, "plan.json")
    quantflow.save_plan(path, plan)
    print(f"wrote: {path}")
    return 0


def cmd_run(args) -> int:
    m, weights, qmap = _resolve(args)
    if args.input:
        frame = simcore.read_ppm(args.input).astype(np.int64)
        res = (frame.shape[2], frame.shape[1])
    else:
        res = _parse_res(args.res)
        rng = np.random.default_rng(args.seed)
        frame = rng.integers(0, 256, size=(3, res[1], res[0]))
    plan = blockflow.plan_blocks(m, res, args.block)
    program, layout = _compile(m, plan, qmap, weights)
    container = fbisa.encode_parameters(m, layout, weights,
                                        qmap or fbisa.default_qmap(m))
    out = simcore.run_image(program, container, frame, plan)
    print(f"model: {m.name}")
    print(f"blocks: {plan.n_blocks}")
    print(f"output: {out.shape[2]}x{out.shape[1]}x{out.shape[0]}")
    exact = None
    if args.oracle:
        reference = simcore.oracle_frame(m, weights, frame, qmap=qmap)
        exact = bool(np.array_equal(out, reference))
        print(f"bit-exact: {'true' if exact else 'false'}")
    path = _out(args)
    if path:
        if out.shape[0] == 3:
            simcore.write_ppm(path, out)
        else:
            simcore.save_features(path, out, program.instructions[-1].qo)
        print(f"wrote: {path}")
    return 0 if exact in (None, True) else 1


def cmd_perf(args) -> int:
    m, weights, qmap = _resolve(args)
    plan = _block_plan(m, args)
    program, _layout = _compile(m, plan, qmap, weights)
    engine = simcore.EngineModel(clock_hz=args.clock)
    rep = simcore.perf(program, plan, args.fps, engine)
    print(f"model: {m.name}")
    print(f"resolution: {plan.frame[0]}x{plan.frame[1]} @ {args.fps:g} fps")
    print(f"clock-hz: {args.clock:.0f}")
    print(f"instructions: {len(program.instructions)}")
    print(f"cycles-per-block: {rep.cycles_per_block}")
    print(f"blocks-per-frame: {rep.n_blocks}")
    print(f"cycles-per-frame: {rep.cycles_per_frame}")
    print(f"cycles-per-second: {rep.cycles_per_second:.0f}")
    print(f"fps-capacity: {rep.fps_capacity:.3f}")
    print(f"utilization: {rep.utilization:.4f}")
    print(f"dram-gb-per-s: {rep.dram.gb_per_s:.3f}")
    print(f"ncr: {rep.ncr_effective:.4f}")
    print(f"feasible: {'true' if rep.feasible else 'false'}")
    return 0


# ---------------------------------------------------------------------------
# argument surface


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecnnkit",
        description="Toolchain and bit-exact simulator for the block-based "
                    "CNN inference engine.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, res_default=None):
        p.add_argument("--block", type=int, default=blockflow.BLOCK_SIDE,
                       help="input block side x_i (default %(default)s)")
        p.add_argument("--seed", type=int, default=0,
                       help="seed for generated weights and frames")
        p.add_argument("--res", default=res_default, help="frame size WxH")

    p = sub.add_parser("init", help="build a named model with seeded weights")
    p.add_argument("name", help="canonical model name, e.g. dnernet-b3r1n0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", help="model container path")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("analyze", help="bandwidth and compute analysis")
    p.add_argument("model")
    common(p, res_default="3840x2160")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--clock", type=float, default=250e6, help="engine clock in Hz")
    p.add_argument("--bits", type=int, default=16,
                   help="feature bits for the frame-based reference column")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("scan", help="feasible (B, R_E) frontier as CSV")
    p.add_argument("family", help="dn | dn12 | sr2 | sr4")
    p.add_argument("--budget", type=float, required=True,
                   help="compute budget in KOP/pixel")
    p.add_argument("--block", type=int, default=blockflow.BLOCK_SIDE)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("compile", help="lower a model to an instruction program")
    p.add_argument("model")
    common(p)
    p.add_argument("--plan", help="quantization plan JSON")
    p.add_argument("-o", "--output", help="binary program path; omit to list")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("asm", help="assemble a textual program")
    p.add_argument("input")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_asm)

    p = sub.add_parser("disasm", help="disassemble a binary program")
    p.add_argument("input")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_disasm)

    p = sub.add_parser("encode", help="entropy-code quantized parameters")
    p.add_argument("model")
    common(p)
    p.add_argument("--plan", help="quantization plan JSON")
    p.add_argument("-o", "--output", help="parameter container path")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("quantize", help="calibrate a quantization plan")
    p.add_argument("model")
    p.add_argument("--frames", nargs="*", default=[],
                   help="sample PPM frames; generated when omitted")
    p.add_argument("--res", default="64x64",
                   help="size of generated sample frames")
    p.add_argument("--norm", choices=("l1", "l2"), default="l2")
    p.add_argument("--budget", type=int, default=None,
                   help="parameter memory budget in bytes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", help="plan JSON path")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("run", help="simulate a frame through the block engine")
    p.add_argument("model")
    common(p, res_default="128x128")
    p.add_argument("--plan", help="quantization plan JSON")
    p.add_argument("--in", dest="input", help="input PPM frame")
    p.add_argument("--oracle", action="store_true",
                   help="also run the frame-level reference and compare")
    p.add_argument("-o", "--output", help="output image path")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("perf", help="cycle and bandwidth model for one program")
    p.add_argument("model")
    common(p, res_default="3840x2160")
    p.add_argument("--plan", help="quantization plan JSON")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--clock", type=float, default=250e6)
    p.set_defaults(func=cmd_perf)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, simcore.SimulationError) as err:
        print(f"ecnnkit: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
