"""Bit-exact inference engine simulator and performance model.

Executes compiled programs the way the hardware does: one block at a
time, instruction by instruction, with 8-bit feature codes in block
buffers and full-precision integer accumulation inside each leaf
module.  A frame-level oracle recomputes the same fixed-point
arithmetic layer by layer without any blocking, so the two routes can
be compared pixel for pixel.

Machine model
-------------
Three block buffers (BB0..BB2) hold feature planes of up to 32 lanes.
Each buffer is split into 8 SRAM banks addressed by 4x2-pixel tile;
two bank mappings are provided ("normal" and "interleaved") and a
static access-trace checker verifies that no instruction touches the
same bank twice in one cycle.  DI and DO are stream FIFOs, not banked
memories, and never appear in bank traces.

Every live plane carries its quantization format (the producing
instruction's ``qo``, or the program input format for DI) and a global
pixel origin.  Origins advance by one per truncated 3x3 window and
scale across shuffle levels, which lets the simulator align residual
operands exactly without per-instruction offset fields; on the real
engine that alignment is absorbed by the read-path register file.

Instruction semantics
---------------------
CONV   accumulates ``lm`` leaf modules over consecutive source planes
       (or the DI stream), adds the aligned bias, optionally adds a
       partial-sum operand ``srcS``, then requantizes to ``qo``.
ER     runs ``lm`` expand stages on one source plane.  Each stage is a
       3x3 leaf requantized to ``qs`` (unsigned clipping doubles as the
       ReLU) followed by a 1x1 contraction into a shared accumulator;
       the source plane itself is added back before the final
       requantize, so the module residual needs no operand.
UPX2   convolves like CONV but writes through the pixel shuffle: phase
       g of leaf lanes lands on output offset (g mod 2, g div 2).
DNX2   downsamples by stride or 2x2 max pooling; no parameters.

Partial-sum destinations (``dstS``) are an ISA capability this
simulator does not model and rejects at run time.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import blockflow, fbisa, paramcodec
from .blockflow import BLOCK_SIDE, BlockPlan
from .fbisa import Instruction, Program, UQ8
from .fixedpoint import (
    QFormat,
    pack_format,
    quantize_array,
    requantize_array,
    shift_round_half_away_array,
    unpack_format,
)
from .modelir import CONV3, ER, LANES, SHUFFLE_UP, UNSHUFFLE_DOWN, ModelIR, padded

BANKS = 8
BUFFER_BYTES = 512 * 1024
BANK_BYTES = BUFFER_BYTES // BANKS
TOTAL_BUFFER_BYTES = 3 * BUFFER_BYTES
TILES_PER_ROW = BLOCK_SIDE // fbisa.TILE_W

FEATURE_MAGIC = b"FDMP"


class SimulationError(Exception):
    """Raised when a program step has no defined hardware behaviour."""


# ---------------------------------------------------------------------------
# datapath arithmetic engine


@dataclass(frozen=True)
class EngineModel:
    """Multiplier complement and clock of the convolution engine."""

    clock_hz: float = 250e6
    conv3x3_mults: int = 32 * 32 * 9 * 8
    conv1x1_mults: int = 32 * 32 * 8

    @property
    def multipliers(self) -> int:
        return self.conv3x3_mults + self.conv1x1_mults

    @property
    def peak_ops_per_s(self) -> float:
        """Two ops per multiply-accumulate at full clock."""
        return 2.0 * self.multipliers * self.clock_hz


# ---------------------------------------------------------------------------
# block-buffer bank model


def bank_normal(tx: int, ty: int, tiles_per_row: int = TILES_PER_ROW) -> int:
    """Raster bank interleave: consecutive tiles in a row hit
    consecutive banks."""
    return (tx + tiles_per_row * ty) % BANKS


def bank_interleaved(tx: int, ty: int, tiles_per_row: int = TILES_PER_ROW) -> int:
    """Bank skew that spreads any aligned 2x2 tile quad over four
    distinct banks, as needed by the shuffle write path."""
    return (tx + 2 * ty + ty // 2) % BANKS


BANK_MAPPINGS = {"normal": bank_normal, "interleaved": bank_interleaved}


def instruction_trace(ins: Instruction, start_cycle: int = 0) -> list[tuple]:
    """Per-cycle SRAM tile accesses of one instruction.

    Rows are (cycle, buffer, op, tile_x, tile_y).  Reads fetch one
    horizontal pair of source tiles per cycle; rows above come from the
    line FIFOs and cost no SRAM access.  Stream endpoints (DI, DO) are
    omitted.  The pattern is data independent, so the trace doubles as
    run_block instrumentation.
    """
    rows: list[tuple] = []
    tiles_x, tiles_y = ins.out_tiles
    cycle = start_cycle
    sbx, sby = ins.src.base_tile
    dbx, dby = ins.dst.base_tile
    for _leaf in range(ins.leaf_modules):
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                if ins.src.name not in ("DI", "DO"):
                    if ins.opcode == "DNX2":
                        rx, ry = sbx + 2 * tx, sby + 2 * ty
                    else:
                        rx, ry = sbx + tx, sby + ty
                    rows.append((cycle, ins.src.name, "read", rx, ry))
                    rows.append((cycle, ins.src.name, "read", rx + 1, ry))
                if ins.srcS is not None and ins.srcS.name not in ("DI", "DO"):
                    bx, by = ins.srcS.base_tile
                    rows.append((cycle, ins.srcS.name, "read", bx + tx, by + ty))
                if ins.dst.name not in ("DI", "DO"):
                    if ins.opcode == "UPX2":
                        for b in range(2):
                            for a in range(2):
                                rows.append((cycle, ins.dst.name, "write",
                                             dbx + 2 * tx + a, dby + 2 * ty + b))
                    else:
                        rows.append((cycle, ins.dst.name, "write",
                                     dbx + tx, dby + ty))
                cycle += 1
    return rows


def block_trace(p: Program) -> list[tuple]:
    """Concatenated access trace of every instruction in one block."""
    rows: list[tuple] = []
    cycle = 0
    for ins in p.instructions:
        part = instruction_trace(ins, cycle)
        rows.extend(part)
        tiles_x, tiles_y = ins.out_tiles
        cycle += tiles_x * tiles_y * ins.leaf_modules
    return rows


def bank_trace_check(trace, mapping) -> list[tuple[int, str, int, int]]:
    """Find same-cycle same-bank collisions within each buffer.

    ``mapping`` is "normal", "interleaved", or a callable
    (tile_x, tile_y) -> bank.  Returns (cycle, buffer, bank, accesses)
    for every bank hit more than once in a cycle; an empty list means
    the schedule is conflict free.
    """
    if isinstance(mapping, str):
        try:
            fn = BANK_MAPPINGS[mapping]
        except KeyError:
            raise ValueError(f"unknown bank mapping {mapping!r}") from None
    else:
        fn = mapping
    counts: dict[tuple[int, str, int], int] = {}
    for cycle, unit, _op, tx, ty in trace:
        key = (cycle, unit, fn(tx, ty))
        counts[key] = counts.get(key, 0) + 1
    return [(c, u, b, n) for (c, u, b), n in sorted(counts.items()) if n > 1]


def save_trace(path: str | Path, trace, mapping="normal") -> None:
    """Write an access trace as CSV with resolved bank numbers."""
    fn = BANK_MAPPINGS[mapping] if isinstance(mapping, str) else mapping
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "unit", "bank", "op"])
        for cycle, unit, op, tx, ty in trace:
            w.writerow([cycle, unit, fn(tx, ty), op])


# ---------------------------------------------------------------------------
# block execution


@dataclass
class Plane:
    """A live feature surface: integer codes, format, global origin."""

    data: np.ndarray          # (channels, height, width) int64 codes
    fmt: QFormat
    origin: tuple[int, int]   # global (x, y) of local (0, 0) at this level


def _window(plane: Plane, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Read a window in global coordinates, replicating at the borders."""
    lx = x0 - plane.origin[0]
    ly = y0 - plane.origin[1]
    ph, pw = plane.data.shape[1], plane.data.shape[2]
    xs = np.clip(np.arange(lx, lx + w), 0, pw - 1)
    ys = np.clip(np.arange(ly, ly + h), 0, ph - 1)
    return plane.data[:, ys[:, None], xs[None, :]]


def _window_zero(plane: Plane, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Read a window in global coordinates with zero fill outside."""
    lx = x0 - plane.origin[0]
    ly = y0 - plane.origin[1]
    c, ph, pw = plane.data.shape
    out = np.zeros((c, h, w), dtype=np.int64)
    sx0, sy0 = max(lx, 0), max(ly, 0)
    sx1, sy1 = min(lx + w, pw), min(ly + h, ph)
    if sx1 > sx0 and sy1 > sy0:
        out[:, sy0 - ly:sy1 - ly, sx0 - lx:sx1 - lx] = plane.data[:, sy0:sy1, sx0:sx1]
    return out


def _conv3x3(window: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Integer 3x3 convolution of a (ci, oh+2, ow+2) window.

    Accumulates through float64 matrix products, which are exact here:
    every partial sum stays far below 2**53.
    """
    ci = window.shape[0]
    oh, ow = window.shape[1] - 2, window.shape[2] - 2
    if taps.shape[1] < ci:
        raise SimulationError(
            f"leaf has {taps.shape[1]} input lanes, source carries {ci}")
    win = window.astype(np.float64)
    w = taps[:, :ci].astype(np.float64)
    acc = np.zeros((taps.shape[0], oh * ow))
    for dy in range(3):
        for dx in range(3):
            acc += w[:, :, dy, dx] @ win[:, dy:dy + oh, dx:dx + ow].reshape(ci, -1)
    return np.rint(acc).astype(np.int64).reshape(taps.shape[0], oh, ow)


def _pool_input(plane: Plane, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    return _window(plane, x0, y0, w, h)


def pack_px2(frame: np.ndarray) -> np.ndarray:
    """Pixel unshuffle (c, 2h, 2w) -> (4c, h, w), phase-major lanes."""
    c, hh, ww = frame.shape
    if hh % 2 or ww % 2:
        raise ValueError(f"frame {ww}x{hh} is not even-sized")
    out = np.empty((4 * c, hh // 2, ww // 2), dtype=frame.dtype)
    for g in range(4):
        out[g * c:(g + 1) * c] = frame[:, g // 2::2, g % 2::2]
    return out


def unpack_px2(packed: np.ndarray) -> np.ndarray:
    """Pixel shuffle (4c, h, w) -> (c, 2h, 2w); inverse of pack_px2."""
    c4, hh, ww = packed.shape
    if c4 % 4:
        raise ValueError(f"{c4} lanes do not split into four phases")
    c = c4 // 4
    out = np.empty((c, 2 * hh, 2 * ww), dtype=packed.dtype)
    for g in range(4):
        out[:, g // 2::2, g % 2::2] = packed[g * c:(g + 1) * c]
    return out


def _align(codes: np.ndarray, from_frac: int, to_scale: int) -> np.ndarray:
    """Move codes from one fractional scale to an accumulator scale."""
    return shift_round_half_away_array(codes, from_frac - to_scale)


def _decode_params(ins: Instruction, container, cache: dict):
    if ins.param is None:
        return None
    if ins.param not in cache:
        seg = container.segment_index(ins.param)
        cache[ins.param] = paramcodec.decode_segment(container, seg)
    return cache[ins.param]


class _BlockMachine:
    """Register state of one block pass: three buffers plus the streams."""

    def __init__(self, p: Program, block: np.ndarray, input_format: QFormat):
        self.cfg = p.machine_config
        self.banks: list[Plane | None] = [None] * self.cfg.bb_count
        self.di = Plane(np.asarray(block).astype(np.int64), input_format, (0, 0))
        self.do: Plane | None = None

    def source(self, ref: fbisa.BufferRef, idx: int, role: str) -> Plane:
        if ref.name == "DI":
            return self.di
        if ref.name == "DO":
            raise SimulationError(f"instruction {idx}: {role} cannot read DO")
        plane = self.banks[ref.bank]
        if plane is None:
            raise SimulationError(
                f"instruction {idx}: {role} reads {ref.name} before any write")
        return plane

    def leaf_sources(self, ins: Instruction, idx: int) -> list[Plane]:
        """Source plane per leaf; CONV leaves occupy consecutive banks."""
        lm = ins.leaf_modules
        if ins.opcode != "CONV" or lm == 1:
            return [self.source(ins.src, idx, "src")] * lm
        if ins.src.name == "DI":
            lanes = self.di.data.shape[0]
            planes = []
            for k in range(lm):
                part = self.di.data[k * LANES:(k + 1) * LANES]
                if part.shape[0] == 0:
                    raise SimulationError(
                        f"instruction {idx}: leaf {k} reads past the "
                        f"{lanes}-lane input stream")
                planes.append(Plane(part, self.di.fmt, self.di.origin))
            return planes
        planes = []
        for k in range(lm):
            b = ins.src.bank + k
            if b >= self.cfg.bb_count:
                raise SimulationError(
                    f"instruction {idx}: leaf {k} reads past BB{self.cfg.bb_count - 1}")
            plane = self.banks[b]
            if plane is None:
                raise SimulationError(
                    f"instruction {idx}: leaf {k} reads BB{b} before any write")
            planes.append(plane)
        first = planes[0]
        for k, pl in enumerate(planes[1:], 1):
            if pl.origin != first.origin or pl.fmt != first.fmt:
                raise SimulationError(
                    f"instruction {idx}: leaf {k} source plane disagrees on "
                    f"origin or format")
        return planes

    def place(self, ins: Instruction, plane: Plane, idx: int) -> None:
        if ins.dst.name == "DO":
            if self.do is not None:
                raise SimulationError(f"instruction {idx}: DO written twice")
            self.do = plane
        elif ins.dst.name == "DI":
            raise SimulationError(f"instruction {idx}: cannot write DI")
        else:
            self.banks[ins.dst.bank] = plane


def _bias_to_scale(bias: np.ndarray, qb: QFormat, scale: int, idx: int) -> np.ndarray:
    shift = scale - qb.frac_bits
    if shift < 0:
        raise SimulationError(
            f"instruction {idx}: bias format Q{qb.frac_bits} is finer than "
            f"the accumulator scale {scale}; the bias path only shifts left")
    return bias.astype(np.int64) << shift


def _run_instruction(machine: _BlockMachine, ins: Instruction, idx: int,
                     leaves, taps) -> None:
    if ins.dstS is not None:
        raise SimulationError(
            f"instruction {idx}: partial-sum destinations are not modeled")
    if ins.opcode == "DNX2":
        _run_dnx2(machine, ins, idx)
        return
    planes = machine.leaf_sources(ins, idx)
    src = planes[0]
    truncated = ins.infer_type == "truncated"
    ox = src.origin[0] + (1 if truncated else 0)
    oy = src.origin[1] + (1 if truncated else 0)
    tiles_x, tiles_y = ins.out_tiles
    ow, oh = 4 * tiles_x, 2 * tiles_y
    read = _window if truncated else _window_zero
    n1 = src.fmt.frac_bits + ins.qw.frac_bits

    if ins.opcode == "CONV":
        acc = np.zeros((LANES, oh, ow), dtype=np.int64)
        for k, leaf in enumerate(leaves):
            win = read(planes[k], ox - 1, oy - 1, ow + 2, oh + 2)
            acc += _conv3x3(win, leaf.w3)
        acc += _bias_to_scale(leaves[0].bias, ins.qb, n1, idx)[:, None, None]
        if ins.srcS is not None:
            sp = machine.source(ins.srcS, idx, "srcS")
            acc += _align(_window(sp, ox, oy, ow, oh), sp.fmt.frac_bits, n1)
        if taps is not None:
            taps.append({"index": idx, "acc": acc.copy(), "scale": n1})
        out = requantize_array(acc, n1, ins.qo)
        machine.place(ins, Plane(out, ins.qo, (ox, oy)), idx)
        return

    if ins.opcode == "ER":
        qs = ins.qs if ins.qs is not None else ins.qo
        n2 = qs.frac_bits + ins.qw.frac_bits
        win = read(src, ox - 1, oy - 1, ow + 2, oh + 2)
        acc2 = np.zeros((LANES, oh, ow), dtype=np.int64)
        for r, leaf in enumerate(leaves):
            a3 = _conv3x3(win, leaf.w3)
            b3 = leaf.bias[:LANES] if r == 0 else leaf.bias
            a3 += _bias_to_scale(b3, ins.qb, n1, idx)[:, None, None]
            mid = requantize_array(a3, n1, qs)
            prod = leaf.w1.astype(np.float64) @ mid.reshape(LANES, -1).astype(np.float64)
            acc2 += np.rint(prod).astype(np.int64).reshape(LANES, oh, ow)
        acc2 += _bias_to_scale(leaves[0].bias[LANES:], ins.qb, n2, idx)[:, None, None]
        acc2 += _align(_window(src, ox, oy, ow, oh), src.fmt.frac_bits, n2)
        if ins.srcS is not None:
            sp = machine.source(ins.srcS, idx, "srcS")
            acc2 += _align(_window(sp, ox, oy, ow, oh), sp.fmt.frac_bits, n2)
        if taps is not None:
            taps.append({"index": idx, "acc": acc2.copy(), "scale": n2})
        out = requantize_array(acc2, n2, ins.qo)
        machine.place(ins, Plane(out, ins.qo, (ox, oy)), idx)
        return

    if ins.opcode == "UPX2":
        if ins.srcS is not None:
            raise SimulationError(
                f"instruction {idx}: the shuffle write path has no "
                f"partial-sum input")
        win = read(src, ox - 1, oy - 1, ow + 2, oh + 2)
        parts = []
        accs = []
        for leaf in leaves:
            acc = _conv3x3(win, leaf.w3)
            acc += _bias_to_scale(leaf.bias, ins.qb, n1, idx)[:, None, None]
            accs.append(acc)
            parts.append(requantize_array(acc, n1, ins.qo))
        if taps is not None:
            taps.append({"index": idx,
                         "acc": np.concatenate(accs, axis=0),
                         "scale": n1})
        lanes = np.concatenate(parts, axis=0)
        per_phase = 8 * ins.leaf_modules
        shuffled = np.zeros((per_phase, 2 * oh, 2 * ow), dtype=np.int64)
        for g in range(4):
            shuffled[:, g // 2::2, g % 2::2] = lanes[g * per_phase:(g + 1) * per_phase]
        machine.place(ins, Plane(shuffled, ins.qo, (2 * ox, 2 * oy)), idx)
        return

    raise SimulationError(f"instruction {idx}: unknown opcode {ins.opcode!r}")


def _run_dnx2(machine: _BlockMachine, ins: Instruction, idx: int) -> None:
    src = machine.source(ins.src, idx, "src")
    tiles_x, tiles_y = ins.out_tiles
    ow, oh = 4 * tiles_x, 2 * tiles_y
    ox = (src.origin[0] + 1) // 2
    oy = (src.origin[1] + 1) // 2
    win = _pool_input(src, 2 * ox, 2 * oy, 2 * ow, 2 * oh)
    if ins.pool == "stride":
        out = win[:, ::2, ::2]
    else:
        out = np.maximum.reduce([win[:, 0::2, 0::2], win[:, 0::2, 1::2],
                                 win[:, 1::2, 0::2], win[:, 1::2, 1::2]])
    out = requantize_array(out, src.fmt.frac_bits, ins.qo)
    machine.place(ins, Plane(out, ins.qo, (ox, oy)), idx)


def run_block(p: Program, container: paramcodec.ParamContainer,
              block: np.ndarray, input_format: QFormat | None = None,
              param_cache: dict | None = None,
              taps: list | None = None) -> tuple[np.ndarray, QFormat]:
    """Execute one compiled block and return the DO stream and format.

    ``block`` holds integer input codes shaped (channels, height,
    width).  The returned plane is tile rounded, so it may extend past
    the nominal valid output; callers crop.  ``taps``, when a list, is
    appended with each instruction's pre-requantization accumulator for
    debugging and linearity checks.
    """
    if p.sub_model_boundaries:
        raise SimulationError(
            "run_block executes one sub-model; drive split programs "
            "through run_image")
    block = np.asarray(block)
    if block.ndim != 3:
        raise ValueError(f"input block must be (channels, h, w), got {block.shape}")
    fmt_in = input_format if input_format is not None else p.input_format
    machine = _BlockMachine(p, block, fmt_in)
    cache = param_cache if param_cache is not None else {}
    for idx, ins in enumerate(p.instructions):
        leaves = _decode_params(ins, container, cache)
        _run_instruction(machine, ins, idx, leaves, taps)
    if machine.do is None:
        raise SimulationError("program finished without writing DO")
    return machine.do.data, machine.do.fmt


# ---------------------------------------------------------------------------
# frame execution


def _stage_programs(p: Program) -> list[Program]:
    stages = []
    fmt = p.input_format
    for a, b in p.segments:
        ins = p.instructions[a:b]
        stages.append(Program(ins, (), p.machine_config, fmt))
        fmt = ins[-1].qo
    return stages


def default_workers() -> int:
    """Worker count for the block loop; ECNNKIT_THREADS caps it."""
    raw = os.environ.get("ECNNKIT_THREADS", "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"ECNNKIT_THREADS must be an integer, got {raw!r}")
    return 1


def run_image(p: Program, container: paramcodec.ParamContainer,
              frame: np.ndarray, plan, workers: int | None = None) -> np.ndarray:
    """Run a compiled program over a whole frame through the block path.

    ``plan`` is the BlockPlan matching the compiled model, or a
    sequence of plans (one per sub-model) for bandwidth-split programs;
    intermediate frames then stream through DRAM between stages.
    Blocks are independent, so any schedule, including the thread pool
    engaged by ``workers`` or ECNNKIT_THREADS, produces the identical
    frame.
    """
    plans = list(plan) if isinstance(plan, (list, tuple)) else [plan]
    stages = _stage_programs(p)
    if len(plans) != len(stages):
        raise ValueError(
            f"program has {len(stages)} sub-models but {len(plans)} plans given")
    cur = np.asarray(frame).astype(np.int64)
    for stage, sp in zip(stages, plans):
        cur = _run_stage(stage, container, cur, sp, workers)
    return cur


def _run_stage(p: Program, container, frame: np.ndarray, plan: BlockPlan,
               workers: int | None) -> np.ndarray:
    model = plan.model
    packed = model.layers[0].kind == UNSHUFFLE_DOWN
    cache: dict = {}
    for ins in p.instructions:
        _decode_params(ins, container, cache)
    rows, cols = plan.grid
    nominal = plan.x_o_nominal
    out_ch = model.out_ch
    H, W = frame.shape[1], frame.shape[2]

    def one(rc):
        r, c = rc
        x0, y0 = plan.block_origin(r, c)
        xs = np.clip(np.arange(x0, x0 + plan.x_i), 0, W - 1)
        ys = np.clip(np.arange(y0, y0 + plan.x_i), 0, H - 1)
        win = frame[:, ys[:, None], xs[None, :]]
        if packed:
            win = pack_px2(win)
        out, _fmt = run_block(p, container, win, param_cache=cache)
        if out.shape[1] < nominal or out.shape[2] < nominal:
            raise SimulationError(
                f"block {(r, c)} produced {out.shape[2]}x{out.shape[1]}, "
                f"nominal output is {nominal}")
        return (r, c), out[:out_ch, :nominal, :nominal]

    coords = [(r, c) for r in range(rows) for c in range(cols)]
    n = workers if workers is not None else default_workers()
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            blocks = dict(pool.map(one, coords))
    else:
        blocks = dict(map(one, coords))
    return blockflow.stitch(blocks, plan)


# ---------------------------------------------------------------------------
# frame-level oracle


def _edge_pad(frame: np.ndarray, left: int, right: int) -> np.ndarray:
    return np.pad(frame, ((0, 0), (left, right), (left, right)), mode="edge")


def oracle_frame(m: ModelIR, weights, frame: np.ndarray,
                 qmap=None, input_format: QFormat = UQ8,
                 count_ops: bool = False):
    """Whole-frame fixed-point reference, computed without blocking.

    Replicates the frame border once at the input by the model's
    receptive margin, runs every layer at its full valid extent with
    the same integer arithmetic as the block engine, and crops to the
    output frame.  With ``count_ops`` the return value is
    (frame, mac_ops) where ``mac_ops`` counts hardware multiplies at
    32-padded lane widths.
    """
    x = np.asarray(frame).astype(np.int64)
    if x.ndim != 3:
        raise ValueError(f"frame must be (channels, h, w), got {x.shape}")
    ops = 0
    if not m.layers:
        return (x, ops) if count_ops else x
    qmap = qmap if qmap is not None else fbisa.default_qmap(m)
    H, W = x.shape[1], x.shape[2]
    traces = blockflow.trace_layers(m, BLOCK_SIDE)
    offset = traces[-1].offset
    scale = Fraction(2) ** m.output_level
    pack_align = 2 if m.layers[0].kind == UNSHUFFLE_DOWN else 1
    pad = pack_align * math.ceil(Fraction(offset) / scale / pack_align)
    x = _edge_pad(x, pad, pad)

    fmt = input_format
    link_sources = {src for src, _dst in m.residual_links}
    link_for = {dst: src for src, dst in m.residual_links}
    saved: dict[int, tuple[np.ndarray, QFormat]] = {}

    for i, layer in enumerate(m.layers):
        if layer.kind == UNSHUFFLE_DOWN:
            x = pack_px2(x)
        elif layer.kind == SHUFFLE_UP:
            x = unpack_px2(x)
        elif layer.kind == CONV3:
            fmts = qmap[i]
            qw, qb, qo = fmts["qw"], fmts["qb"], fmts["qo"]
            q3 = quantize_array(weights[i]["w"], qw)
            bq = quantize_array(weights[i]["b"], qb)
            n1 = fmt.frac_bits + qw.frac_bits
            acc = _conv3x3(x, q3)
            ops += 9 * padded(layer.in_ch) * padded(layer.out_ch) * acc.shape[1] * acc.shape[2]
            shift = n1 - qb.frac_bits
            if shift < 0:
                raise SimulationError(
                    f"layer {i}: bias format Q{qb.frac_bits} is finer than "
                    f"the accumulator scale {n1}")
            acc += (bq << shift)[:, None, None]
            if i in link_for:
                src_map, src_fmt = saved[link_for[i]]
                dy = (src_map.shape[1] - acc.shape[1]) // 2
                dx = (src_map.shape[2] - acc.shape[2]) // 2
                crop = src_map[:, dy:dy + acc.shape[1], dx:dx + acc.shape[2]]
                acc += _align(crop, src_fmt.frac_bits, n1)
            x = requantize_array(acc, n1, qo)
            fmt = qo
        elif layer.kind == ER:
            fmts = qmap[i]
            qw, qb, qo = fmts["qw"], fmts["qb"], fmts["qo"]
            qs = fmts.get("qs") or qo
            q3 = quantize_array(weights[i]["w3"], qw)
            b3 = quantize_array(weights[i]["b3"], qb)
            q1 = quantize_array(weights[i]["w1"], qw)
            b1 = quantize_array(weights[i]["b1"], qb)
            n1 = fmt.frac_bits + qw.frac_bits
            a3 = _conv3x3(x, q3)
            mid_ch, in_ch = q3.shape[0], q3.shape[1]
            ops += 9 * padded(in_ch) * padded(mid_ch) * a3.shape[1] * a3.shape[2]
            a3 += (b3 << (n1 - qb.frac_bits))[:, None, None]
            mid = requantize_array(a3, n1, qs)
            n2 = qs.frac_bits + qw.frac_bits
            prod = q1.astype(np.float64) @ mid.reshape(mid_ch, -1).astype(np.float64)
            acc = np.rint(prod).astype(np.int64).reshape(q1.shape[0], *mid.shape[1:])
            ops += padded(mid_ch) * padded(in_ch) * acc.shape[1] * acc.shape[2]
            acc += (b1 << (n2 - qb.frac_bits))[:, None, None]
            acc += _align(x[:, 1:-1, 1:-1], fmt.frac_bits, n2)
            x = requantize_array(acc, n2, qo)
            fmt = qo
        else:
            raise SimulationError(f"layer {i}: no engine mapping for {layer.kind!r}")
        if i in link_sources:
            saved[i] = (x, fmt)

    c0 = int(pad * scale) - offset
    out_w = int(W * scale)
    out_h = int(H * scale)
    if c0 < 0 or c0 + out_h > x.shape[1] or c0 + out_w > x.shape[2]:
        raise SimulationError(
            f"receptive margin {pad} left a {x.shape[2]}x{x.shape[1]} map, "
            f"cannot crop {out_w}x{out_h} at {c0}")
    x = x[:, c0:c0 + out_h, c0:c0 + out_w]
    return (x, 2 * ops) if count_ops else x


# ---------------------------------------------------------------------------
# performance model


@dataclass(frozen=True)
class InstructionTiming:
    index: int
    opcode: str
    ciu_cycles: int
    idu_cycles: int
    idu_bound: bool   # decode of this instruction outlasted the previous compute


@dataclass(frozen=True)
class PerfReport:
    timings: tuple[InstructionTiming, ...]
    cycles_per_block: int
    n_blocks: int
    cycles_per_frame: int
    target_fps: float
    cycles_per_second: float
    fps_capacity: float
    feasible: bool
    dram: blockflow.BandwidthReport
    ncr_effective: float
    utilization: float
    engine: EngineModel


def perf(p: Program, plan: BlockPlan, fps: float,
         engine: EngineModel | None = None) -> PerfReport:
    """Cycle, bandwidth, and utilization estimate for one program.

    The compute pipeline overlaps instruction i's tile loop (CIU) with
    decoding instruction i+1's parameters (IDU, 256 cycles per leaf
    module); only the first decode is exposed.  DRAM traffic comes from
    the block plan's clamped reads and frame writes, the same
    accounting the bandwidth module reports.
    """
    if engine is None:
        engine = EngineModel()
    if p.sub_model_boundaries:
        raise ValueError("time split programs one sub-model at a time")
    if not p.instructions:
        raise ValueError("empty program")
    ciu = []
    idu = []
    per_cycle_ops = []
    for ins in p.instructions:
        tiles_x, tiles_y = ins.out_tiles
        ciu.append(tiles_x * tiles_y * ins.leaf_modules)
        idu.append(paramcodec.DECODE_CYCLES_PER_LEAF * ins.leaf_modules
                   if ins.param is not None else 0)
        if ins.opcode == "ER":
            per_cycle_ops.append(2 * (engine.conv3x3_mults + engine.conv1x1_mults))
        elif ins.opcode == "DNX2":
            per_cycle_ops.append(0)
        else:
            per_cycle_ops.append(2 * engine.conv3x3_mults)
    n = len(ciu)
    cycles = idu[0]
    timings = [InstructionTiming(0, p.instructions[0].opcode, ciu[0], idu[0], True)]
    for i in range(n - 1):
        cycles += max(ciu[i], idu[i + 1])
        timings.append(InstructionTiming(i + 1, p.instructions[i + 1].opcode,
                                         ciu[i + 1], idu[i + 1],
                                         idu[i + 1] > ciu[i]))
    cycles += ciu[-1]
    per_frame = cycles * plan.n_blocks
    per_second = per_frame * fps
    ops_frame = sum(c * o for c, o in zip(ciu, per_cycle_ops)) * plan.n_blocks
    return PerfReport(
        timings=tuple(timings),
        cycles_per_block=cycles,
        n_blocks=plan.n_blocks,
        cycles_per_frame=per_frame,
        target_fps=fps,
        cycles_per_second=per_second,
        fps_capacity=engine.clock_hz / per_frame,
        feasible=per_second <= engine.clock_hz,
        dram=blockflow.block_bandwidth(plan, fps),
        ncr_effective=blockflow.ncr_discrete(plan.model, plan.x_i, "hardware"),
        utilization=ops_frame * fps / engine.peak_ops_per_s,
        engine=engine,
    )


# ---------------------------------------------------------------------------
# image and feature file formats


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    """Write (3, h, w) 8-bit codes as a binary P6 file."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"P6 needs (3, h, w), got {img.shape}")
    if img.min() < 0 or img.max() > 255:
        raise ValueError("P6 samples must be in 0..255")
    c, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.astype(np.uint8).transpose(1, 2, 0).tobytes())


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Write (h, w) or (1, h, w) 8-bit codes as a binary P5 file."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"P5 needs (h, w), got {img.shape}")
    if img.min() < 0 or img.max() > 255:
        raise ValueError("P5 samples must be in 0..255")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.astype(np.uint8).tobytes())


def _read_pnm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(data):
            raise ValueError("truncated image header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
    return tokens, pos + 1


def _read_pnm(path: str | Path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = _read_pnm_tokens(data, 4)
    if tokens[0] != magic:
        raise ValueError(f"expected {magic.decode()} file, got {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"only 8-bit images supported, maxval {maxval}")
    need = w * h * channels
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise ValueError(f"raster holds {len(raster)} bytes, needs {need}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(h, w)
    return arr.reshape(h, w, channels).transpose(2, 0, 1)


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P6 file as (3, h, w) uint8."""
    return _read_pnm(path, b"P6", 3)


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary P5 file as (h, w) uint8."""
    return _read_pnm(path, b"P5", 1)


def save_features(path: str | Path, codes: np.ndarray, fmt: QFormat) -> None:
    """Dump a feature plane with its format, little-endian header."""
    codes = np.asarray(codes)
    if codes.ndim != 3:
        raise ValueError(f"features must be (channels, h, w), got {codes.shape}")
    if codes.min() < fmt.code_min or codes.max() > fmt.code_max:
        raise ValueError("codes out of range for the declared format")
    c, h, w = codes.shape
    header = struct.pack("<4sHHHBB", FEATURE_MAGIC, w, h, c,
                         pack_format(fmt), fmt.width)
    dtype = np.int8 if fmt.signed else np.uint8
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(codes.astype(dtype).tobytes())


def load_features(path: str | Path) -> tuple[np.ndarray, QFormat]:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FEATURE_MAGIC:
        raise ValueError("not a feature dump")
    _magic, w, h, c, packed_fmt, width = struct.unpack_from("<4sHHHBB", data)
    fmt = unpack_format(packed_fmt, width)
    need = c * h * w
    raw = data[12:12 + need]
    if len(raw) < need:
        raise ValueError(f"feature payload holds {len(raw)} bytes, needs {need}")
    dtype = np.int8 if fmt.signed else np.uint8
    codes = np.frombuffer(raw, dtype=dtype).astype(np.int64).reshape(c, h, w)
    return codes, fmt
