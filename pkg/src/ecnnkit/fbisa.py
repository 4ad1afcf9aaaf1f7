"""Coarse block-level instruction set: assembler, compiler, validator.

One instruction processes a whole feature block through one operation
and bundles up to four leaf-modules, each a 32ch-to-32ch 3x3 filter
task.  What the leaves iterate over depends on the opcode:

* CONV: input-channel groups; their partial sums accumulate inside the
  datapath and one 32-channel output group is written.  Layers with
  more output channels become one instruction per output group.
* ER: the expand stages of an expand-reduce module.  Each leaf adds a
  1x1 reduce step, and the module input is added back before the
  output is requantized.
* UPX2: spatial phases of a pixel-shuffle write.  Lane rows split into
  four equal phase ranges of 8*lm lanes; phase g lands on the output
  pixel offset (g mod 2, g div 2).
* DNX2: stride-2 or max 2x2 pooling, no parameters.

Feature operands name whole block buffers, not registers: BB0..BB2 are
on-chip planes of one 32-channel block each, DI and DO are streamed
virtual buffers for frame input and output.  A CONV with lm > 1 reads
lm consecutively numbered planes starting at src.

Text form is one instruction per line, ``OPCODE key=value ...``, with
``#`` comments, a ``.submodel`` boundary directive and an
``.input <qformat>`` directive for the stream format.  Binary form is
the "FBISA\\0" container with fixed 16-byte little-endian records.

Q-format fields: ``qw`` weights, ``qb`` biases, ``qo`` output
features, ``qs`` the requantized intermediate (the post-ReLU expand
features of ER, or stored partial sums).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import modelir, paramcodec
from .blockflow import BLOCK_SIDE, BlockPlan
from .fixedpoint import QFormat, pack_format, quantize_array, unpack_format
from .modelir import CONV3, ER, LANES, ModelIR

OPCODES = ("CONV", "ER", "UPX2", "DNX2")
BUFFERS = ("BB0", "BB1", "BB2", "DI", "DO")
INFER_TYPES = ("truncated", "zero-padded")
POOL_MODES = ("stride", "max")
TILE_W = 4
TILE_H = 2
MAX_LEAVES = 4
MAGIC = b"FBISA\x00"
VERSION = 1
RECORD_BYTES = 16

UQ8 = QFormat(signed=False, frac_bits=8)


class AssemblyError(ValueError):
    def __init__(self, message: str, line: int | None = None,
                 column: int | None = None):
        place = ""
        if line is not None:
            place = f"line {line}"
            if column is not None:
                place += f", col {column}"
            place += ": "
        super().__init__(place + message)
        self.line = line
        self.column = column


class CompileError(ValueError):
    pass


@dataclass(frozen=True)
class MachineConfig:
    x_i: int = BLOCK_SIDE
    channels: int = LANES
    bb_count: int = 3
    param_mem_bytes: int = paramcodec.PARAM_MEM_BYTES

    def __post_init__(self) -> None:
        if self.x_i < 3 or self.x_i % TILE_W:
            raise ValueError(f"block side {self.x_i} not a tile multiple")
        if self.channels != LANES:
            raise ValueError("datapath is fixed at 32 lanes")
        if not 1 <= self.bb_count <= 3:
            raise ValueError("1..3 block buffers")


@dataclass(frozen=True)
class BufferRef:
    name: str
    base_tile: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        if self.name not in BUFFERS:
            raise ValueError(f"unknown buffer {self.name!r}")
        tx, ty = self.base_tile
        if not (0 <= tx < 32 and 0 <= ty < 64):
            raise ValueError(f"base tile {self.base_tile} not encodable")
        if self.name in ("DI", "DO") and self.base_tile != (0, 0):
            raise ValueError("stream buffers take no base tile")

    @property
    def bank(self) -> int:
        return BUFFERS.index(self.name)

    @property
    def text(self) -> str:
        if self.base_tile == (0, 0):
            return self.name
        return f"{self.name}+{self.base_tile[0]}x{self.base_tile[1]}"

    @classmethod
    def parse(cls, text: str) -> "BufferRef":
        name, plus, rest = text.partition("+")
        if not plus:
            return cls(name)
        w, sep, h = rest.partition("x")
        if not sep or not w.isdigit() or not h.isdigit():
            raise ValueError(f"malformed buffer reference {text!r}")
        return cls(name, (int(w), int(h)))


@dataclass(frozen=True)
class Instruction:
    opcode: str
    out_tiles: tuple[int, int]
    src: BufferRef
    dst: BufferRef
    qo: QFormat
    leaf_modules: int = 1
    srcS: BufferRef | None = None
    dstS: BufferRef | None = None
    param: int | None = None
    infer_type: str = "truncated"
    pool: str | None = None
    qw: QFormat | None = None
    qb: QFormat | None = None
    qs: QFormat | None = None

    def __post_init__(self) -> None:
        if self.opcode not in OPCODES:
            raise ValueError(f"unknown opcode {self.opcode!r}")
        if not 1 <= self.leaf_modules <= MAX_LEAVES:
            raise ValueError(f"leaf-module count {self.leaf_modules} outside 1..4")
        tx, ty = self.out_tiles
        if not (1 <= tx < 64 and 1 <= ty < 128):
            raise ValueError(f"output tiles {self.out_tiles} not encodable")
        if self.infer_type not in INFER_TYPES:
            raise ValueError(f"unknown inference type {self.infer_type!r}")
        if self.opcode == "DNX2":
            if self.pool not in POOL_MODES:
                raise ValueError("DNX2 needs pool=stride or pool=max")
            if self.param is not None or self.qw or self.qb or self.qs:
                raise ValueError("DNX2 carries no parameters")
        else:
            if self.pool is not None:
                raise ValueError(f"{self.opcode} takes no pool mode")
            if self.param is None or self.qw is None or self.qb is None:
                raise ValueError(f"{self.opcode} needs param, qw and qb")
        if self.param is not None and not 0 <= self.param < 1 << 16:
            raise ValueError(f"restart address {self.param} not encodable")

    @property
    def out_extent(self) -> tuple[int, int]:
        """Written pixel extent: tiles times 4x2, doubled by a shuffle."""
        s = 2 if self.opcode == "UPX2" else 1
        return (s * TILE_W * self.out_tiles[0], s * TILE_H * self.out_tiles[1])


@dataclass(frozen=True)
class Program:
    instructions: tuple[Instruction, ...]
    sub_model_boundaries: tuple[int, ...] = ()
    machine_config: MachineConfig = MachineConfig()
    input_format: QFormat = UQ8

    def __post_init__(self) -> None:
        last = 0
        for b in self.sub_model_boundaries:
            if not 0 < b < len(self.instructions):
                raise ValueError(f"boundary {b} outside program")
            if b <= last:
                raise ValueError("boundaries must increase")
            last = b

    @property
    def segments(self) -> tuple[tuple[int, int], ...]:
        """Half-open instruction ranges, one per sub-model."""
        edges = (0, *self.sub_model_boundaries, len(self.instructions))
        return tuple(zip(edges[:-1], edges[1:]))


@dataclass(frozen=True)
class Diagnostic:
    instruction: int | None
    code: str
    message: str

    def __str__(self) -> str:
        where = "program" if self.instruction is None else f"#{self.instruction}"
        return f"{where}: {self.code}: {self.message}"


# ---------------------------------------------------------------------------
# static checks

def _read_planes(ins: Instruction) -> list[int]:
    """Bank numbers a CONV's leaves stream from (other opcodes share one)."""
    if ins.opcode == "CONV" and ins.src.name.startswith("BB"):
        return [ins.src.bank + k for k in range(ins.leaf_modules)]
    return [ins.src.bank]


def instruction_diagnostics(ins: Instruction, idx: int,
                            cfg: MachineConfig) -> list[Diagnostic]:
    """Per-instruction operand rules, independent of program context."""
    out = []

    def bad(code: str, message: str) -> None:
        out.append(Diagnostic(idx, code, message))

    for role, ref in (("src", ins.src), ("srcS", ins.srcS)):
        if ref is not None and ref.name == "DO":
            bad("write-only", f"{role} reads the output stream")
    for role, ref in (("dst", ins.dst), ("dstS", ins.dstS)):
        if ref is not None and ref.name == "DI":
            bad("read-only", f"{role} writes the input stream")
    for role, ref in (("src", ins.src), ("dst", ins.dst),
                      ("srcS", ins.srcS), ("dstS", ins.dstS)):
        if ref is not None and ref.name.startswith("BB") and ref.bank >= cfg.bb_count:
            bad("no-such-buffer", f"{role}={ref.name} with {cfg.bb_count} buffers")
    if (ins.opcode == "CONV" and ins.leaf_modules > 1
            and ins.src.name.startswith("BB")
            and ins.src.bank + ins.leaf_modules > cfg.bb_count):
        bad("no-such-buffer",
            f"{ins.leaf_modules} input planes from {ins.src.name} "
            f"run past BB{cfg.bb_count - 1}")
    w, h = ins.out_extent
    if ins.dst.name.startswith("BB"):
        bx, by = ins.dst.base_tile
        if bx * TILE_W + w > cfg.x_i or by * TILE_H + h > cfg.x_i:
            bad("capacity", f"{w}x{h} output at tile ({bx},{by}) "
                            f"exceeds the {cfg.x_i} buffer side")
    # a restart attribute addresses the bias stream, which fills at most
    # 1/161 of parameter memory (20 weight streams at 8x plus itself)
    bias_space = cfg.param_mem_bytes // (8 * (paramcodec.N_STREAMS - 1) + 1)
    if ins.param is not None and ins.param >= bias_space:
        bad("param-range", f"restart address {ins.param} outside the "
                           f"{bias_space}-byte bias address space")
    return out


def validate(p: Program) -> list[Diagnostic]:
    """Structured program checks; returns diagnostics, never raises.

    Liveness is tracked per sub-model at plane granularity: every block
    pass starts with only DI holding data, must consume DI exactly
    once, and must produce DO exactly once.
    """
    diags: list[Diagnostic] = []
    cfg = p.machine_config
    for idx, ins in enumerate(p.instructions):
        diags.extend(instruction_diagnostics(ins, idx, cfg))
    for seg_no, (start, stop) in enumerate(p.segments):
        written: set[int] = set()
        di_reads: list[int] = []
        do_writes: list[int] = []
        for idx in range(start, stop):
            ins = p.instructions[idx]
            reads = _read_planes(ins)
            if ins.srcS is not None and ins.srcS.name != "DO":
                reads.append(ins.srcS.bank)
            for bank in reads:
                if bank == BUFFERS.index("DI"):
                    di_reads.append(idx)
                elif bank < 3 and bank not in written:
                    diags.append(Diagnostic(
                        idx, "read-before-write",
                        f"BB{bank} read before any write in sub-model {seg_no}"))
            for ref in (ins.dst, ins.dstS):
                if ref is None:
                    continue
                if ref.name == "DO":
                    do_writes.append(idx)
                elif ref.name.startswith("BB"):
                    written.add(ref.bank)
        if len(di_reads) != 1:
            diags.append(Diagnostic(
                di_reads[1] if len(di_reads) > 1 else None, "di-misuse",
                f"sub-model {seg_no} reads DI {len(di_reads)} times, needs 1"))
        if len(do_writes) != 1:
            diags.append(Diagnostic(
                do_writes[1] if len(do_writes) > 1 else None, "do-misuse",
                f"sub-model {seg_no} writes DO {len(do_writes)} times, needs 1"))
    return diags


# ---------------------------------------------------------------------------
# text form

_KEYS = ("out", "lm", "type", "pool", "src", "dst", "srcS", "dstS",
         "param", "qw", "qb", "qo", "qs")


def _parse_instruction(opcode: str, pairs: dict[str, str], line: int) -> Instruction:
    def take(key):
        return pairs.pop(key, None)

    kwargs = {}
    out = take("out")
    if out is None:
        raise AssemblyError("missing out=WxH", line)
    w, sep, h = out.partition("x")
    if not sep or not w.isdigit() or not h.isdigit():
        raise AssemblyError(f"malformed tile count {out!r}", line)
    lm = take("lm")
    if lm is not None and not lm.isdigit():
        raise AssemblyError(f"malformed leaf-module count {lm!r}", line)
    infer_type = take("type") or "truncated"
    pool = take("pool")
    param = take("param")
    if param is not None:
        if not param.startswith("@") or not param[1:].isdigit():
            raise AssemblyError(f"malformed restart address {param!r}", line)
        kwargs["param"] = int(param[1:])
    try:
        for key in ("src", "dst", "srcS", "dstS"):
            value = take(key)
            if value is None and key in ("src", "dst"):
                raise AssemblyError(f"missing {key}=", line)
            if value is not None:
                kwargs[key] = BufferRef.parse(value)
        for key in ("qw", "qb", "qo", "qs"):
            value = take(key)
            if value is not None:
                kwargs[key] = QFormat.parse(value)
        if "qo" not in kwargs:
            raise AssemblyError("missing qo=", line)
        if pairs:
            raise AssemblyError(f"unknown key {next(iter(pairs))!r}", line)
        return Instruction(
            opcode=opcode,
            out_tiles=(int(w), int(h)),
            leaf_modules=int(lm) if lm is not None else 1,
            infer_type=infer_type,
            pool=pool,
            **kwargs,
        )
    except AssemblyError:
        raise
    except ValueError as exc:
        raise AssemblyError(str(exc), line) from exc


def assemble(text: str) -> Program:
    """Parse textual instructions into a Program.

    Raises AssemblyError with line (and column for token errors) on
    malformed input or per-instruction operand violations.  Whole
    program liveness is reported by validate(), not here, so single
    instructions can be assembled standalone.
    """
    instructions: list[Instruction] = []
    boundaries: list[int] = []
    input_format = UQ8
    config = MachineConfig()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head == ".submodel":
            if not instructions:
                raise AssemblyError("boundary before any instruction", line_no)
            if boundaries and boundaries[-1] == len(instructions):
                raise AssemblyError("empty sub-model", line_no)
            boundaries.append(len(instructions))
            continue
        if head == ".input":
            if len(tokens) != 2:
                raise AssemblyError(".input takes one Q-format", line_no)
            try:
                input_format = QFormat.parse(tokens[1])
            except ValueError as exc:
                raise AssemblyError(str(exc), line_no) from exc
            continue
        if head == ".machine":
            if instructions:
                raise AssemblyError(".machine must precede instructions", line_no)
            fields = {}
            for tok in tokens[1:]:
                key, sep, value = tok.partition("=")
                if not sep or not value.lstrip("-").isdigit():
                    raise AssemblyError(f"malformed machine field {tok!r}", line_no)
                fields[key] = int(value)
            known = {"x_i": "x_i", "channels": "channels",
                     "bb": "bb_count", "pmem": "param_mem_bytes"}
            try:
                config = replace(config, **{
                    known[k]: v for k, v in fields.items() if k in known})
            except ValueError as exc:
                raise AssemblyError(str(exc), line_no) from exc
            unknown = set(fields) - set(known)
            if unknown:
                raise AssemblyError(f"unknown machine field {unknown.pop()!r}",
                                    line_no)
            continue
        if head.startswith("."):
            raise AssemblyError(f"unknown directive {head!r}", line_no)
        if head not in OPCODES:
            raise AssemblyError(f"unknown opcode {head!r}", line_no, 1)
        pairs: dict[str, str] = {}
        column = raw.index(head) + len(head)
        for tok in tokens[1:]:
            column = raw.index(tok, column)
            key, sep, value = tok.partition("=")
            if not sep:
                raise AssemblyError(f"expected key=value, got {tok!r}",
                                    line_no, column + 1)
            if key not in _KEYS:
                raise AssemblyError(f"unknown key {key!r}", line_no, column + 1)
            if key in pairs:
                raise AssemblyError(f"duplicate key {key!r}", line_no, column + 1)
            pairs[key] = value
            column += len(tok)
        ins = _parse_instruction(head, pairs, line_no)
        problems = instruction_diagnostics(ins, len(instructions), config)
        if problems:
            raise AssemblyError(f"{problems[0].code}: {problems[0].message}",
                                line_no)
        instructions.append(ins)
    if not instructions:
        raise AssemblyError("no instructions")
    return Program(tuple(instructions), tuple(boundaries), config, input_format)


def _format_instruction(ins: Instruction) -> str:
    parts = [ins.opcode, f"out={ins.out_tiles[0]}x{ins.out_tiles[1]}",
             f"lm={ins.leaf_modules}"]
    if ins.infer_type != "truncated":
        parts.append(f"type={ins.infer_type}")
    if ins.pool is not None:
        parts.append(f"pool={ins.pool}")
    parts.append(f"src={ins.src.text}")
    parts.append(f"dst={ins.dst.text}")
    if ins.srcS is not None:
        parts.append(f"srcS={ins.srcS.text}")
    if ins.dstS is not None:
        parts.append(f"dstS={ins.dstS.text}")
    if ins.param is not None:
        parts.append(f"param=@{ins.param}")
    if ins.qw is not None:
        parts.append(f"qw={ins.qw.notation}")
    if ins.qb is not None:
        parts.append(f"qb={ins.qb.notation}")
    parts.append(f"qo={ins.qo.notation}")
    if ins.qs is not None:
        parts.append(f"qs={ins.qs.notation}")
    return " ".join(parts)


def disassemble(p: Program) -> str:
    """Canonical text: fixed operand order, Q-formats always explicit."""
    lines = []
    if p.machine_config != MachineConfig():
        c = p.machine_config
        lines.append(f".machine x_i={c.x_i} channels={c.channels} "
                     f"bb={c.bb_count} pmem={c.param_mem_bytes}")
    lines.append(f".input {p.input_format.notation}")
    cuts = set(p.sub_model_boundaries)
    for idx, ins in enumerate(p.instructions):
        if idx in cuts:
            lines.append(".submodel")
        lines.append(_format_instruction(ins))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# binary form

def _pack_ref(ref: BufferRef | None) -> int:
    if ref is None:
        return 0
    return ref.bank | (ref.base_tile[0] << 3) | (ref.base_tile[1] << 8)


def _unpack_ref(word: int) -> BufferRef:
    return BufferRef(BUFFERS[word & 7], ((word >> 3) & 31, (word >> 8) & 63))


def program_to_bytes(p: Program) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", VERSION)
    c = p.machine_config
    out += struct.pack("<HHHI", c.x_i, c.channels, c.bb_count, c.param_mem_bytes)
    out += struct.pack("<BB", pack_format(p.input_format), p.input_format.width)
    out += struct.pack("<I", len(p.instructions))
    cuts = set(p.sub_model_boundaries)
    for idx, ins in enumerate(p.instructions):
        b0 = (OPCODES.index(ins.opcode)
              | (ins.leaf_modules - 1) << 2
              | INFER_TYPES.index(ins.infer_type) << 4
              | (POOL_MODES.index(ins.pool) if ins.pool else 0) << 5
              | (ins.srcS is not None) << 6
              | (ins.dstS is not None) << 7)
        flags = (ins.out_tiles[0]
                 | ins.out_tiles[1] << 6
                 | (ins.qs is not None) << 13
                 | (ins.qw is not None and ins.qw.width == 7) << 14
                 | (idx in cuts) << 15)
        record = struct.pack(
            "<BHHHHHH", b0, flags,
            _pack_ref(ins.src), _pack_ref(ins.dst),
            _pack_ref(ins.srcS), _pack_ref(ins.dstS),
            ins.param if ins.param is not None else 0)
        fmts = (pack_format(ins.qw) if ins.qw else 0,
                pack_format(ins.qb) if ins.qb else 0,
                pack_format(ins.qo),
                pack_format(ins.qs) if ins.qs else 0)
        packed = fmts[0] | fmts[1] << 6 | fmts[2] << 12 | fmts[3] << 18
        record += struct.pack("<I", packed)[:3]
        assert len(record) == RECORD_BYTES
        out += record
    return bytes(out)


def program_from_bytes(data: bytes) -> Program:
    if data[:6] != MAGIC:
        raise ValueError("not a program file")
    (version,) = struct.unpack_from("<H", data, 6)
    if version != VERSION:
        raise ValueError(f"unsupported program version {version}")
    x_i, channels, bb_count, pmem = struct.unpack_from("<HHHI", data, 8)
    config = MachineConfig(x_i, channels, bb_count, pmem)
    in_bits, in_width = struct.unpack_from("<BB", data, 18)
    input_format = unpack_format(in_bits, in_width)
    (count,) = struct.unpack_from("<I", data, 20)
    pos = 24
    if len(data) < pos + count * RECORD_BYTES:
        raise ValueError("truncated program file")
    instructions = []
    boundaries = []
    for idx in range(count):
        b0, flags, src, dst, srcs, dsts, param = struct.unpack_from(
            "<BHHHHHH", data, pos)
        (packed,) = struct.unpack("<I", data[pos + 13:pos + 16] + b"\x00")
        pos += RECORD_BYTES
        opcode = OPCODES[b0 & 3]
        has_srcs = bool(b0 & 0x40)
        has_dsts = bool(b0 & 0x80)
        if flags & 1 << 15 and idx:
            boundaries.append(idx)
        qw_width = 7 if flags & 1 << 14 else 8
        dnx2 = opcode == "DNX2"
        instructions.append(Instruction(
            opcode=opcode,
            out_tiles=(flags & 63, (flags >> 6) & 127),
            leaf_modules=((b0 >> 2) & 3) + 1,
            infer_type=INFER_TYPES[(b0 >> 4) & 1],
            pool=POOL_MODES[(b0 >> 5) & 1] if dnx2 else None,
            src=_unpack_ref(src),
            dst=_unpack_ref(dst),
            srcS=_unpack_ref(srcs) if has_srcs else None,
            dstS=_unpack_ref(dsts) if has_dsts else None,
            param=None if dnx2 else param,
            qw=None if dnx2 else unpack_format(packed & 63, qw_width),
            qb=None if dnx2 else unpack_format((packed >> 6) & 63),
            qo=unpack_format((packed >> 12) & 63),
            qs=unpack_format((packed >> 18) & 63) if flags & 1 << 13 else None,
        ))
    return Program(tuple(instructions), tuple(boundaries), config, input_format)


def save_program(path: str | Path, p: Program) -> None:
    Path(path).write_bytes(program_to_bytes(p))


def load_program(path: str | Path) -> Program:
    return program_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# model compilation

@dataclass(frozen=True)
class ParamEntry:
    """Where one instruction's parameters live and what its leaves are."""
    instruction_index: int
    layer_index: int
    kind: str                 # "conv" | "er" | "upx2"
    out_group: int
    n_leaves: int
    restart_addr: int


@dataclass(frozen=True)
class ParamLayout:
    entries: tuple[ParamEntry, ...]


def default_qmap(m: ModelIR) -> dict[int, dict[str, QFormat]]:
    """Fallback per-layer formats when no calibrated plan is supplied."""
    units = modelir.compute_units(m)
    final_unit = units[-1]
    qmap: dict[int, dict[str, QFormat]] = {}
    for i, layer in enumerate(m.layers):
        if layer.kind not in (CONV3, ER):
            continue
        formats = {"qw": QFormat(True, 6), "qb": QFormat(True, 8)}
        if i in final_unit.layer_indices:
            formats["qo"] = UQ8
        elif layer.kind == ER or layer.activation != "relu":
            formats["qo"] = QFormat(True, 4)
        else:
            formats["qo"] = QFormat(False, 4)
        if layer.kind == ER:
            formats["qs"] = QFormat(False, 4)
        qmap[i] = formats
    return qmap


def _zero_weights(layer) -> dict[str, np.ndarray]:
    return {key: np.zeros(shape)
            for key, shape in modelir.weight_shapes(layer).items()}


def _upx2_lane_layout(q3: np.ndarray, qbias: np.ndarray,
                      lm: int) -> tuple[np.ndarray, np.ndarray]:
    """Rearrange shuffle-feeding rows into fixed per-phase lane ranges.

    Real output row g*C + c (phase g of C post-shuffle channels) moves
    to lane g*8*lm + c, so the write path can split lanes into four
    equal phase ranges without knowing the real channel count.
    """
    out_ch = q3.shape[0]
    c_post = out_ch // 4
    lanes = np.zeros((LANES * lm,) + q3.shape[1:], dtype=q3.dtype)
    bias = np.zeros(LANES * lm, dtype=qbias.dtype)
    for g in range(4):
        rows = slice(g * c_post, (g + 1) * c_post)
        lane0 = g * 8 * lm
        lanes[lane0:lane0 + c_post] = q3[rows]
        bias[lane0:lane0 + c_post] = qbias[rows]
    return lanes, bias


def _pad_block(w: np.ndarray, rows: slice, cols: slice) -> np.ndarray:
    block = w[rows, cols]
    out = np.zeros((LANES, LANES) + w.shape[2:], dtype=w.dtype)
    out[:block.shape[0], :block.shape[1]] = block
    return out


def layer_segment(m: ModelIR, layer_index: int, kind: str, out_group: int,
                  n_leaves: int, weights: dict | None,
                  qmap: dict[int, dict[str, QFormat]]) -> list[paramcodec.LeafParams]:
    """Quantized leaf-module parameters for one instruction."""
    layer = m.layers[layer_index]
    arrays = weights[layer_index] if weights else _zero_weights(layer)
    fmts = qmap[layer_index]
    if kind == "er":
        q3 = quantize_array(arrays["w3"], fmts["qw"])
        q1 = quantize_array(arrays["w1"], fmts["qw"])
        b3 = quantize_array(arrays["b3"], fmts["qb"])
        b1 = quantize_array(arrays["b1"], fmts["qb"])
        leaves = []
        for r in range(n_leaves):
            rows = slice(r * LANES, (r + 1) * LANES)
            bias = np.concatenate([b3[rows], b1]) if r == 0 else b3[rows]
            leaves.append(paramcodec.LeafParams(
                q3[rows], bias, np.ascontiguousarray(q1[:, rows])))
        return leaves
    q = quantize_array(arrays["w"], fmts["qw"])
    b = quantize_array(arrays["b"], fmts["qb"])
    if kind == "upx2":
        lanes, lane_bias = _upx2_lane_layout(q, b, n_leaves)
        leaves = []
        for k in range(n_leaves):
            rows = slice(k * LANES, (k + 1) * LANES)
            leaves.append(paramcodec.LeafParams(
                _pad_block(lanes, rows, slice(0, LANES)), lane_bias[rows]))
        return leaves
    rows = slice(out_group * LANES, (out_group + 1) * LANES)
    leaves = []
    for k in range(n_leaves):
        cols = slice(k * LANES, (k + 1) * LANES)
        bias = np.zeros(LANES, dtype=b.dtype)
        if k == 0:
            real = b[rows]
            bias[:real.size] = real
        leaves.append(paramcodec.LeafParams(_pad_block(q, rows, cols), bias))
    return leaves


def _tiles(extent: tuple[int, int]) -> tuple[int, int]:
    return (math.ceil(extent[0] / TILE_W), math.ceil(extent[1] / TILE_H))


def compile_model(m: ModelIR, plan: BlockPlan,
                  qmap: dict[int, dict[str, QFormat]] | None = None,
                  weights: dict | None = None) -> tuple[Program, ParamLayout]:
    """Lower a model to instructions over the block geometry of plan.

    One instruction per 32-channel output group of each unit, leaves
    bundling input groups (CONV), expand stages (ER) or shuffle phases
    (UPX2).  Block buffers are assigned by a linear scan with residual
    sources pinned until consumed.  Restart addresses come from
    entropy-coding the quantized weights (zeros when none are given),
    so the returned program and encode_parameters() agree.
    """
    config = MachineConfig()
    units = modelir.compute_units(m)
    qmap = qmap if qmap is not None else default_qmap(m)
    real_units = [u for u in units if u.kind != "input_pack"]
    unit_of_layer = {l: u for u, unit in enumerate(real_units)
                     for l in unit.layer_indices}

    # last unit whose instructions read each unit's output surface
    last_use: dict[int, int] = {}
    for ui, unit in enumerate(real_units):
        if ui > 0:
            last_use[ui - 1] = ui
        for src_layer in unit.skip_sources:
            su = unit_of_layer[src_layer]
            last_use[su] = max(last_use.get(su, su), ui)

    free = list(range(config.bb_count))
    planes: dict[int, list[int]] = {}
    proto: list[dict] = []
    pre_entries: list[tuple[int, int, str, int, int]] = []
    segments: list[list[paramcodec.LeafParams]] = []

    def alloc(n: int, ui: int) -> list[int]:
        if len(free) < n:
            raise CompileError(
                f"unit {ui} needs {n} fresh feature planes with "
                f"{len(free)} of {config.bb_count} block buffers free")
        if n > 1:
            free.sort()
            run = [free[0]]
            for bank in free[1:]:
                run = run + [bank] if bank == run[-1] + 1 else [bank]
                if len(run) == n:
                    break
            if len(run) < n:
                raise CompileError(
                    f"unit {ui} needs {n} consecutive planes, free set {free}")
            got = run
        else:
            got = [free[0]]
        for bank in got:
            free.remove(bank)
        return got

    for ui, unit in enumerate(real_units):
        layer_index = unit.main_layer
        layer = m.layers[layer_index]
        fmts = qmap[layer_index]
        tiles = _tiles(plan.extents[layer_index])
        is_last = ui == len(real_units) - 1
        src_planes = planes.get(ui - 1, [BUFFERS.index("DI")])
        src = BufferRef(BUFFERS[src_planes[0]])
        skip_ref = None
        if unit.skip_sources:
            skip_unit = unit_of_layer[unit.skip_sources[0]]
            skip_ref = BufferRef(BUFFERS[planes[skip_unit][0]])

        if unit.kind == "er":
            lm = layer.expand_ratio
            out_groups = 1
            kind = "er"
        elif unit.kind == "upx2":
            lm = modelir.padded(layer.out_ch) // LANES
            out_groups = 1
            kind = "upx2"
        else:
            lm = modelir.padded(layer.in_ch) // LANES
            if lm > MAX_LEAVES:
                raise CompileError(
                    f"layer {layer_index} reads {layer.in_ch} channels; "
                    f"chaining past {MAX_LEAVES * LANES} is not supported")
            out_groups = modelir.padded(layer.out_ch) // LANES
            kind = "conv"
        if src.name == "DI" and (out_groups > 1 or
                                 (kind == "conv" and lm > 1)):
            raise CompileError(
                f"layer {layer_index} would stream DI more than once")

        if is_last:
            if out_groups > 1:
                raise CompileError(
                    f"layer {layer_index} writes {layer.out_ch} channels to "
                    "the output stream; DO takes a single instruction")
            dst_planes = [BUFFERS.index("DO")]
        else:
            dst_planes = alloc(out_groups, ui)
            planes[ui] = dst_planes

        opcode = {"er": "ER", "upx2": "UPX2", "conv": "CONV"}[kind]
        for og in range(out_groups):
            proto.append({
                "opcode": opcode,
                "out_tiles": tiles,
                "leaf_modules": lm,
                "src": src,
                "dst": BufferRef(BUFFERS[dst_planes[og]]),
                "srcS": skip_ref if og == 0 else None,
                "qw": fmts["qw"],
                "qb": fmts["qb"],
                "qo": fmts["qo"],
                "qs": fmts.get("qs"),
            })
            pre_entries.append((len(proto) - 1, layer_index, kind, og, lm))
            segments.append(layer_segment(m, layer_index, kind, og, lm,
                                          weights, qmap))
        for su, lu in last_use.items():
            if lu == ui and su in planes:
                for bank in planes.pop(su):
                    free.append(bank)

    container = paramcodec.encode_container(
        segments, param_mem_bytes=config.param_mem_bytes)
    instructions = []
    entries = []
    for (idx, layer_index, kind, og, lm), info, fields in zip(
            pre_entries, container.directory, proto):
        instructions.append(Instruction(param=info.bias_addr, **fields))
        entries.append(ParamEntry(idx, layer_index, kind, og, lm,
                                  info.bias_addr))
    program = Program(tuple(instructions), (), config, UQ8)
    return program, ParamLayout(tuple(entries))


def encode_parameters(m: ModelIR, layout: ParamLayout, weights: dict | None,
                      qmap: dict[int, dict[str, QFormat]] | None = None
                      ) -> paramcodec.ParamContainer:
    """Entropy-code a model's quantized parameters per a compiled layout."""
    qmap = qmap if qmap is not None else default_qmap(m)
    segments = [layer_segment(m, e.layer_index, e.kind, e.out_group,
                              e.n_leaves, weights, qmap)
                for e in layout.entries]
    container = paramcodec.encode_container(segments)
    for entry, info in zip(layout.entries, container.directory):
        if info.bias_addr != entry.restart_addr:
            raise CompileError(
                f"instruction {entry.instruction_index}: restart address "
                f"{info.bias_addr} drifted from compiled {entry.restart_addr}")
    return container
