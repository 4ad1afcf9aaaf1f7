"""Entropy-coded parameter container.

Quantized parameters travel in 21 parallel bitstreams so 21 decoders
can reconstruct one leaf-module together: 18 carry 3x3 weights (one
stream per filter position and output-channel half, 512 coefficients
per leaf-module), 2 carry the optional 1x1 stage the same way, and 1
carries biases.  Coding is the DC scheme of baseline JPEG: a canonical
Huffman code over magnitude categories (the bit length of the value)
followed by that many raw value bits, one's-complement style for
negatives, most significant bit first.  No differential prediction.

Streams are cut into restart segments, one per instruction.  Every
segment starts with its own Huffman table and is padded so that each
weight stream sits at exactly 8 times the bias stream's byte offset;
the bias offset is the restart attribute instructions carry.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LEAF_CH = 32
HALF_CH = 16
N_STREAMS = 21
BIAS_STREAM = 20
W1_STREAMS = (18, 19)
SYMBOLS_PER_LEAF = 512          # per weight stream
CATEGORY_MAX = 8
MAX_CODE_LEN = 16
DECODE_RATE = 2                 # weights per stream per cycle
DECODE_CYCLES_PER_LEAF = SYMBOLS_PER_LEAF // DECODE_RATE
PARAM_MEM_BYTES = 1288 * 1024

_BITLEN = np.array([int(v).bit_length() for v in range(256)], dtype=np.int64)


class ParamMemoryError(ValueError):
    """Raised when an encoded container exceeds the parameter memory."""

    def __init__(self, total: int, limit: int):
        super().__init__(f"parameter container needs {total} bytes, "
                         f"memory holds {limit} (overflow {total - limit})")
        self.total = total
        self.limit = limit
        self.overflow = total - limit


class DecodeError(ValueError):
    pass


def categories_of(values: np.ndarray) -> np.ndarray:
    """JPEG DC magnitude category: bit length of |v|, 0 for zero."""
    mag = np.abs(np.asarray(values, dtype=np.int64))
    if mag.size and mag.max() > 255:
        raise ValueError("parameter magnitude exceeds 8-bit range")
    return _BITLEN[mag]


# ---------------------------------------------------------------------------
# canonical Huffman tables

@dataclass(frozen=True)
class HuffTable:
    lengths: tuple[int, ...]     # code length per category, 0 if absent

    def assignments(self) -> list[tuple[int, int, int]]:
        """(symbol, code, length) in canonical order."""
        order = sorted((l, s) for s, l in enumerate(self.lengths) if l)
        out = []
        code = 0
        prev_len = 0
        for length, sym in order:
            code <<= length - prev_len
            out.append((sym, code, length))
            code += 1
            prev_len = length
        return out

    def encode_maps(self) -> tuple[np.ndarray, np.ndarray]:
        codes = np.zeros(CATEGORY_MAX + 1, dtype=np.uint64)
        lens = np.zeros(CATEGORY_MAX + 1, dtype=np.int64)
        for sym, code, length in self.assignments():
            codes[sym] = code
            lens[sym] = length
        return codes, lens

    def lookup(self) -> tuple[list[int], list[int], int]:
        """Flat prefix table over peek_width bits: symbol and length lists."""
        assign = self.assignments()
        peek = max(l for _, _, l in assign)
        size = 1 << peek
        syms = [-1] * size
        lens = [0] * size
        for sym, code, length in assign:
            lo = code << (peek - length)
            hi = lo + (1 << (peek - length))
            for i in range(lo, hi):
                syms[i] = sym
                lens[i] = length
        return syms, lens, peek


def build_table(histogram: dict[int, int]) -> HuffTable:
    """Optimal prefix code over magnitude categories, canonicalized.

    A single-symbol alphabet still spends one bit per symbol so the
    stream remains self-delimiting.
    """
    items = [(c, s) for s, c in sorted(histogram.items()) if c > 0]
    if not items:
        raise ValueError("empty histogram")
    if any(not 0 <= s <= CATEGORY_MAX for _, s in items):
        raise ValueError("category outside 0..8")
    if len(items) == 1:
        lengths = {items[0][1]: 1}
    else:
        heap = [(count, idx, {sym: 0}) for idx, (count, sym) in enumerate(items)]
        heapq.heapify(heap)
        nxt = len(heap)
        while len(heap) > 1:
            ca, _, da = heapq.heappop(heap)
            cb, _, db = heapq.heappop(heap)
            merged = {s: l + 1 for s, l in da.items()}
            merged.update({s: l + 1 for s, l in db.items()})
            heapq.heappush(heap, (ca + cb, nxt, merged))
            nxt += 1
        lengths = heap[0][2]
    full = [0] * (CATEGORY_MAX + 1)
    for sym, length in lengths.items():
        full[sym] = length
    return HuffTable(tuple(full))


def serialize_table(table: HuffTable) -> bytes:
    counts = [0] * MAX_CODE_LEN
    symbols = []
    for sym, _, length in table.assignments():
        counts[length - 1] += 1
        symbols.append(sym)
    return bytes(counts) + bytes(symbols)


def parse_table(data: bytes, pos: int) -> tuple[HuffTable, int]:
    if pos + MAX_CODE_LEN > len(data):
        raise DecodeError("truncated Huffman table")
    counts = data[pos:pos + MAX_CODE_LEN]
    n = sum(counts)
    pos += MAX_CODE_LEN
    if pos + n > len(data):
        raise DecodeError("truncated Huffman symbol list")
    symbols = data[pos:pos + n]
    pos += n
    lengths = [0] * (CATEGORY_MAX + 1)
    it = iter(symbols)
    for length_minus_1, count in enumerate(counts):
        for _ in range(count):
            sym = next(it)
            if sym > CATEGORY_MAX:
                raise DecodeError(f"category {sym} outside 0..8")
            lengths[sym] = length_minus_1 + 1
    if not any(lengths):
        raise DecodeError("empty Huffman table")
    return HuffTable(tuple(lengths)), pos


# ---------------------------------------------------------------------------
# bit packing

def pack_bits(values: np.ndarray, lengths: np.ndarray) -> bytes:
    """MSB-first concatenation of variable-width fields, zero-pad to bytes."""
    lengths = np.asarray(lengths, dtype=np.int64)
    values = np.asarray(values, dtype=np.uint64)
    total = int(lengths.sum())
    if total == 0:
        return b""
    reps = np.repeat(np.arange(values.size), lengths)
    ends = np.cumsum(lengths)
    starts = ends - lengths
    within = np.arange(total) - np.repeat(starts, lengths)
    shift = (np.repeat(lengths, lengths) - 1 - within).astype(np.uint64)
    bits = ((values[reps] >> shift) & 1).astype(np.uint8)
    return np.packbits(bits).tobytes()


def _encode_symbols(values: np.ndarray, table: HuffTable) -> bytes:
    cats = categories_of(values)
    codes, lens = table.encode_maps()
    if (lens[cats] == 0).any():
        raise ValueError("table missing a category present in the data")
    vals = np.asarray(values, dtype=np.int64)
    offset = np.left_shift(np.int64(1), cats) - 1
    value_bits = np.where(vals < 0, vals + offset, vals).astype(np.uint64)
    inter_vals = np.empty(2 * vals.size, dtype=np.uint64)
    inter_lens = np.empty(2 * vals.size, dtype=np.int64)
    inter_vals[0::2] = codes[cats]
    inter_lens[0::2] = lens[cats]
    inter_vals[1::2] = value_bits
    inter_lens[1::2] = cats
    return pack_bits(inter_vals, inter_lens)


def _decode_symbols(data: bytes, pos: int, table: HuffTable, n: int) -> np.ndarray:
    """Sequential Huffman + value-bit decode of n symbols from byte pos.

    The accumulator may peek a few zero bytes past the end, since the
    final code can be shorter than the peek width; anything deeper
    means the stream was truncated.
    """
    syms, code_lens, peek = table.lookup()
    out = np.empty(n, dtype=np.int64)
    acc = 0
    nacc = 0
    i = pos
    end = len(data)
    overrun = 0
    for k in range(n):
        while nacc < peek:
            if i < end:
                acc = (acc << 8) | data[i]
            else:
                acc <<= 8
                overrun += 1
                if overrun > 4:
                    raise DecodeError(f"stream exhausted at symbol {k}")
            i += 1
            nacc += 8
        idx = (acc >> (nacc - peek)) & ((1 << peek) - 1)
        cat = syms[idx]
        if cat < 0:
            raise DecodeError(f"invalid code prefix at symbol {k}")
        nacc -= code_lens[idx]
        if cat:
            while nacc < cat:
                if i < end:
                    acc = (acc << 8) | data[i]
                else:
                    acc <<= 8
                    overrun += 1
                    if overrun > 4:
                        raise DecodeError(f"stream exhausted at symbol {k}")
                i += 1
                nacc += 8
            v = (acc >> (nacc - cat)) & ((1 << cat) - 1)
            nacc -= cat
            out[k] = v if v >= (1 << (cat - 1)) else v - ((1 << cat) - 1)
        else:
            out[k] = 0
        acc &= (1 << nacc) - 1
    return out


# ---------------------------------------------------------------------------
# leaf-module parameter layout

@dataclass(frozen=True)
class LeafParams:
    """Quantized integer parameters of one leaf-module.

    ``w3`` is (32 out, 32 in, 3, 3).  ``w1`` is (32 out, 32 in) for ER
    leaf-modules, None otherwise.  ``bias`` length follows the segment
    rule: with a 1x1 stage the first leaf carries 64 (3x3 set plus 1x1
    set) and later leaves 32; without one, either the first leaf alone
    carries 32 (leaves iterate input groups sharing one output bias
    set) or every leaf carries 32 (leaves iterate output groups, the
    pixel-shuffle case).
    """
    w3: np.ndarray
    bias: np.ndarray
    w1: np.ndarray | None = None


@dataclass(frozen=True)
class SegmentInfo:
    bias_addr: int
    n_leaves: int
    has_1x1: bool
    per_leaf_bias: bool = False


@dataclass(frozen=True)
class ParamContainer:
    streams: tuple[bytes, ...]
    directory: tuple[SegmentInfo, ...]

    @property
    def total_bytes(self) -> int:
        return sum(len(s) for s in self.streams)

    def segment_index(self, restart_attr: int) -> int:
        for i, info in enumerate(self.directory):
            if info.bias_addr == restart_attr:
                return i
        raise KeyError(f"no restart segment at bias address {restart_attr}")


def expected_bias_len(has_1x1: bool, leaf: int, per_leaf_bias: bool = False) -> int:
    if has_1x1:
        return 2 * LEAF_CH if leaf == 0 else LEAF_CH
    if per_leaf_bias:
        return LEAF_CH
    return LEAF_CH if leaf == 0 else 0


def _leaf_stream_symbols(leaf: LeafParams) -> list[np.ndarray]:
    """Symbols each of the 21 streams contributes for one leaf-module."""
    if leaf.w3.shape != (LEAF_CH, LEAF_CH, 3, 3):
        raise ValueError(f"3x3 weights must be (32,32,3,3), got {leaf.w3.shape}")
    per_stream: list[np.ndarray] = []
    for p in range(9):
        plane = leaf.w3[:, :, p // 3, p % 3]
        for half in range(2):
            per_stream.append(
                plane[half * HALF_CH:(half + 1) * HALF_CH].reshape(-1))
    for half in range(2):
        if leaf.w1 is None:
            per_stream.append(np.empty(0, dtype=np.int64))
        else:
            if leaf.w1.shape != (LEAF_CH, LEAF_CH):
                raise ValueError(f"1x1 weights must be (32,32), got {leaf.w1.shape}")
            per_stream.append(
                leaf.w1[half * HALF_CH:(half + 1) * HALF_CH].reshape(-1))
    per_stream.append(np.asarray(leaf.bias, dtype=np.int64).reshape(-1))
    return per_stream


def encode_container(segments: list[list[LeafParams]],
                     param_mem_bytes: int | None = PARAM_MEM_BYTES) -> ParamContainer:
    """Encode one restart segment per instruction's leaf-module list."""
    stream_parts: list[list[bytes]] = [[] for _ in range(N_STREAMS)]
    directory: list[SegmentInfo] = []
    bias_addr = 0
    for leaves in segments:
        if not 1 <= len(leaves) <= 4:
            raise ValueError("a segment holds 1..4 leaf-modules")
        has_1x1 = leaves[0].w1 is not None
        per_leaf = (not has_1x1 and len(leaves) > 1
                    and all(len(l.bias) == LEAF_CH for l in leaves))
        for k, leaf in enumerate(leaves):
            if (leaf.w1 is not None) != has_1x1:
                raise ValueError("mixed 1x1 presence within a segment")
            want = expected_bias_len(has_1x1, k, per_leaf)
            if len(leaf.bias) != want:
                raise ValueError(f"leaf {k} bias length {len(leaf.bias)}, "
                                 f"expected {want}")
        leaf_syms = [_leaf_stream_symbols(l) for l in leaves]
        per_stream = [np.concatenate([ls[s] for ls in leaf_syms])
                      for s in range(N_STREAMS)]
        coded: list[bytes] = []
        for s in range(N_STREAMS):
            symbols = per_stream[s]
            if symbols.size == 0:
                coded.append(b"")
                continue
            counts = np.bincount(categories_of(symbols), minlength=CATEGORY_MAX + 1)
            hist = {int(c): int(n) for c, n in enumerate(counts) if n}
            table = build_table(hist)
            coded.append(serialize_table(table) + _encode_symbols(symbols, table))
        seg_len = max(len(coded[BIAS_STREAM]),
                      max(math.ceil(len(coded[s]) / 8) for s in range(N_STREAMS - 1)))
        for s in range(N_STREAMS):
            cap = seg_len if s == BIAS_STREAM else 8 * seg_len
            stream_parts[s].append(coded[s] + b"\x00" * (cap - len(coded[s])))
        directory.append(SegmentInfo(bias_addr, len(leaves), has_1x1, per_leaf))
        bias_addr += seg_len
    streams = tuple(b"".join(parts) for parts in stream_parts)
    container = ParamContainer(streams, tuple(directory))
    if param_mem_bytes is not None and container.total_bytes > param_mem_bytes:
        raise ParamMemoryError(container.total_bytes, param_mem_bytes)
    return container


def decode_segment(c: ParamContainer, seg_index: int) -> list[LeafParams]:
    """Decode every leaf-module of one restart segment."""
    if not 0 <= seg_index < len(c.directory):
        raise DecodeError(f"segment {seg_index} outside directory")
    info = c.directory[seg_index]
    n = info.n_leaves
    w3_parts = []
    for s in range(18):
        table, pos = parse_table(c.streams[s], 8 * info.bias_addr)
        w3_parts.append(_decode_symbols(c.streams[s], pos, table,
                                        n * SYMBOLS_PER_LEAF))
    w1_parts = []
    if info.has_1x1:
        for s in W1_STREAMS:
            table, pos = parse_table(c.streams[s], 8 * info.bias_addr)
            w1_parts.append(_decode_symbols(c.streams[s], pos, table,
                                            n * SYMBOLS_PER_LEAF))
    n_bias = sum(expected_bias_len(info.has_1x1, k, info.per_leaf_bias)
                 for k in range(n))
    table, pos = parse_table(c.streams[BIAS_STREAM], info.bias_addr)
    bias_all = _decode_symbols(c.streams[BIAS_STREAM], pos, table, n_bias)
    leaves = []
    bias_pos = 0
    for k in range(n):
        w3 = np.zeros((LEAF_CH, LEAF_CH, 3, 3), dtype=np.int64)
        for p in range(9):
            for half in range(2):
                chunk = w3_parts[2 * p + half][k * SYMBOLS_PER_LEAF:
                                               (k + 1) * SYMBOLS_PER_LEAF]
                w3[half * HALF_CH:(half + 1) * HALF_CH, :, p // 3, p % 3] = \
                    chunk.reshape(HALF_CH, LEAF_CH)
        w1 = None
        if info.has_1x1:
            w1 = np.zeros((LEAF_CH, LEAF_CH), dtype=np.int64)
            for half in range(2):
                chunk = w1_parts[half][k * SYMBOLS_PER_LEAF:(k + 1) * SYMBOLS_PER_LEAF]
                w1[half * HALF_CH:(half + 1) * HALF_CH] = chunk.reshape(HALF_CH, LEAF_CH)
        want = expected_bias_len(info.has_1x1, k, info.per_leaf_bias)
        bias = bias_all[bias_pos:bias_pos + want]
        bias_pos += want
        leaves.append(LeafParams(w3, bias, w1))
    return leaves


def decode_leaf_module(c: ParamContainer, restart_attr: int,
                       leaf_index: int) -> LeafParams:
    seg = c.segment_index(restart_attr)
    leaves = decode_segment(c, seg)
    if not 0 <= leaf_index < len(leaves):
        raise DecodeError(f"leaf {leaf_index} outside segment of {len(leaves)}")
    return leaves[leaf_index]


def segment_decode_cycles(info: SegmentInfo) -> int:
    """21 decoders at 2 weights per stream per cycle: 256 cycles a leaf."""
    return DECODE_CYCLES_PER_LEAF * info.n_leaves


# ---------------------------------------------------------------------------
# container file io

_MAGIC = b"FBPC"
_VERSION = 1


def save_container(path: str | Path, c: ParamContainer) -> None:
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<HH", _VERSION, len(c.directory))
    for info in c.directory:
        flags = (1 if info.has_1x1 else 0) | (2 if info.per_leaf_bias else 0)
        out += struct.pack("<IBBH", info.bias_addr, info.n_leaves, flags, 0)
    out += struct.pack("<B", N_STREAMS)
    for s in c.streams:
        out += struct.pack("<I", len(s))
        out += s
    Path(path).write_bytes(bytes(out))


def load_container(path: str | Path) -> ParamContainer:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError("not a parameter container")
    version, n_seg = struct.unpack_from("<HH", data, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported container version {version}")
    pos = 8
    directory = []
    for _ in range(n_seg):
        addr, n_leaves, flags, _ = struct.unpack_from("<IBBH", data, pos)
        directory.append(SegmentInfo(addr, n_leaves, bool(flags & 1),
                                     bool(flags & 2)))
        pos += 8
    (count,) = struct.unpack_from("<B", data, pos)
    pos += 1
    if count != N_STREAMS:
        raise ValueError(f"expected {N_STREAMS} streams, found {count}")
    streams = []
    for _ in range(count):
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        streams.append(data[pos:pos + length])
        pos += length
    return ParamContainer(tuple(streams), tuple(directory))


# ---------------------------------------------------------------------------
# reporting

@dataclass(frozen=True)
class CodecReport:
    raw_bytes: int
    coded_bytes: int
    ratio: float
    segment_entropy_bits: tuple[float, ...]       # Shannon, category symbols
    segment_mean_code_bits: tuple[float, ...]     # actual Huffman lengths


def compression_report(c: ParamContainer) -> CodecReport:
    """Raw-vs-coded sizes plus per-segment entropy of the category symbols."""
    raw = 0
    entropies = []
    mean_codes = []
    for i, info in enumerate(c.directory):
        leaves = decode_segment(c, i)
        cats_all = []
        for leaf in leaves:
            raw += leaf.w3.size + len(leaf.bias)
            cats_all.append(categories_of(leaf.w3.reshape(-1)))
            cats_all.append(categories_of(leaf.bias))
            if leaf.w1 is not None:
                raw += leaf.w1.size
                cats_all.append(categories_of(leaf.w1.reshape(-1)))
        cats = np.concatenate(cats_all)
        counts = np.bincount(cats, minlength=CATEGORY_MAX + 1)
        p = counts[counts > 0] / cats.size
        entropies.append(float(-(p * np.log2(p)).sum()))
        hist = {int(s): int(n) for s, n in enumerate(counts) if n}
        table = build_table(hist)
        _, lens = table.encode_maps()
        mean_codes.append(float((counts * lens).sum() / cats.size))
    coded = c.total_bytes
    return CodecReport(raw, coded, raw / coded if coded else 0.0,
                       tuple(entropies), tuple(mean_codes))
