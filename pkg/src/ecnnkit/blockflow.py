"""Truncated-pyramid block geometry and DRAM traffic models.

A frame is processed as independent x_i by x_i input blocks.  Each 3x3
layer shrinks the valid region by two pixels at its own resolution
stratum, so neighbouring blocks overlap and the overlap is recomputed
instead of stored.  This module owns that geometry: analytic overhead
ratios (exact rationals under the hood), per-model block plans, and the
resulting DRAM byte counts.

Frame borders use replicate padding: every block is a full x_i by x_i
read with addresses clamped to the frame, so edge blocks touch fewer
distinct DRAM bytes than interior ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np

from ecnnkit import modelir
from ecnnkit.modelir import (CONV1, CONV3, ER, RESIDUAL, SHUFFLE_UP,
                             UNSHUFFLE_DOWN, ModelIR)

BLOCK_SIDE = 128     # feature block side the on-chip buffers can hold
EDGE_POLICY = "replicate-pad"


# ---------------------------------------------------------------------------
# analytic ratios for a plain depth-D stack of 3x3 layers

def nbr_plain(D, x_i: int) -> float:
    """Block DRAM traffic over output-frame traffic: 1 + 1/(1-2b)^2, b = D/x_i.

    The leading 1 is the output write; the second term is the
    overlapped input reads.
    """
    beta = Fraction(D) / x_i
    if 2 * beta >= 1:
        raise ValueError(f"depth {D} leaves no valid output at block size {x_i}")
    return float(1 + 1 / (1 - 2 * beta) ** 2)


def ncr_plain(D, x_i: int) -> float:
    """Truncated-pyramid compute over intrinsic compute for a plain model."""
    beta = Fraction(D) / x_i
    if 2 * beta >= 1:
        raise ValueError(f"depth {D} leaves no valid output at block size {x_i}")
    return float(Fraction(1, 3) + Fraction(2, 3) * (1 - beta) / (1 - 2 * beta) ** 2)


def recomputation_share(ncr: float) -> float:
    """Fraction of all compute spent on recomputed overlap, (NCR-1)/NCR."""
    return (ncr - 1.0) / ncr


def frame_bandwidth(H: int, W: int, C: int, D: int, fps: float, L_bits: int) -> float:
    """DRAM bytes/s of conventional frame-at-a-time inference.

    Every one of the D-1 intermediate feature maps (H x W x C values of
    L_bits each) is written once and read once per frame; input and
    output images are negligible and excluded.
    """
    return H * W * C * (D - 1) * fps * L_bits * 2 / 8


# ---------------------------------------------------------------------------
# per-model pyramid geometry

@dataclass(frozen=True)
class LayerTrace:
    index: int
    level: int       # resolution stratum of the layer output
    offset: int      # valid-region start relative to the scaled window origin
    extent: int      # valid width after this layer, own-stratum pixels


def trace_layers(m: ModelIR, x_i: int) -> tuple[LayerTrace, ...]:
    """Forward valid-region recursion through the model at block size x_i."""
    offset, extent, level = 0, x_i, 0
    traces = []
    for i, layer in enumerate(m.layers):
        if layer.kind in (CONV3, ER):
            offset += 1
            extent -= 2
        elif layer.kind == SHUFFLE_UP:
            offset *= 2
            extent *= 2
            level += 1
        elif layer.kind == UNSHUFFLE_DOWN:
            if offset % 2 or extent % 2:
                raise ValueError(f"layer {i}: unshuffle needs an even aligned extent")
            offset //= 2
            extent //= 2
            level -= 1
        if extent <= 0:
            raise ValueError(f"block size {x_i} leaves no valid pixels at layer {i}")
        traces.append(LayerTrace(i, level, offset, extent))
    return tuple(traces)


def _level_scale(level: int) -> Fraction:
    return Fraction(2) ** level


@dataclass(frozen=True)
class Pyramid:
    """Block-local geometry of one model at one block size."""
    x_i: int
    out_level: int
    x_o_nominal: int
    x_o: int
    crop: tuple[int, int]    # output pixels dropped left/top, right/bottom
    pad: int                 # input pixels the window extends left/top of its output
    step_in: int             # input-pixel stride between neighbouring blocks
    traces: tuple[LayerTrace, ...]

    def useful_extent(self, level: int) -> Fraction:
        return self.x_o * _level_scale(level - self.out_level)


def pyramid(m: ModelIR, x_i: int) -> Pyramid:
    """Resolve block geometry: valid extents, output alignment, stride.

    The output block side is the largest slice of the nominal valid
    region whose stride maps back to whole input pixels (whole even
    ones when the model packs its input 2x2), so a frame tiles exactly
    with integer block origins.  Stored intermediate planes must fit
    the on-chip block side; the final streamed stage is exempt.
    """
    if x_i < 3:
        raise ValueError("block size too small")
    if x_i > BLOCK_SIDE:
        raise ValueError(f"block size {x_i} exceeds buffer side {BLOCK_SIDE}")
    traces = trace_layers(m, x_i)
    units = modelir.compute_units(m)
    for unit in units[:-1]:
        if unit.kind == "input_pack":
            continue
        stored = traces[unit.layer_indices[-1]].extent
        if stored > BLOCK_SIDE:
            raise ValueError(
                f"stored plane after layer {unit.layer_indices[-1]} is "
                f"{stored} wide, exceeding the {BLOCK_SIDE} buffer side")
    last = traces[-1]
    scale = _level_scale(last.level)
    packs = m.layers[0].kind == UNSHUFFLE_DOWN
    align = 2 if packs else 1
    pad = align * math.ceil(Fraction(last.offset) / scale / align)
    crop_l = int(pad * scale) - last.offset
    modulus = max(1, int(scale * align))
    x_o = (last.extent - crop_l) // modulus * modulus
    if x_o <= 0:
        raise ValueError(f"block size {x_i} leaves no aligned output pixels")
    crop_r = last.extent - crop_l - x_o
    step_in = int(Fraction(x_o) / scale)
    return Pyramid(x_i, last.level, last.extent, x_o, (crop_l, crop_r),
                   pad, step_in, traces)


# ---------------------------------------------------------------------------
# frame plans

@dataclass(frozen=True)
class BlockPlan:
    model: ModelIR
    frame: tuple[int, int]           # input frame (W, H)
    x_i: int
    x_o: int
    x_o_nominal: int
    crop: tuple[int, int]
    pad: int
    step_in: int
    out_level: int
    grid: tuple[int, int]            # (rows, cols)
    extents: tuple[tuple[int, int], ...]   # per-layer valid (w, h)
    edge_policy: str = EDGE_POLICY

    @property
    def out_frame(self) -> tuple[int, int]:
        s = _level_scale(self.out_level)
        return (int(self.frame[0] * s), int(self.frame[1] * s))

    @property
    def n_blocks(self) -> int:
        return self.grid[0] * self.grid[1]

    def block_origin(self, row: int, col: int) -> tuple[int, int]:
        """Top-left input coordinate of the block's x_i window (may be < 0)."""
        return (col * self.step_in - self.pad, row * self.step_in - self.pad)

    def out_region(self, row: int, col: int) -> tuple[int, int, int, int]:
        """Output-frame rectangle (x0, y0, x1, y1) this block must produce."""
        ow, oh = self.out_frame
        x0, y0 = col * self.x_o, row * self.x_o
        return (x0, y0, min(x0 + self.x_o, ow), min(y0 + self.x_o, oh))


def plan_blocks(m: ModelIR, frame: tuple[int, int], x_i: int) -> BlockPlan:
    """Tile a frame into truncated-pyramid blocks covering every output pixel."""
    W, H = frame
    if W < 1 or H < 1:
        raise ValueError("empty frame")
    geo = pyramid(m, x_i)
    scale = _level_scale(geo.out_level)
    if geo.out_level < 0 and (W % 2 or H % 2):
        raise ValueError("packing model needs even frame dimensions")
    out_w, out_h = int(W * scale), int(H * scale)
    cols = math.ceil(out_w / geo.x_o)
    rows = math.ceil(out_h / geo.x_o)
    extents = tuple((t.extent, t.extent) for t in geo.traces)
    return BlockPlan(m, (W, H), x_i, geo.x_o, geo.x_o_nominal, geo.crop,
                     geo.pad, geo.step_in, geo.out_level, (rows, cols), extents)


def _clamped_spans(n: int, step: int, pad: int, x_i: int, frame_len: int) -> np.ndarray:
    """In-frame width of each block's input window along one axis."""
    starts = np.arange(n) * step - pad
    ends = starts + x_i
    return np.clip(ends, 0, frame_len) - np.clip(starts, 0, frame_len)


@dataclass(frozen=True)
class BandwidthReport:
    input_bytes_per_frame: int
    output_bytes_per_frame: int
    nbr: float
    gb_per_s: float

    @property
    def total_bytes_per_frame(self) -> int:
        return self.input_bytes_per_frame + self.output_bytes_per_frame


def block_bandwidth(plan: BlockPlan, fps: float, bytes_per_pixel_in: float = 3,
                    bytes_per_pixel_out: float = 3) -> BandwidthReport:
    """Actual DRAM traffic of a plan: clamped block reads plus frame writes.

    The normalized ratio divides total traffic by the output-frame
    traffic, which for equal-resolution models makes the interior-block
    value match the analytic plain-model formula.
    """
    rows, cols = plan.grid
    W, H = plan.frame
    widths = _clamped_spans(cols, plan.step_in, plan.pad, plan.x_i, W)
    heights = _clamped_spans(rows, plan.step_in, plan.pad, plan.x_i, H)
    read_px = int(widths.sum(dtype=np.int64) * heights.sum(dtype=np.int64))
    out_w, out_h = plan.out_frame
    in_bytes = int(round(read_px * bytes_per_pixel_in))
    out_bytes = int(round(out_w * out_h * bytes_per_pixel_out))
    total = in_bytes + out_bytes
    return BandwidthReport(in_bytes, out_bytes, total / out_bytes,
                           total * fps / 1e9)


# ---------------------------------------------------------------------------
# discrete compute ratio

def ncr_discrete(m: ModelIR, x_i: int, count_mode: str = "hardware") -> float:
    """Computed over useful operations, ops-weighted across layers and strata.

    Each layer computes its full valid extent every block, but only the
    pixels feeding the aligned x_o output are useful; the ratio of the
    two operation sums is the block-inference compute overhead.
    """
    geo = pyramid(m, x_i)
    num = Fraction(0)
    den = Fraction(0)
    for layer, t in zip(m.layers, geo.traces):
        ops = modelir.layer_ops_per_pixel(layer, count_mode)
        if not ops:
            continue
        num += ops * Fraction(t.extent) ** 2
        den += ops * geo.useful_extent(t.level) ** 2
    if den == 0:
        raise ValueError("model has no counted operations")
    return float(num / den)


# ---------------------------------------------------------------------------
# stitching

def stitch(blocks: dict[tuple[int, int], np.ndarray], plan: BlockPlan) -> np.ndarray:
    """Assemble cropped per-block outputs into the full output frame.

    ``blocks`` maps (row, col) to the block's nominal valid output
    (channels, x_o_nominal, x_o_nominal); alignment crop and frame clip
    are applied here.  Every grid position must appear exactly once.
    """
    rows, cols = plan.grid
    missing = [(r, c) for r in range(rows) for c in range(cols) if (r, c) not in blocks]
    if missing:
        raise ValueError(f"missing blocks {missing[:4]}")
    if len(blocks) != rows * cols:
        extra = set(blocks) - {(r, c) for r in range(rows) for c in range(cols)}
        raise ValueError(f"unexpected blocks {sorted(extra)[:4]}")
    out_w, out_h = plan.out_frame
    sample = next(iter(blocks.values()))
    frame = np.zeros((sample.shape[0], out_h, out_w), dtype=sample.dtype)
    crop_l = plan.crop[0]
    for (r, c), arr in blocks.items():
        if arr.shape[1] != plan.x_o_nominal or arr.shape[2] != plan.x_o_nominal:
            raise ValueError(f"block {(r, c)} has shape {arr.shape}, "
                             f"expected side {plan.x_o_nominal}")
        x0, y0, x1, y1 = plan.out_region(r, c)
        frame[:, y0:y1, x0:x1] = arr[:, crop_l:crop_l + (y1 - y0),
                                     crop_l:crop_l + (x1 - x0)]
    return frame


# ---------------------------------------------------------------------------
# sub-model partitioning

def split_model(m: ModelIR, after_layer: int) -> tuple[ModelIR, ModelIR]:
    """Split into two sub-models handing a feature map through DRAM.

    The cut must not cross a residual link or a conv-plus-shuffle
    fusion pair.
    """
    if not 0 <= after_layer < len(m.layers) - 1:
        raise ValueError("split point outside model")
    for src, dst in m.residual_links:
        if src <= after_layer < dst:
            raise ValueError(f"split at {after_layer} crosses residual link {(src, dst)}")
    if m.layers[after_layer + 1].kind == SHUFFLE_UP:
        raise ValueError("split separates a convolution from its shuffle")
    cut = after_layer + 1
    base_level = m.layers[after_layer].scale_level
    head_layers = m.layers[:cut]
    tail_layers = tuple(
        modelir.LayerSpec(sp.kind, sp.in_ch, sp.out_ch, sp.expand_ratio,
                          sp.scale_level - base_level, sp.activation)
        for sp in m.layers[cut:])
    head = ModelIR(f"{m.name}-part0", "custom", m.channels, head_layers,
                   tuple(l for l in m.residual_links if l[1] < cut))
    tail = ModelIR(f"{m.name}-part1", "custom", m.channels, tail_layers,
                   tuple((s - cut, d - cut) for s, d in m.residual_links if s >= cut))
    return head, tail


@dataclass(frozen=True)
class SplitReport:
    plans: tuple[BlockPlan, BlockPlan]
    stage_bandwidth: tuple[BandwidthReport, BandwidthReport]
    intermediate_channels: int
    intermediate_pixels: int
    intermediate_bytes: int          # written once plus overlapped re-reads
    total_bytes_per_frame: int
    gb_per_s: float
    effective_kop_per_pixel: float   # both stages, per final output pixel


def _effective_kop(m: ModelIR, x_i: int, count_mode: str = "hardware") -> float:
    rep = modelir.intrinsic_complexity(m, count_mode)
    return rep.intrinsic_kop_per_pixel * ncr_discrete(m, x_i, count_mode)


def split_bandwidth(m: ModelIR, after_layer: int, frame: tuple[int, int],
                    x_i: int, fps: float, bytes_per_pixel_in: float = 3,
                    bytes_per_pixel_out: float = 3,
                    feature_bytes: int = 1) -> SplitReport:
    """Traffic and compute of running a model as two chained sub-models.

    The intermediate feature map (C channels at ``feature_bytes`` each)
    is written by the first stage and re-read with block overlap by the
    second: at least 2*C*feature_bytes per intermediate pixel on top of
    the unsplit traffic, in exchange for two shallower pyramids.
    """
    head, tail = split_model(m, after_layer)
    plan_a = plan_blocks(head, frame, x_i)
    mid_frame = plan_a.out_frame
    plan_b = plan_blocks(tail, mid_frame, x_i)
    c_mid = head.out_ch
    bpp_mid = c_mid * feature_bytes
    bw_a = block_bandwidth(plan_a, fps, bytes_per_pixel_in, bpp_mid)
    bw_b = block_bandwidth(plan_b, fps, bpp_mid, bytes_per_pixel_out)
    mid_px = mid_frame[0] * mid_frame[1]
    inter_bytes = bw_a.output_bytes_per_frame + bw_b.input_bytes_per_frame
    total = (bw_a.input_bytes_per_frame + inter_bytes + bw_b.output_bytes_per_frame)
    out_scale = _level_scale(plan_b.out_level) * _level_scale(plan_a.out_level)
    px_ratio_a = float(_level_scale(plan_a.out_level) ** 2 / out_scale ** 2)
    eff = (_effective_kop(head, x_i) * px_ratio_a + _effective_kop(tail, x_i))
    return SplitReport((plan_a, plan_b), (bw_a, bw_b), c_mid, mid_px,
                       inter_bytes, total, total * fps / 1e9, eff)
