"""Post-training quantization: calibration statistics and Q-format plans.

The pipeline has two halves.  ``collect_stats`` runs the float model
over sample frames and gathers, per convolution layer, the weight,
bias, feature, and expand-stage value populations.  ``assign_formats``
turns those populations into a complete per-layer format map by error
minimization, then enforces the machine's structural rules: biases may
only shift left into the accumulator, residual-linked layers share one
feature format, and the final unit emits the 8-bit image interface.

When the entropy-coded parameter container exceeds the on-chip budget,
whole parameter groups are demoted from 8-bit to 7-bit storage,
largest group first, re-fitting each demoted group's format at the
narrower width, until the container fits.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import blockflow, fbisa, modelir, paramcodec
from .blockflow import BLOCK_SIDE
from .fbisa import UQ8
from .fixedpoint import QFormat, select_precision
from .modelir import CONV3, ER, SHUFFLE_UP, UNSHUFFLE_DOWN, ModelIR
from .simcore import default_workers, pack_px2, unpack_px2

PARAM_GROUPS = ("weights", "biases")


@dataclass
class LayerStats:
    """Value populations of one convolution or expand-reduce layer."""

    weights: np.ndarray
    biases: np.ndarray
    features: np.ndarray
    er_mid: np.ndarray | None = None


@dataclass
class ModelStats:
    """Calibration collections plus what the budget fit needs to re-encode."""

    model: ModelIR
    weights: dict[int, dict[str, np.ndarray]]
    layers: dict[int, LayerStats]
    n_frames: int


@dataclass(frozen=True, eq=True)
class QuantPlan:
    """Per-layer formats and per-group parameter widths."""

    norm: str
    layer_formats: dict
    widths: dict
    container_bytes: int

    def qmap(self) -> dict:
        """Format map in the shape the compiler consumes."""
        return {i: dict(fmts) for i, fmts in self.layer_formats.items()}

    def demoted_groups(self) -> tuple[tuple[int, str], ...]:
        return tuple(sorted(k for k, w in self.widths.items() if w == 7))


# ---------------------------------------------------------------------------
# statistics collection


def _conv3x3_float(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    ci = x.shape[0]
    oh, ow = x.shape[1] - 2, x.shape[2] - 2
    acc = np.zeros((w.shape[0], oh * ow))
    for dy in range(3):
        for dx in range(3):
            acc += w[:, :, dy, dx] @ x[:, dy:dy + oh, dx:dx + ow].reshape(ci, -1)
    return acc.reshape(w.shape[0], oh, ow)


def _frame_margin(m: ModelIR):
    traces = blockflow.trace_layers(m, BLOCK_SIDE)
    offset = traces[-1].offset
    scale = Fraction(2) ** m.output_level
    pack_align = 2 if m.layers[0].kind == UNSHUFFLE_DOWN else 1
    pad = pack_align * math.ceil(Fraction(offset) / scale / pack_align)
    return traces, pad


def float_forward(m: ModelIR, weights, frame_values: np.ndarray,
                  collect: bool = True):
    """Reference floating-point inference over one frame.

    Returns (output map, snapshots) where snapshots maps layer index to
    (features, er_mid); each snapshot is cropped to the frame-aligned
    region at the layer's own stratum, so border margins never leak
    into statistics.
    """
    x = np.asarray(frame_values, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"frame must be (channels, h, w), got {x.shape}")
    H, W = x.shape[1], x.shape[2]
    traces, pad = _frame_margin(m)
    x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    link_sources = {src for src, _dst in m.residual_links}
    link_for = {dst: src for src, dst in m.residual_links}
    saved: dict[int, np.ndarray] = {}
    snapshots: dict[int, tuple[np.ndarray, np.ndarray | None]] = {}

    def aligned(arr: np.ndarray, i: int) -> np.ndarray:
        s = Fraction(2) ** m.layers[i].scale_level
        o = int(pad * s) - traces[i].offset
        return arr[:, o:o + int(H * s), o:o + int(W * s)]

    for i, layer in enumerate(m.layers):
        mid = None
        if layer.kind == UNSHUFFLE_DOWN:
            x = pack_px2(x)
        elif layer.kind == SHUFFLE_UP:
            x = unpack_px2(x)
        elif layer.kind == CONV3:
            acc = _conv3x3_float(x, weights[i]["w"])
            acc += weights[i]["b"][:, None, None]
            if i in link_for:
                prev = saved[link_for[i]]
                dy = (prev.shape[1] - acc.shape[1]) // 2
                dx = (prev.shape[2] - acc.shape[2]) // 2
                acc += prev[:, dy:dy + acc.shape[1], dx:dx + acc.shape[2]]
            if layer.activation == "relu":
                acc = np.maximum(acc, 0.0)
            x = acc
        elif layer.kind == ER:
            mid = np.maximum(_conv3x3_float(x, weights[i]["w3"])
                             + weights[i]["b3"][:, None, None], 0.0)
            acc = np.tensordot(weights[i]["w1"], mid, axes=(1, 0))
            acc += weights[i]["b1"][:, None, None]
            acc += x[:, 1:-1, 1:-1]
            x = acc
        else:
            raise ValueError(f"layer {i}: no float mapping for {layer.kind!r}")
        if i in link_sources:
            saved[i] = x
        if collect and layer.kind in (CONV3, ER):
            snapshots[i] = (aligned(x, i), aligned(mid, i) if mid is not None else None)

    scale = Fraction(2) ** m.output_level
    o = int(pad * scale) - traces[-1].offset
    out = x[:, o:o + int(H * scale), o:o + int(W * scale)]
    return out, snapshots


def collect_stats(m: ModelIR, weights, frames, input_format: QFormat = UQ8,
                  workers: int | None = None) -> ModelStats:
    """Gather calibration populations from float inference over frames.

    ``frames`` holds integer code arrays in ``input_format`` (camera
    bytes by default).  Collection runs frame-parallel and merges by
    concatenation, so the resulting populations do not depend on frame
    order.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one sample frame")
    per_layer: dict[int, list] = {}

    def one(frame):
        vals = np.asarray(frame, dtype=np.float64) * input_format.step
        _out, snaps = float_forward(m, weights, vals)
        return snaps

    n = workers if workers is not None else default_workers()
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(one, frames))
    else:
        results = [one(f) for f in frames]
    for snaps in results:
        for i, (feat, mid) in snaps.items():
            per_layer.setdefault(i, []).append((feat.reshape(-1),
                                                None if mid is None else mid.reshape(-1)))

    layers: dict[int, LayerStats] = {}
    for i, layer in enumerate(m.layers):
        if layer.kind not in (CONV3, ER):
            continue
        if layer.kind == CONV3:
            wvals = weights[i]["w"].reshape(-1)
            bvals = weights[i]["b"].reshape(-1)
        else:
            wvals = np.concatenate([weights[i]["w3"].reshape(-1),
                                    weights[i]["w1"].reshape(-1)])
            bvals = np.concatenate([weights[i]["b3"].reshape(-1),
                                    weights[i]["b1"].reshape(-1)])
        feats = np.concatenate([f for f, _ in per_layer[i]])
        mids = [mv for _, mv in per_layer[i] if mv is not None]
        layers[i] = LayerStats(
            weights=np.asarray(wvals, dtype=np.float64),
            biases=np.asarray(bvals, dtype=np.float64),
            features=feats,
            er_mid=np.concatenate(mids) if mids else None,
        )
    return ModelStats(model=m, weights=weights, layers=layers,
                      n_frames=len(frames))


# ---------------------------------------------------------------------------
# format assignment


def _sizing_entries(m: ModelIR):
    """Instruction segmentation for container sizing; plan independent."""
    last_err = None
    for x_i in (BLOCK_SIDE, 96, 64, 48, 32):
        try:
            plan = blockflow.plan_blocks(m, (x_i, x_i), x_i)
            _program, layout = fbisa.compile_model(m, plan)
            return layout.entries
        except ValueError as err:
            last_err = err
    raise ValueError(f"no viable block size for container sizing: {last_err}")


def _container_bytes(m: ModelIR, weights, qmap, entries) -> int:
    segments = [fbisa.layer_segment(m, e.layer_index, e.kind, e.out_group,
                                    e.n_leaves, weights, qmap)
                for e in entries]
    return paramcodec.encode_container(segments).total_bytes


def assign_formats(stats: ModelStats, norm: str = "l2",
                   budget_bytes: int | None = None) -> QuantPlan:
    """Fit per-layer formats to the collected populations.

    Feature formats come straight from error minimization, except that
    residual-linked layers adopt their skip source's format and the
    final unit always emits unsigned 8-bit image codes.  Bias formats
    are clamped so every accumulation scale can reach them with a left
    shift.  If the encoded container overflows ``budget_bytes``
    (parameter memory by default), parameter groups are demoted to
    7 bits, largest raw count first, until it fits; running out of
    groups raises the codec's memory error.
    """
    m = stats.model
    if budget_bytes is None:
        budget_bytes = paramcodec.PARAM_MEM_BYTES
    units = modelir.compute_units(m)
    final_layers = set(units[-1].layer_indices)
    param_layers = [i for i, l in enumerate(m.layers) if l.kind in (CONV3, ER)]

    qo: dict[int, QFormat] = {}
    qs: dict[int, QFormat] = {}
    for i in param_layers:
        layer = m.layers[i]
        ls = stats.layers[i]
        if i in final_layers:
            qo[i] = UQ8
        else:
            signed = not (layer.kind == CONV3 and layer.activation == "relu")
            qo[i] = select_precision(ls.features, norm, signed=signed, width=8)
        if layer.kind == ER:
            qs[i] = select_precision(ls.er_mid, norm, signed=False, width=8)
    for src, dst in m.residual_links:
        qo[dst] = qo[src]

    widths = {(i, g): 8 for i in param_layers for g in PARAM_GROUPS}
    group_count = {}
    for i in param_layers:
        group_count[(i, "weights")] = int(stats.layers[i].weights.size)
        group_count[(i, "biases")] = int(stats.layers[i].biases.size)

    def build_formats() -> dict:
        formats: dict[int, dict[str, QFormat]] = {}
        in_frac = UQ8.frac_bits
        for i, layer in enumerate(m.layers):
            if layer.kind not in (CONV3, ER):
                continue
            ls = stats.layers[i]
            qw = select_precision(ls.weights, norm, signed=True,
                                  width=widths[(i, "weights")])
            scales = [in_frac + qw.frac_bits]
            if layer.kind == ER:
                scales.append(qs[i].frac_bits + qw.frac_bits)
            qb_free = select_precision(ls.biases, norm, signed=True,
                                       width=widths[(i, "biases")])
            qb_frac = min([qb_free.frac_bits] + scales)
            qb = QFormat(True, qb_frac, width=widths[(i, "biases")])
            fmts = {"qw": qw, "qb": qb, "qo": qo[i]}
            if layer.kind == ER:
                fmts["qs"] = qs[i]
            formats[i] = fmts
            in_frac = qo[i].frac_bits
        return formats

    entries = _sizing_entries(m)
    order = sorted(group_count, key=lambda k: (-group_count[k], k))
    while True:
        formats = build_formats()
        size = _container_bytes(m, stats.weights, formats, entries)
        if size <= budget_bytes:
            return QuantPlan(norm=norm, layer_formats=formats,
                             widths=dict(widths), container_bytes=size)
        remaining = [g for g in order if widths[g] == 8]
        if not remaining:
            raise paramcodec.ParamMemoryError(size, budget_bytes)
        widths[remaining[0]] = 7


# ---------------------------------------------------------------------------
# plan serialization


def save_plan(path: str | Path, plan: QuantPlan) -> None:
    doc = {
        "norm": plan.norm,
        "container_bytes": plan.container_bytes,
        "layers": {str(i): {k: f.notation for k, f in fmts.items()}
                   for i, fmts in plan.layer_formats.items()},
        "widths": {f"{i}:{g}": w for (i, g), w in sorted(plan.widths.items())},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_plan(path: str | Path) -> QuantPlan:
    doc = json.loads(Path(path).read_text())
    layer_formats = {int(i): {k: QFormat.parse(n) for k, n in fmts.items()}
                     for i, fmts in doc["layers"].items()}
    widths = {}
    for key, w in doc["widths"].items():
        i, g = key.split(":")
        widths[(int(i), g)] = int(w)
    return QuantPlan(norm=doc["norm"], layer_formats=layer_formats,
                     widths=widths, container_bytes=int(doc["container_bytes"]))
