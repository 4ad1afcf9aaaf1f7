"""Hardware-constrained model descriptions.

A model is an ordered list of layers plus residual links.  Channel
widths are stored as the model defines them (an RGB input is 3
channels); the engine pads every feature plane to a multiple of 32
lanes, and the ``hardware`` counting mode accounts for those padded
lanes.  Resolution strata are tracked per layer: ``scale_level`` 0 is
the block-input resolution, +1 is one 2x upsampling above it, -1 one
2x packing below it.

The ERNet families built here share one trunk shape: a 3x3 head, B
expand-reduce modules (the first N of them expanding one ratio
higher), a 3x3 convolution closed by a trunk residual from the head,
and a family-specific tail.  Upsampling tails widen channels 4x with a
3x3 convolution and then pixel-shuffle, so the final full-resolution
image is produced streaming and never stored.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ecnnkit.fixedpoint import QFormat

CONV3 = "conv3x3"
CONV1 = "conv1x1"
ER = "ermodule"
SHUFFLE_UP = "shuffle_up2"
UNSHUFFLE_DOWN = "unshuffle_down2"
RESIDUAL = "residual_add"

LAYER_KINDS = {CONV3, CONV1, ER, SHUFFLE_UP, UNSHUFFLE_DOWN, RESIDUAL}
FAMILIES = ("dn", "dn12", "sr2", "sr4")

LANES = 32          # channel lanes per feature plane
MAX_EXPAND = 4      # leaf-modules per instruction bound the expand ratio

MODEL_FORMAT = "ecnnkit-model"
MODEL_VERSION = 1


def padded(ch: int) -> int:
    """Channel count after padding to full 32-lane planes."""
    return max(LANES, LANES * math.ceil(ch / LANES))


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_ch: int
    out_ch: int
    expand_ratio: int = 1
    scale_level: int = 0
    activation: str = "none"  # "none" | "relu"

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("none", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class ModelIR:
    name: str
    family: str
    channels: int
    layers: tuple[LayerSpec, ...]
    residual_links: tuple[tuple[int, int], ...] = ()
    hyper: dict = field(default_factory=dict)

    @property
    def output_level(self) -> int:
        return self.layers[-1].scale_level if self.layers else 0

    @property
    def in_ch(self) -> int:
        return self.layers[0].in_ch

    @property
    def out_ch(self) -> int:
        return self.layers[-1].out_ch


# ---------------------------------------------------------------------------
# builders

def _er_block(channels: int, ratio: int) -> LayerSpec:
    if ratio < 1 or ratio > MAX_EXPAND:
        raise ValueError(f"expand ratio {ratio} outside 1..{MAX_EXPAND}")
    return LayerSpec(ER, channels, channels, expand_ratio=ratio, activation="relu")


def build_ernet(family: str, B: int, R: int, N: int, channels: int = 32,
                name: str | None = None) -> ModelIR:
    """Construct one model of the supported families.

    ``B`` expand-reduce modules at ratio ``R``, the first ``N`` of them
    at ``R + 1``.  The effective ratio R_E = R + N/B may not exceed 4
    because a single instruction holds at most four leaf-modules.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    if channels % LANES:
        raise ValueError(f"trunk channels {channels} not a multiple of {LANES}")
    if B < 1:
        raise ValueError("need at least one ER module")
    if not 0 <= N < B:
        raise ValueError(f"N={N} must lie in [0, B)")
    if R < 1 or R + N / B > MAX_EXPAND:
        raise ValueError(f"effective expand ratio {R + N / B:.2f} outside 1..{MAX_EXPAND}")

    c = channels
    layers: list[LayerSpec] = []
    level = 0
    if family == "dn12":
        layers.append(LayerSpec(UNSHUFFLE_DOWN, 3, 12, scale_level=-1))
        level = -1
        head_in = 12
    else:
        head_in = 3
    head_idx = len(layers)
    layers.append(LayerSpec(CONV3, head_in, c, scale_level=level))
    for m in range(B):
        ratio = R + 1 if m < N else R
        layers.append(replace(_er_block(c, ratio), scale_level=level))
    trunk_idx = len(layers)
    layers.append(LayerSpec(CONV3, c, c, scale_level=level))

    if family == "dn":
        layers.append(LayerSpec(CONV3, c, 3, scale_level=level))
    elif family == "dn12":
        layers.append(LayerSpec(CONV3, c, 12, scale_level=level))
        layers.append(LayerSpec(SHUFFLE_UP, 12, 3, scale_level=level + 1))
    elif family == "sr2":
        layers.append(LayerSpec(CONV3, c, 12, scale_level=level))
        layers.append(LayerSpec(SHUFFLE_UP, 12, 3, scale_level=level + 1))
    else:  # sr4
        layers.append(LayerSpec(CONV3, c, 4 * c, scale_level=level))
        layers.append(LayerSpec(SHUFFLE_UP, 4 * c, c, scale_level=level + 1))
        layers.append(LayerSpec(CONV3, c, 12, scale_level=level + 1))
        layers.append(LayerSpec(SHUFFLE_UP, 12, 3, scale_level=level + 2))

    return ModelIR(
        name=name or f"{family}ernet-b{B}r{R}n{N}",
        family=family,
        channels=c,
        layers=tuple(layers),
        residual_links=((head_idx, trunk_idx),),
        hyper={"B": B, "R": R, "N": N},
    )


def build_plain(depth: int, channels: int = 32, in_ch: int = 3, out_ch: int = 3,
                name: str | None = None) -> ModelIR:
    """A plain stack of 3x3 layers, for reference models and analytics."""
    if depth < 1:
        raise ValueError("depth must be positive")
    if depth == 1:
        layers = [LayerSpec(CONV3, in_ch, out_ch)]
    else:
        layers = [LayerSpec(CONV3, in_ch, channels, activation="relu")]
        layers += [LayerSpec(CONV3, channels, channels, activation="relu")
                   for _ in range(depth - 2)]
        layers.append(LayerSpec(CONV3, channels, out_ch))
    return ModelIR(name=name or f"plain-d{depth}c{channels}", family="custom",
                   channels=channels, layers=tuple(layers))


def validate_model(m: ModelIR) -> None:
    """Check stratum bookkeeping and residual link shapes."""
    level = 0
    prev_out = None
    for i, layer in enumerate(m.layers):
        if layer.kind == SHUFFLE_UP:
            if layer.in_ch != 4 * layer.out_ch:
                raise ValueError(f"layer {i}: shuffle needs in_ch == 4*out_ch")
            level += 1
        elif layer.kind == UNSHUFFLE_DOWN:
            if layer.out_ch != 4 * layer.in_ch:
                raise ValueError(f"layer {i}: unshuffle needs out_ch == 4*in_ch")
            level -= 1
        if layer.scale_level != level:
            raise ValueError(f"layer {i}: scale_level {layer.scale_level}, expected {level}")
        if prev_out is not None and layer.in_ch != prev_out:
            raise ValueError(f"layer {i}: in_ch {layer.in_ch} != previous out_ch {prev_out}")
        prev_out = layer.out_ch
    for src, dst in m.residual_links:
        if not (0 <= src < dst < len(m.layers)):
            raise ValueError(f"residual link {(src, dst)} out of order")
        if m.layers[src].out_ch != m.layers[dst].out_ch:
            raise ValueError(f"residual link {(src, dst)} joins unequal widths")
        if m.layers[src].scale_level != m.layers[dst].scale_level:
            raise ValueError(f"residual link {(src, dst)} joins different strata")


# ---------------------------------------------------------------------------
# compute units: how layers group into instructions

@dataclass(frozen=True)
class Unit:
    kind: str                      # "conv" | "er" | "upx2" | "input_pack"
    layer_indices: tuple[int, ...]
    skip_sources: tuple[int, ...] = ()   # layer indices added into this unit's output

    @property
    def main_layer(self) -> int:
        return self.layer_indices[0]


def compute_units(m: ModelIR) -> tuple[Unit, ...]:
    """Group layers into the units the compiler emits instructions for.

    A 3x3/1x1 convolution immediately followed by a pixel shuffle fuses
    into one upsampling unit, so shuffled outputs are produced by the
    write path and full-resolution planes are never stored.  A leading
    pixel unshuffle becomes part of the input stream layout.  Bare
    shuffles anywhere else have no instruction mapping.
    """
    validate_model(m)
    skips: dict[int, list[int]] = {}
    for src, dst in m.residual_links:
        skips.setdefault(dst, []).append(src)

    units: list[Unit] = []
    i = 0
    if m.layers and m.layers[0].kind == UNSHUFFLE_DOWN:
        units.append(Unit("input_pack", (0,)))
        i = 1
    n = len(m.layers)
    while i < n:
        layer = m.layers[i]
        if layer.kind in (CONV3, CONV1):
            fused = i + 1 < n and m.layers[i + 1].kind == SHUFFLE_UP
            idx = (i, i + 1) if fused else (i,)
            units.append(Unit("upx2" if fused else "conv", idx,
                              tuple(skips.get(i, ()))))
            i += 2 if fused else 1
        elif layer.kind == ER:
            if skips.get(i):
                raise ValueError(f"layer {i}: residual link into an ER module")
            units.append(Unit("er", (i,)))
            i += 1
        elif layer.kind == RESIDUAL:
            if not units or units[-1].kind not in ("conv", "er", "upx2"):
                raise ValueError(f"layer {i}: residual add without a producing layer")
            last = units[-1]
            units[-1] = replace(last, skip_sources=last.skip_sources + (layer.in_ch,))
            i += 1
        else:
            raise ValueError(f"layer {i}: {layer.kind} has no instruction mapping here")
    if not any(u.kind != "input_pack" for u in units):
        raise ValueError("model has no compute layers")
    return tuple(units)


# ---------------------------------------------------------------------------
# complexity

KOP = 1000.0


def layer_ops_per_pixel(layer: LayerSpec, mode: str = "model") -> int:
    """Multiply-add operations (x2) per pixel at the layer's own stratum."""
    if mode not in ("model", "hardware"):
        raise ValueError(f"unknown counting mode {mode!r}")
    pad = padded if mode == "hardware" else (lambda ch: ch)
    if layer.kind == CONV3:
        return 2 * 9 * pad(layer.in_ch) * pad(layer.out_ch)
    if layer.kind == CONV1:
        return 2 * pad(layer.in_ch) * pad(layer.out_ch)
    if layer.kind == ER:
        c = pad(layer.in_ch)
        mid = layer.expand_ratio * c
        return 2 * 9 * c * mid + 2 * mid * c
    return 0


def layer_param_count(layer: LayerSpec, mode: str = "model") -> int:
    pad = padded if mode == "hardware" else (lambda ch: ch)
    if layer.kind == CONV3:
        return 9 * pad(layer.in_ch) * pad(layer.out_ch) + pad(layer.out_ch)
    if layer.kind == CONV1:
        return pad(layer.in_ch) * pad(layer.out_ch) + pad(layer.out_ch)
    if layer.kind == ER:
        c = pad(layer.in_ch)
        mid = layer.expand_ratio * c
        return 9 * c * mid + mid + mid * c + c
    return 0


@dataclass(frozen=True)
class ComplexityReport:
    intrinsic_kop_per_pixel: float
    effective_kop_per_pixel: float
    param_count: int
    depth_profile: tuple[tuple[int, int, int], ...]  # (layer, stratum, margin per side)

    @property
    def plain_equivalent_depth(self) -> float:
        """Total border shrink measured in input-stratum pixels per side."""
        return sum(margin * 2.0 ** -level for _, level, margin in self.depth_profile)


def depth_profile(m: ModelIR) -> tuple[tuple[int, int, int], ...]:
    profile = []
    for i, layer in enumerate(m.layers):
        margin = 1 if layer.kind in (CONV3, ER) else 0
        if margin:
            profile.append((i, layer.scale_level, margin))
    return tuple(profile)


def intrinsic_complexity(m: ModelIR, count_mode: str = "model",
                         x_i: int | None = None) -> ComplexityReport:
    """Operation count per final-output pixel.

    With ``x_i`` given, the effective figure also charges the
    block-recomputation ratio of a truncated-pyramid run at that block
    size; otherwise effective equals intrinsic.
    """
    s_out = m.output_level
    ops = sum(layer_ops_per_pixel(layer, count_mode) * 4.0 ** (layer.scale_level - s_out)
              for layer in m.layers)
    intrinsic = ops / KOP
    if x_i is not None:
        from ecnnkit import blockflow
        effective = intrinsic * blockflow.ncr_discrete(m, x_i, count_mode=count_mode)
    else:
        effective = intrinsic
    params = sum(layer_param_count(layer, count_mode) for layer in m.layers)
    return ComplexityReport(intrinsic, effective, params, depth_profile(m))


def kop_per_pixel_budget(peak_ops_per_s: float, width: int, height: int, fps: float) -> float:
    """Per-pixel operation budget of a machine at a given pixel rate."""
    return peak_ops_per_s / (width * height * fps) / KOP


# ---------------------------------------------------------------------------
# model scanning

@dataclass(frozen=True)
class ScanEntry:
    family: str
    B: int
    R: int
    N: int
    r_e: float
    intrinsic_kop: float
    ncr: float
    effective_kop: float

    @property
    def model(self) -> ModelIR:
        return build_ernet(self.family, self.B, self.R, self.N)


def scan_models(family: str, budget_kop_per_pixel: float, x_i: int,
                B_range: Iterable[int] = range(2, 41),
                count_mode: str = "hardware") -> list[ScanEntry]:
    """For each depth B, find the largest effective expand ratio that fits.

    Feasibility is the compute budget only: intrinsic operations times
    the block recomputation ratio must not exceed the per-pixel budget.
    Depths whose pyramid collapses at this block size are skipped.
    """
    from ecnnkit import blockflow

    entries: list[ScanEntry] = []
    for B in B_range:
        try:
            probe = build_ernet(family, B, 1, 0)
            blockflow.ncr_discrete(probe, x_i, count_mode=count_mode)
        except ValueError:
            continue
        candidates = sorted(
            ((R + N / B, R, N) for R in range(1, MAX_EXPAND + 1) for N in range(B)
             if R + N / B <= MAX_EXPAND),
            reverse=True)
        for r_e, R, N in candidates:
            m = build_ernet(family, B, R, N)
            intrinsic = intrinsic_complexity(m, count_mode).intrinsic_kop_per_pixel
            ncr_m = blockflow.ncr_discrete(m, x_i, count_mode=count_mode)
            effective = intrinsic * ncr_m
            if effective <= budget_kop_per_pixel:
                entries.append(ScanEntry(family, B, R, N, r_e, intrinsic, ncr_m, effective))
                break
    return entries


def pick_model(entries: Sequence[ScanEntry],
               quality: Callable[[ScanEntry], float] | None = None) -> ScanEntry:
    """Rank scan results; by default richer models (more intrinsic work) win."""
    if not entries:
        raise ValueError("no scan entries to pick from")
    key = quality or (lambda e: e.intrinsic_kop)
    return max(entries, key=key)


# ---------------------------------------------------------------------------
# container io

_WEIGHT_KEYS = {CONV3: ("w", "b"), CONV1: ("w", "b"), ER: ("w3", "b3", "w1", "b1")}


def weight_shapes(layer: LayerSpec) -> dict[str, tuple[int, ...]]:
    if layer.kind in (CONV3, CONV1):
        k = 3 if layer.kind == CONV3 else 1
        return {"w": (layer.out_ch, layer.in_ch, k, k), "b": (layer.out_ch,)}
    if layer.kind == ER:
        c, mid = layer.in_ch, layer.expand_ratio * layer.in_ch
        return {"w3": (mid, c, 3, 3), "b3": (mid,), "w1": (c, mid), "b1": (c,)}
    return {}


def init_weights(m: ModelIR, seed: int = 0) -> dict[int, dict[str, np.ndarray]]:
    """He-style random float weights, deterministic per seed."""
    rng = np.random.default_rng(seed)
    weights: dict[int, dict[str, np.ndarray]] = {}
    for i, layer in enumerate(m.layers):
        shapes = weight_shapes(layer)
        if not shapes:
            continue
        arrays = {}
        for key, shape in shapes.items():
            if key.startswith("w"):
                fan_in = int(np.prod(shape[1:]))
                arrays[key] = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
            else:
                arrays[key] = rng.normal(0.0, 0.02, shape)
        weights[i] = arrays
    return weights


def _fmt_to_text(fmt: QFormat | None) -> str | None:
    return None if fmt is None else fmt.notation


def _fmt_from_text(text: str | None) -> QFormat | None:
    return None if text is None else QFormat.parse(text)


def save_model(path: str | Path, m: ModelIR,
               weights: dict[int, dict[str, np.ndarray]] | None = None,
               qmap: dict[int, dict[str, QFormat | None]] | None = None) -> None:
    """Write the structured-text container plus the binary weight blob."""
    path = Path(path)
    blob = bytearray()
    layers_doc = []
    for i, layer in enumerate(m.layers):
        doc = {
            "kind": layer.kind,
            "in_ch": layer.in_ch,
            "out_ch": layer.out_ch,
            "expand_ratio": layer.expand_ratio,
            "scale_level": layer.scale_level,
            "activation": layer.activation,
        }
        if qmap and i in qmap:
            doc["q"] = {k: _fmt_to_text(v) for k, v in qmap[i].items()}
        if weights and i in weights:
            refs = {}
            for key, arr in weights[i].items():
                data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
                refs[key] = {"offset": len(blob), "length": len(data),
                             "shape": list(arr.shape)}
                blob.extend(data)
            doc["weights"] = refs
        layers_doc.append(doc)
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "name": m.name,
        "family": m.family,
        "channels": m.channels,
        "hyper": m.hyper,
        "layers": layers_doc,
        "residual_links": [list(link) for link in m.residual_links],
        "weights_blob": path.with_suffix(".bin").name if weights else None,
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")
    if weights:
        path.with_suffix(".bin").write_bytes(bytes(blob))


def load_model(path: str | Path):
    """Read a model container; returns (model, weights | None, qmap | None)."""
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not a model container")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported container version {doc.get('version')}")
    layers = tuple(
        LayerSpec(d["kind"], d["in_ch"], d["out_ch"], d["expand_ratio"],
                  d["scale_level"], d["activation"])
        for d in doc["layers"])
    m = ModelIR(doc["name"], doc["family"], doc["channels"], layers,
                tuple(tuple(link) for link in doc["residual_links"]),
                doc.get("hyper", {}))
    weights = None
    if doc.get("weights_blob"):
        blob = (path.parent / doc["weights_blob"]).read_bytes()
        weights = {}
        for i, d in enumerate(doc["layers"]):
            if "weights" not in d:
                continue
            arrays = {}
            for key, ref in d["weights"].items():
                flat = np.frombuffer(blob, dtype="<f4", count=ref["length"] // 4,
                                     offset=ref["offset"])
                arrays[key] = flat.reshape(ref["shape"]).astype(np.float64)
            weights[i] = arrays
    qmap = None
    if any("q" in d for d in doc["layers"]):
        qmap = {}
        for i, d in enumerate(doc["layers"]):
            if "q" in d:
                qmap[i] = {k: _fmt_from_text(v) for k, v in d["q"].items()}
    return m, weights, qmap
