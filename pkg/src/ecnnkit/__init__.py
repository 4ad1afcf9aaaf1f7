"""Toolchain and bit-exact simulator for a block-based CNN inference processor.

The package is organized around the stages of the hardware flow:

- ``fixedpoint``: dynamic 8-bit Q-format arithmetic shared by every stage
- ``modelir``: hardware-constrained model descriptions and complexity reports
- ``blockflow``: truncated-pyramid block planning and DRAM bandwidth models
- ``fbisa``: the coarse-grained instruction set, assembler and compiler
- ``paramcodec``: Huffman-coded parameter bitstream container
- ``simcore``: bit-exact block/frame execution and cycle/bank models
- ``quantflow``: post-training quantization planning
- ``cli``: the ``ecnnkit`` command line front end
"""

from ecnnkit.fixedpoint import QFormat, QValue, Accumulator, quantize, select_precision
from ecnnkit.modelir import (LayerSpec, ModelIR, ComplexityReport, build_ernet,
                             build_plain, intrinsic_complexity, scan_models,
                             init_weights, save_model, load_model)
from ecnnkit.blockflow import (BlockPlan, BandwidthReport, nbr_plain, ncr_plain,
                               ncr_discrete, frame_bandwidth, plan_blocks,
                               block_bandwidth, stitch)
from ecnnkit.fbisa import (Instruction, Program, assemble, disassemble,
                           compile_model, encode_parameters)
from ecnnkit.paramcodec import (LeafParams, ParamContainer, encode_container,
                                decode_segment, compression_report)
from ecnnkit.simcore import (EngineModel, PerfReport, run_block, run_image,
                             oracle_frame, perf)
from ecnnkit.quantflow import (QuantPlan, collect_stats, assign_formats,
                               save_plan, load_plan)

__version__ = "0.1.0"

__all__ = [
    "QFormat",
    "QValue",
    "Accumulator",
    "quantize",
    "select_precision",
    "LayerSpec",
    "ModelIR",
    "ComplexityReport",
    "build_ernet",
    "build_plain",
    "intrinsic_complexity",
    "scan_models",
    "init_weights",
    "save_model",
    "load_model",
    "BlockPlan",
    "BandwidthReport",
    "nbr_plain",
    "ncr_plain",
    "ncr_discrete",
    "frame_bandwidth",
    "plan_blocks",
    "block_bandwidth",
    "stitch",
    "Instruction",
    "Program",
    "assemble",
    "disassemble",
    "compile_model",
    "encode_parameters",
    "LeafParams",
    "ParamContainer",
    "encode_container",
    "decode_segment",
    "compression_report",
    "EngineModel",
    "PerfReport",
    "run_block",
    "run_image",
    "oracle_frame",
    "perf",
    "QuantPlan",
    "collect_stats",
    "assign_formats",
    "save_plan",
    "load_plan",
]
