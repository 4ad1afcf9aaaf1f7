"""Instruction set tests: assembler, binary format, compiler, validator."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecnnkit import blockflow, fbisa, modelir, paramcodec
from ecnnkit.fbisa import (AssemblyError, BufferRef, CompileError, Instruction,
                           MachineConfig, Program)
from ecnnkit.fixedpoint import QFormat

Q6 = QFormat(True, 6)
Q8 = QFormat(True, 8)
UQ4 = QFormat(False, 4)
UQ8 = QFormat(False, 8)


def conv(src, dst, tiles=(4, 4), **over):
    base = dict(opcode="CONV", out_tiles=tiles, src=BufferRef(src),
                dst=BufferRef(dst), param=0, qw=Q6, qb=Q8, qo=UQ8)
    base.update(over)
    return Instruction(**base)


def compiled(family="dn", B=3, R=1, N=0, frame=(3840, 2160), x_i=128,
             weights=False, seed=0):
    m = modelir.build_ernet(family, B, R, N)
    plan = blockflow.plan_blocks(m, frame, x_i)
    w = modelir.init_weights(m, seed) if weights else None
    return fbisa.compile_model(m, plan, weights=w)


# ---------------------------------------------------------------------------
# structural rules

def test_instruction_field_rules():
    with pytest.raises(ValueError):
        conv("DI", "DO", opcode="MAC")
    with pytest.raises(ValueError):
        conv("DI", "DO", leaf_modules=5)
    with pytest.raises(ValueError):
        conv("DI", "DO", tiles=(0, 4))
    with pytest.raises(ValueError):
        conv("DI", "DO", pool="max")
    with pytest.raises(ValueError):
        conv("DI", "DO", qw=None)
    with pytest.raises(ValueError):
        conv("DI", "DO", param=None)
    with pytest.raises(ValueError):
        Instruction("DNX2", (4, 4), BufferRef("BB0"), BufferRef("BB1"),
                    qo=UQ8, pool="neither")
    dn = Instruction("DNX2", (4, 4), BufferRef("BB0"), BufferRef("BB1"),
                     qo=UQ8, pool="max")
    assert dn.qw is None and dn.param is None


def test_buffer_ref_rules():
    assert BufferRef.parse("BB1+3x7") == BufferRef("BB1", (3, 7))
    assert BufferRef.parse("DI").text == "DI"
    assert BufferRef("BB2", (3, 7)).text == "BB2+3x7"
    with pytest.raises(ValueError):
        BufferRef.parse("BB7")
    with pytest.raises(ValueError):
        BufferRef.parse("BB1+axb")
    with pytest.raises(ValueError):
        BufferRef("DI", (1, 0))


def test_machine_config_rules():
    with pytest.raises(ValueError):
        MachineConfig(bb_count=4)
    with pytest.raises(ValueError):
        MachineConfig(channels=64)
    assert MachineConfig().param_mem_bytes == 1288 * 1024


def test_program_boundary_rules():
    ins = (conv("DI", "BB0"), conv("BB0", "DO"))
    with pytest.raises(ValueError):
        Program(ins, (0,))
    with pytest.raises(ValueError):
        Program(ins, (2,))
    assert Program(ins, (1,)).segments == ((0, 1), (1, 2))


def test_upx2_extent_doubles():
    up = Instruction("UPX2", (13, 26), BufferRef("BB0"), BufferRef("BB1"),
                     param=0, qw=Q6, qb=Q8, qo=UQ8)
    assert up.out_extent == (104, 104)
    assert conv("DI", "DO", tiles=(13, 26)).out_extent == (52, 52)


# ---------------------------------------------------------------------------
# assembler

def test_assemble_single_er_line():
    p = fbisa.assemble(
        "ER out=30x29 lm=2 src=BB0 dst=BB1 param=@64 qw=Q6 qb=Q8 qo=UQ4")
    (ins,) = p.instructions
    assert ins.opcode == "ER"
    assert ins.leaf_modules == 2
    assert ins.out_tiles == (30, 29)
    assert ins.param == 64
    assert ins.qo == UQ4
    assert ins.qs is None


def test_assemble_comments_and_directives():
    text = """
    # denoiser, two stages
    .input UQ8
    CONV out=4x4 lm=1 src=DI dst=BB0 param=@0 qw=Q6 qb=Q8 qo=Q4
    CONV out=4x4 lm=1 src=BB0 dst=DO param=@10 qw=Q6 qb=Q8 qo=UQ8  # tail
    .submodel
    CONV out=4x4 lm=1 src=DI dst=DO param=@20 qw=Q6 qb=Q8 qo=UQ8
    """
    p = fbisa.assemble(text)
    assert len(p.instructions) == 3
    assert p.sub_model_boundaries == (2,)
    assert fbisa.validate(p) == []


def test_assemble_error_positions():
    with pytest.raises(AssemblyError) as err:
        fbisa.assemble("NOP out=1x1")
    assert err.value.line == 1 and err.value.column == 1
    with pytest.raises(AssemblyError) as err:
        fbisa.assemble("\nCONV out=1x1 zz=3")
    assert err.value.line == 2
    assert "zz" in str(err.value)
    for bad in ["CONV out=1x1 src=DI dst=DO param=@0 qw=QQ qb=Q8 qo=UQ8",
                "CONV out=x src=DI dst=DO param=@0 qw=Q6 qb=Q8 qo=UQ8",
                "CONV out=1x1 src=DI dst=DO param=7 qw=Q6 qb=Q8 qo=UQ8",
                "CONV out=1x1 src=DI dst=DO param=@0 qw=Q6 qb=Q8",
                "CONV out=1x1 src=DI src=DI dst=DO param=@0 qw=Q6 qb=Q8 qo=UQ8",
                ".submodel",
                ".machine warp=9",
                "CONV out=1x1 src=DO dst=DO param=@0 qw=Q6 qb=Q8 qo=UQ8"]:
        with pytest.raises(AssemblyError):
            fbisa.assemble(bad)


def test_machine_directive_round_trip():
    text = (".machine x_i=64 channels=32 bb=2 pmem=65536\n"
            ".input UQ7\n"
            "CONV out=16x32 lm=1 src=DI dst=BB0 param=@0 qw=Q6/w7 qb=Q8 qo=Q4\n"
            "CONV out=16x32 lm=1 src=BB0 dst=DO param=@9 qw=Q6 qb=Q8 qo=UQ8\n")
    p = fbisa.assemble(text)
    assert p.machine_config == MachineConfig(64, 32, 2, 65536)
    assert p.input_format == QFormat(False, 7)
    assert p.instructions[0].qw.width == 7
    assert fbisa.assemble(fbisa.disassemble(p)) == p
    with pytest.raises(AssemblyError):
        fbisa.assemble("CONV out=1x1 src=DI dst=DO param=@0 qw=Q6 qb=Q8 "
                       "qo=UQ8\n.machine bb=2\n")


def test_disassemble_canonical_order():
    ins = Instruction("CONV", (4, 4), src=BufferRef("BB0"), dst=BufferRef("BB1"),
                      srcS=BufferRef("BB2"), dstS=BufferRef("BB1", (2, 4)),
                      param=77, qw=Q6, qb=Q8, qo=UQ4, qs=UQ4)
    line = fbisa.disassemble(Program((ins,))).splitlines()[-1]
    assert line == ("CONV out=4x4 lm=1 src=BB0 dst=BB1 srcS=BB2 dstS=BB1+2x4 "
                    "param=@77 qw=Q6 qb=Q8 qo=UQ4 qs=UQ4")


def test_qformats_always_printed():
    p, _ = compiled()
    for line in fbisa.disassemble(p).splitlines():
        if line.startswith("."):
            continue
        assert "qo=" in line
        assert "qw=" in line and "qb=" in line


# ---------------------------------------------------------------------------
# round-trip fuzz

_FMT = st.builds(QFormat,
                 st.booleans(),
                 st.integers(-8, 15),
                 st.just(8))


@st.composite
def instructions_(draw):
    opcode = draw(st.sampled_from(fbisa.OPCODES))
    dst_name = draw(st.sampled_from(["BB0", "BB1", "BB2", "DO"]))
    src = BufferRef(draw(st.sampled_from(["BB0", "BB1", "BB2", "DI"])))
    if dst_name == "DO":
        tiles = (draw(st.integers(1, 63)), draw(st.integers(1, 127)))
        dst = BufferRef("DO")
    else:
        cap = 16 if opcode == "UPX2" else 32
        tiles = (draw(st.integers(1, cap)), draw(st.integers(1, 2 * cap)))
        dst = BufferRef(dst_name)
    if opcode == "CONV" and src.name != "DI":
        lm = draw(st.integers(1, 3 - src.bank))
    else:
        lm = draw(st.integers(1, 4))
    kwargs = dict(opcode=opcode, out_tiles=tiles, src=src, dst=dst,
                  leaf_modules=lm, qo=draw(_FMT),
                  infer_type=draw(st.sampled_from(fbisa.INFER_TYPES)))
    if opcode == "DNX2":
        kwargs["pool"] = draw(st.sampled_from(fbisa.POOL_MODES))
    else:
        kwargs["param"] = draw(st.integers(0, 8191))
        kwargs["qw"] = draw(_FMT)
        if draw(st.booleans()):
            kwargs["qw"] = QFormat(kwargs["qw"].signed,
                                   kwargs["qw"].frac_bits, 7)
        kwargs["qb"] = draw(_FMT)
        if draw(st.booleans()):
            kwargs["qs"] = draw(_FMT)
        if draw(st.booleans()):
            kwargs["srcS"] = BufferRef(
                draw(st.sampled_from(["BB0", "BB1", "BB2"])))
        if draw(st.booleans()):
            kwargs["dstS"] = BufferRef(
                draw(st.sampled_from(["BB0", "BB1", "BB2"])))
    return Instruction(**kwargs)


@st.composite
def programs_(draw):
    ins = tuple(draw(st.lists(instructions_(), min_size=1, max_size=8)))
    cut_pool = sorted(draw(st.sets(st.integers(1, max(1, len(ins) - 1)),
                                   max_size=2)))
    cuts = tuple(c for c in cut_pool if c < len(ins))
    fmt = draw(_FMT)
    return Program(ins, cuts, MachineConfig(), fmt)


@given(programs_())
@settings(max_examples=120, deadline=None)
def test_text_and_binary_round_trips(p):
    assert fbisa.assemble(fbisa.disassemble(p)) == p
    assert fbisa.program_from_bytes(fbisa.program_to_bytes(p)) == p


def test_binary_rejections(tmp_path):
    p, _ = compiled()
    blob = fbisa.program_to_bytes(p)
    assert blob[:6] == b"FBISA\x00"
    with pytest.raises(ValueError):
        fbisa.program_from_bytes(b"NOTISA" + blob[6:])
    with pytest.raises(ValueError):
        fbisa.program_from_bytes(blob[:30])
    path = tmp_path / "p.fbisa"
    fbisa.save_program(path, p)
    assert fbisa.load_program(path) == p


def test_record_size_fixed():
    p, _ = compiled()
    blob = fbisa.program_to_bytes(p)
    assert len(blob) == 24 + 16 * len(p.instructions)


# ---------------------------------------------------------------------------
# validator

def test_do_written_twice_diagnosed():
    p = Program((conv("DI", "DO"), conv("DI", "DO")))
    codes = {d.code for d in fbisa.validate(p)}
    assert "do-misuse" in codes and "di-misuse" in codes


def test_src_do_diagnosed():
    bad = conv("BB0", "DO")
    bad = Instruction(**{**bad.__dict__, "src": BufferRef("DO")})
    diags = fbisa.instruction_diagnostics(bad, 0, MachineConfig())
    assert any(d.code == "write-only" for d in diags)


def test_read_before_write_diagnosed():
    p = Program((conv("DI", "BB0"), conv("BB1", "DO")))
    assert any(d.code == "read-before-write" for d in fbisa.validate(p))


def test_liveness_resets_per_submodel():
    stage = (conv("DI", "BB0"), conv("BB0", "DO"))
    good = Program(stage + stage, (2,))
    assert fbisa.validate(good) == []
    crossing = Program((conv("DI", "BB0"), conv("BB0", "DO"),
                        conv("BB0", "DO")), (2,))
    codes = {d.code for d in fbisa.validate(crossing)}
    assert {"read-before-write", "di-misuse"} <= codes


def test_capacity_and_param_diagnostics():
    big = conv("DI", "BB0", tiles=(33, 4))
    assert any(d.code == "capacity"
               for d in fbisa.instruction_diagnostics(big, 0, MachineConfig()))
    from dataclasses import replace
    offset = replace(conv("DI", "BB0", tiles=(4, 4)),
                     dst=BufferRef("BB0", (30, 0)))
    assert any(d.code == "capacity"
               for d in fbisa.instruction_diagnostics(offset, 0, MachineConfig()))
    up = Instruction("UPX2", (17, 4), BufferRef("BB0"), BufferRef("BB1"),
                     param=0, qw=Q6, qb=Q8, qo=UQ8)
    assert any(d.code == "capacity"
               for d in fbisa.instruction_diagnostics(up, 0, MachineConfig()))
    far = conv("DI", "BB0", param=60_000)
    assert any(d.code == "param-range"
               for d in fbisa.instruction_diagnostics(far, 0, MachineConfig()))
    missing = conv("BB2", "DO")
    assert any(d.code == "no-such-buffer"
               for d in fbisa.instruction_diagnostics(
                   missing, 0, MachineConfig(bb_count=2)))


# ---------------------------------------------------------------------------
# compiler

def test_dn3_compiles_to_six_instructions():
    p, layout = compiled("dn", 3, 1, 0)
    assert len(p.instructions) == 6
    assert [i.opcode for i in p.instructions] == \
        ["CONV", "ER", "ER", "ER", "CONV", "CONV"]
    assert fbisa.validate(p) == []
    assert p.instructions[0].src.name == "DI"
    assert p.instructions[-1].dst.name == "DO"
    assert len(layout.entries) == 6


def test_sr4_b34_compiles_under_fifty():
    p, _ = compiled("sr4", 34, 4, 0, frame=(960, 540))
    assert len(p.instructions) <= 50
    assert len(p.instructions) == 38
    assert fbisa.validate(p) == []
    kinds = [i.opcode for i in p.instructions]
    assert kinds.count("ER") == 34
    assert kinds.count("UPX2") == 2
    assert kinds[-1] == "UPX2"


def test_dn3_out_tiles_follow_block_geometry():
    p, _ = compiled("dn", 3, 1, 0)
    assert [i.out_tiles for i in p.instructions] == \
        [(32, 63), (31, 62), (31, 61), (30, 60), (30, 59), (29, 58)]


def test_leaf_counts_per_opcode():
    m = modelir.build_ernet("sr4", 4, 3, 2)
    plan = blockflow.plan_blocks(m, (256, 256), 64)
    p, layout = fbisa.compile_model(m, plan)
    lms = [i.leaf_modules for i in p.instructions]
    # head, two widened modules, two at base ratio, trunk, two shuffles
    assert lms == [1, 4, 4, 3, 3, 1, 4, 1]
    for entry, ins in zip(layout.entries, p.instructions):
        assert entry.n_leaves == ins.leaf_modules


def test_trunk_residual_rides_srcs():
    p, _ = compiled("dn", 3, 1, 0)
    post = p.instructions[4]
    head = p.instructions[0]
    assert post.srcS == head.dst
    between = p.instructions[1:4]
    assert all(i.dst != head.dst for i in between)
    assert all(i.srcS is None for i in p.instructions if i is not post)


def test_dn12_head_reads_packed_stream():
    m = modelir.build_ernet("dn12", 2, 2, 0)
    plan = blockflow.plan_blocks(m, (256, 256), 64)
    p, layout = fbisa.compile_model(m, plan)
    assert len(p.instructions) == 5
    assert p.instructions[0].src.name == "DI"
    assert p.instructions[0].leaf_modules == 1
    assert p.instructions[-1].opcode == "UPX2"
    assert fbisa.validate(p) == []
    assert layout.entries[0].layer_index == 1


def test_program_independent_of_frame_resolution():
    m = modelir.build_ernet("dn", 3, 1, 0)
    w = modelir.init_weights(m, 3)
    plans = [blockflow.plan_blocks(m, f, 128)
             for f in ((3840, 2160), (1280, 720), (640, 480))]
    programs = [fbisa.compile_model(m, plan, weights=w)[0] for plan in plans]
    assert programs[0] == programs[1] == programs[2]


def test_restart_addresses_match_container():
    m = modelir.build_ernet("dn", 3, 1, 0)
    w = modelir.init_weights(m, 1)
    plan = blockflow.plan_blocks(m, (640, 480), 128)
    p, layout = fbisa.compile_model(m, plan, weights=w)
    container = fbisa.encode_parameters(m, layout, w)
    addrs = [e.restart_addr for e in layout.entries]
    assert addrs == [i.bias_addr for i in container.directory]
    assert addrs == sorted(addrs)
    assert [i.param for i in p.instructions] == addrs
    for entry in layout.entries:
        leaves = paramcodec.decode_segment(
            container, container.segment_index(entry.restart_addr))
        assert len(leaves) == entry.n_leaves


def test_zero_weight_default_container_matches_program():
    m = modelir.build_ernet("sr2", 2, 2, 0)
    plan = blockflow.plan_blocks(m, (320, 240), 64)
    p, layout = fbisa.compile_model(m, plan)
    container = fbisa.encode_parameters(m, layout, None)
    assert [i.param for i in p.instructions] == \
        [i.bias_addr for i in container.directory]


def test_er_leaf_parameters_slice_and_pad():
    m = modelir.build_ernet("dn", 2, 2, 0)
    w = modelir.init_weights(m, 9)
    qmap = fbisa.default_qmap(m)
    leaves = fbisa.layer_segment(m, 1, "er", 0, 2, w, qmap)
    assert len(leaves) == 2
    assert leaves[0].bias.shape == (64,)
    assert leaves[1].bias.shape == (32,)
    from ecnnkit.fixedpoint import quantize_array
    q3 = quantize_array(w[1]["w3"], qmap[1]["qw"])
    np.testing.assert_array_equal(leaves[1].w3, q3[32:64])
    q1 = quantize_array(w[1]["w1"], qmap[1]["qw"])
    np.testing.assert_array_equal(leaves[1].w1, q1[:, 32:64])
    b3 = quantize_array(w[1]["b3"], qmap[1]["qb"])
    b1 = quantize_array(w[1]["b1"], qmap[1]["qb"])
    np.testing.assert_array_equal(leaves[0].bias, np.concatenate([b3[:32], b1]))


def test_upx2_lane_layout_positions_phases():
    w = np.arange(12 * 2 * 1 * 1).reshape(12, 2, 1, 1)
    b = np.arange(12)
    lanes, bias = fbisa._upx2_lane_layout(w, b, 1)
    assert lanes.shape[0] == 32
    for g in range(4):
        np.testing.assert_array_equal(lanes[8 * g:8 * g + 3], w[3 * g:3 * g + 3])
        assert lanes[8 * g + 3:8 * (g + 1)].sum() == 0
        np.testing.assert_array_equal(bias[8 * g:8 * g + 3], b[3 * g:3 * g + 3])
    wide = np.arange(128 * 32).reshape(128, 32, 1, 1)
    lanes4, _ = fbisa._upx2_lane_layout(wide, np.zeros(128), 4)
    np.testing.assert_array_equal(lanes4, wide)


def test_conv_head_pads_three_channels():
    m = modelir.build_ernet("dn", 2, 1, 0)
    w = modelir.init_weights(m, 4)
    leaves = fbisa.layer_segment(m, 0, "conv", 0, 1, w, fbisa.default_qmap(m))
    (leaf,) = leaves
    assert leaf.w3.shape == (32, 32, 3, 3)
    assert leaf.w3[:, 3:].sum() == 0
    assert leaf.w1 is None


def test_default_qmap_shapes():
    m = modelir.build_ernet("sr4", 2, 2, 0)
    qmap = fbisa.default_qmap(m)
    tail_conv = len(m.layers) - 2
    assert qmap[tail_conv]["qo"] == UQ8
    assert "qs" in qmap[1] and qmap[1]["qs"].signed is False
    assert all(f["qw"] == Q6 for f in qmap.values())


def test_wide_trunks_rejected():
    m = modelir.build_plain(4, channels=64)
    plan = blockflow.plan_blocks(m, (256, 256), 64)
    with pytest.raises(CompileError):
        fbisa.compile_model(m, plan)


def test_parameter_memory_overflow_reported():
    m = modelir.build_ernet("dn", 55, 4, 0)
    plan = blockflow.plan_blocks(m, (1280, 720), 128)
    with pytest.raises(paramcodec.ParamMemoryError) as err:
        fbisa.compile_model(m, plan, weights=modelir.init_weights(m, 0))
    assert err.value.overflow > 0
