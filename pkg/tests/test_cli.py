"""Command-line surface: reports, file round trips, exit codes."""

import numpy as np
import pytest

from ecnnkit import fbisa, paramcodec, quantflow, simcore
from ecnnkit.cli import main


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def report_dict(text):
    values = {}
    for line in text.splitlines():
        if ": " in line:
            key, val = line.split(": ", 1)
            values[key] = val
    return values


def test_analyze_reproduces_bandwidth_anchors(capsys):
    code, out, _ = run_cli(capsys, "analyze", "dnernet-b3r1n0",
                           "--res", "3840x2160", "--fps", "30")
    assert code == 0
    rep = report_dict(out)
    assert rep["nbr-analytic"] == "2.218"
    assert float(rep["dram-gb-per-s"]) == pytest.approx(1.66, rel=0.05)
    assert rep["compute-feasible"] == "true"
    assert rep["block"].startswith("128 -> 116")


def test_analyze_frame_based_reference_column(capsys):
    code, out, _ = run_cli(capsys, "analyze", "plain-d20c64",
                           "--res", "1920x1080", "--fps", "30", "--bits", "16")
    assert code == 0
    rep = report_dict(out)
    assert float(rep["frame-based-gb-per-s"]) == pytest.approx(302.58, abs=0.01)


@pytest.mark.parametrize("argv", [
    ("analyze", "nosuch-model", "--res", "64x64"),
    ("analyze", "dnernet-b3r1n0", "--res", "banana"),
    ("analyze", "plain-d70c32", "--res", "512x512"),
    ("scan", "walrus", "--budget", "1"),
])
def test_errors_exit_nonzero_with_stderr(capsys, argv):
    code, out, err = run_cli(capsys, *argv)
    assert code == 2
    assert err.startswith("ecnnkit: error:")
    assert out == ""


def scan_frontier(capsys, family, budget):
    code, out, _ = run_cli(capsys, "scan", family, "--budget", budget)
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "B,R,N,r_e,intrinsic_kop,ncr,effective_kop"
    frontier = {}
    for line in lines[1:]:
        fields = line.split(",")
        frontier[int(fields[0])] = float(fields[3])
    return frontier


def test_scan_includes_flagship_sr_model(capsys):
    frontier = scan_frontier(capsys, "sr4", 655)
    assert frontier[34] == pytest.approx(4.0)


def test_scan_tiny_budget_is_empty(capsys):
    assert scan_frontier(capsys, "dn", 0.001) == {}


def test_scan_frontier_monotone_in_budget(capsys):
    small = scan_frontier(capsys, "dn", 164)
    big = scan_frontier(capsys, "dn", 330)
    assert small
    for B, r_e in small.items():
        assert B in big and big[B] >= r_e


def test_init_compile_asm_disasm_round_trip(tmp_path, capsys):
    model = tmp_path / "model.json"
    code, out, _ = run_cli(capsys, "init", "dnernet-b3r1n0", "--seed", 5,
                           "-o", model)
    assert code == 0
    assert "wrote" in out

    prog = tmp_path / "prog.fbisa"
    code, out, _ = run_cli(capsys, "compile", model, "-o", prog)
    assert code == 0
    assert "instructions: 6" in out

    text = tmp_path / "prog.txt"
    assert run_cli(capsys, "disasm", prog, "-o", text)[0] == 0
    listing = text.read_text()
    assert ".input UQ8" in listing
    assert "CONV" in listing and "ER" in listing

    prog2 = tmp_path / "prog2.fbisa"
    assert run_cli(capsys, "asm", text, "-o", prog2)[0] == 0
    assert prog.read_bytes() == prog2.read_bytes()

    code, out, _ = run_cli(capsys, "compile", model)
    assert code == 0
    assert out == listing


def test_encode_reports_ratio_and_entropy_gap(tmp_path, capsys):
    model = tmp_path / "model.json"
    run_cli(capsys, "init", "dnernet-b3r1n0", "--seed", 5, "-o", model)
    cont = tmp_path / "params.bin"
    code, out, _ = run_cli(capsys, "encode", model, "-o", cont)
    assert code == 0
    rep = report_dict(out)
    assert float(rep["ratio"]) > 1.0
    assert float(rep["shannon-gap-mean-bits"]) >= 0.0
    assert float(rep["shannon-gap-max-bits"]) >= float(rep["shannon-gap-mean-bits"])
    container = paramcodec.load_container(cont)
    assert container.total_bytes == int(rep["coded-bytes"])


def test_quantize_then_run_bit_exact(tmp_path, capsys):
    model = tmp_path / "model.json"
    run_cli(capsys, "init", "dnernet-b3r1n0", "--seed", 5, "-o", model)
    plan = tmp_path / "plan.json"
    code, out, _ = run_cli(capsys, "quantize", model, "--res", "48x48",
                           "--seed", 3, "-o", plan)
    assert code == 0
    rep = report_dict(out)
    assert int(rep["container-bytes"]) == quantflow.load_plan(plan).container_bytes

    outimg = tmp_path / "out.ppm"
    code, out, _ = run_cli(capsys, "run", model, "--res", "96x96", "--block", "64",
                           "--plan", plan, "--seed", 2, "--oracle", "-o", outimg)
    assert code == 0
    assert "bit-exact: true" in out
    assert simcore.read_ppm(outimg).shape == (3, 96, 96)

    first = outimg.read_bytes()
    run_cli(capsys, "run", model, "--res", "96x96", "--block", "64",
            "--plan", plan, "--seed", 2, "--oracle", "-o", outimg)
    assert outimg.read_bytes() == first


def test_quantize_deterministic_output(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for path in (a, b):
        code, _, _ = run_cli(capsys, "quantize", "dnernet-b2r1n0",
                             "--res", "48x48", "--seed", 9, "-o", path)
        assert code == 0
    assert a.read_bytes() == b.read_bytes()


def test_run_reads_ppm_input(tmp_path, capsys):
    frame = np.random.default_rng(4).integers(0, 256, size=(3, 80, 72))
    src = tmp_path / "in.ppm"
    simcore.write_ppm(src, frame)
    out = tmp_path / "out.ppm"
    code, text, _ = run_cli(capsys, "run", "dnernet-b2r1n0", "--in", src,
                            "--block", "64", "--oracle", "-o", out)
    assert code == 0
    assert "bit-exact: true" in text
    assert simcore.read_ppm(out).shape == (3, 80, 72)


def test_quantize_accepts_ppm_frames(tmp_path, capsys):
    frame = np.random.default_rng(8).integers(0, 256, size=(3, 40, 40))
    src = tmp_path / "sample.ppm"
    simcore.write_ppm(src, frame)
    plan = tmp_path / "plan.json"
    code, out, _ = run_cli(capsys, "quantize", "dnernet-b1r1n0",
                           "--frames", src, "--norm", "l1", "-o", plan)
    assert code == 0
    assert quantflow.load_plan(plan).norm == "l1"
    assert "frames: 1" in out


def test_perf_reports_frozen_cycle_numbers(capsys):
    code, out, _ = run_cli(capsys, "perf", "dnernet-b3r1n0",
                           "--res", "3840x2160", "--fps", "30")
    assert code == 0
    rep = report_dict(out)
    assert rep["cycles-per-block"] == "11337"
    assert rep["blocks-per-frame"] == "646"
    assert rep["cycles-per-second"] == "219711060"
    assert rep["feasible"] == "true"


@pytest.mark.parametrize("name", ["dn12ernet-b2r2n1", "sr2ernet-b2r1n0"])
def test_other_family_descriptors_resolve(capsys, name):
    code, out, _ = run_cli(capsys, "analyze", name, "--res", "64x64",
                           "--fps", "30")
    assert code == 0
    assert f"model: {name}" in out
