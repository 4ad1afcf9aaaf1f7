"""Model construction, counting, and scanning tests.

Operation counts are checked against literal arithmetic written out
independently of the implementation's helpers.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecnnkit import blockflow, modelir
from ecnnkit.modelir import (CONV1, CONV3, ER, SHUFFLE_UP, UNSHUFFLE_DOWN,
                             LayerSpec, ModelIR, build_ernet, build_plain,
                             compute_units, intrinsic_complexity,
                             kop_per_pixel_budget, scan_models)


# ---------------------------------------------------------------------------
# builders

def test_dn_b3_has_six_threebythree_layers():
    m = build_ernet("dn", 3, 1, 0)
    assert len(m.layers) == 6
    assert sum(1 for l in m.layers if l.kind in (CONV3, ER)) == 6


def test_dn_b3_shape_chain():
    m = build_ernet("dn", 3, 1, 0)
    kinds = [l.kind for l in m.layers]
    assert kinds == [CONV3, ER, ER, ER, CONV3, CONV3]
    assert (m.layers[0].in_ch, m.layers[0].out_ch) == (3, 32)
    assert (m.layers[-1].in_ch, m.layers[-1].out_ch) == (32, 3)
    assert m.residual_links == ((0, 4),)


def test_first_n_modules_expand_higher():
    m = build_ernet("dn", 3, 1, 2)
    ratios = [l.expand_ratio for l in m.layers if l.kind == ER]
    assert ratios == [2, 2, 1]
    assert m.hyper == {"B": 3, "R": 1, "N": 2}


def test_sr4_b34_structure():
    m = build_ernet("sr4", 34, 4, 0)
    assert [l.kind for l in m.layers[:2]] == [CONV3, ER]
    assert [l.kind for l in m.layers[-4:]] == [CONV3, SHUFFLE_UP, CONV3, SHUFFLE_UP]
    assert m.layers[-1].out_ch == 3
    assert m.output_level == 2
    assert all(l.expand_ratio == 4 for l in m.layers if l.kind == ER)


def test_dn12_packs_input():
    m = build_ernet("dn12", 2, 1, 0)
    assert m.layers[0].kind == UNSHUFFLE_DOWN
    assert (m.layers[0].in_ch, m.layers[0].out_ch) == (3, 12)
    assert m.layers[1].in_ch == 12
    assert m.layers[1].scale_level == -1
    assert m.output_level == 0


def test_sr2_ends_with_one_shuffle():
    m = build_ernet("sr2", 3, 2, 1)
    assert [l.kind for l in m.layers[-2:]] == [CONV3, SHUFFLE_UP]
    assert m.output_level == 1


@pytest.mark.parametrize("kwargs", [
    dict(family="dn", B=3, R=1, N=3),      # N must stay below B
    dict(family="dn", B=3, R=4, N=1),      # effective ratio above 4
    dict(family="dn", B=3, R=1, N=0, channels=48),
    dict(family="dn", B=0, R=1, N=0),
    dict(family="nope", B=3, R=1, N=0),
])
def test_builder_rejects_bad_configs(kwargs):
    with pytest.raises(ValueError):
        build_ernet(**kwargs)


@given(B=st.integers(1, 40), R=st.integers(1, 4), data=st.data())
@settings(max_examples=60, deadline=None)
def test_effective_ratio_is_mean_of_module_ratios(B, R, data):
    N = 0 if R == 4 else data.draw(st.integers(0, B - 1))
    m = build_ernet("dn", B, R, N)
    ratios = [l.expand_ratio for l in m.layers if l.kind == ER]
    assert len(ratios) == B
    assert math.isclose(sum(ratios) / B, R + N / B)
    assert max(ratios) <= 4


# ---------------------------------------------------------------------------
# complexity counting

def test_single_conv_kop_both_modes():
    m = ModelIR("c", "custom", 32, (LayerSpec(CONV3, 3, 32),))
    assert intrinsic_complexity(m, "model").intrinsic_kop_per_pixel == \
        pytest.approx(2 * 9 * 3 * 32 / 1000)
    assert intrinsic_complexity(m, "hardware").intrinsic_kop_per_pixel == \
        pytest.approx(2 * 9 * 32 * 32 / 1000)


def test_budget_triple_matches_quoted_values():
    peak = 2 * 81920 * 250e6
    budgets = [kop_per_pixel_budget(peak, 3840, 2160, 30),
               kop_per_pixel_budget(peak, 1920, 1080, 60),
               kop_per_pixel_budget(peak, 1920, 1080, 30)]
    for got, quoted, derived in zip(budgets, (164, 328, 655), (164.8, 329.6, 658.7)):
        assert abs(got / quoted - 1) < 0.01
        assert abs(got / derived - 1) < 0.01


def oracle_intrinsic_hw(model):
    """Literal per-layer operation sum, hardware channel padding."""
    total = 0.0
    s_out = model.layers[-1].scale_level
    for layer in model.layers:
        c_in = max(32, 32 * math.ceil(layer.in_ch / 32))
        c_out = max(32, 32 * math.ceil(layer.out_ch / 32))
        if layer.kind == CONV3:
            ops = 2 * 9 * c_in * c_out
        elif layer.kind == CONV1:
            ops = 2 * c_in * c_out
        elif layer.kind == ER:
            ops = 2 * 9 * c_in * layer.expand_ratio * c_in \
                + 2 * layer.expand_ratio * c_in * c_in
        else:
            ops = 0
        total += ops * 4.0 ** (layer.scale_level - s_out)
    return total / 1000


def test_sr4_b34_intrinsic_frozen():
    m = build_ernet("sr4", 34, 4, 0)
    rep = intrinsic_complexity(m, "hardware")
    assert rep.intrinsic_kop_per_pixel == pytest.approx(185.6)
    assert rep.intrinsic_kop_per_pixel == pytest.approx(oracle_intrinsic_hw(m))


@given(family=st.sampled_from(["dn", "dn12", "sr2", "sr4"]),
       B=st.integers(2, 12), R=st.integers(1, 3))
@settings(max_examples=40, deadline=None)
def test_intrinsic_matches_literal_oracle(family, B, R):
    m = build_ernet(family, B, R, 0)
    got = intrinsic_complexity(m, "hardware").intrinsic_kop_per_pixel
    assert got == pytest.approx(oracle_intrinsic_hw(m))


def test_complexity_is_additive_over_concatenation():
    m = build_ernet("dn", 8, 2, 3)
    for cut in (1, 4, 9):
        head = ModelIR("h", "custom", 32, m.layers[:cut])
        tail = ModelIR("t", "custom", 32, m.layers[cut:])
        total = intrinsic_complexity(head, "hardware").intrinsic_kop_per_pixel \
            + intrinsic_complexity(tail, "hardware").intrinsic_kop_per_pixel
        assert total == pytest.approx(
            intrinsic_complexity(m, "hardware").intrinsic_kop_per_pixel)


def test_effective_includes_block_overhead():
    m = build_ernet("dn", 3, 1, 0)
    rep = intrinsic_complexity(m, "hardware", x_i=128)
    assert rep.effective_kop_per_pixel > rep.intrinsic_kop_per_pixel
    assert rep.effective_kop_per_pixel == pytest.approx(
        rep.intrinsic_kop_per_pixel * blockflow.ncr_discrete(m, 128))


def test_plain_equivalent_depths():
    assert intrinsic_complexity(build_ernet("dn", 3, 1, 0)).plain_equivalent_depth == 6
    assert intrinsic_complexity(build_ernet("dn", 8, 1, 0)).plain_equivalent_depth == 11
    assert intrinsic_complexity(build_ernet("dn", 12, 1, 0)).plain_equivalent_depth == 15
    # packed families pay double per reduced-resolution layer
    assert intrinsic_complexity(build_ernet("dn12", 2, 1, 0)).plain_equivalent_depth == 10
    assert intrinsic_complexity(build_ernet("sr4", 34, 4, 0)).plain_equivalent_depth == 37.5


def test_param_count_dn3_model_mode():
    m = build_ernet("dn", 3, 1, 0)
    expect = (9 * 3 * 32 + 32) + 3 * (9 * 32 * 32 + 32 + 32 * 32 + 32) \
        + (9 * 32 * 32 + 32) + (9 * 32 * 3 + 3)
    assert intrinsic_complexity(m, "model").param_count == expect


# ---------------------------------------------------------------------------
# unit grouping

def test_units_dn_family():
    kinds = [u.kind for u in compute_units(build_ernet("dn", 3, 1, 0))]
    assert kinds == ["conv", "er", "er", "er", "conv", "conv"]


def test_units_fuse_tail_shuffles():
    units = compute_units(build_ernet("sr4", 34, 4, 0))
    assert [u.kind for u in units[-2:]] == ["upx2", "upx2"]
    assert len(units) == 38
    units12 = compute_units(build_ernet("dn12", 2, 1, 0))
    assert units12[0].kind == "input_pack"
    assert units12[-1].kind == "upx2"


def test_units_record_trunk_skip():
    m = build_ernet("sr2", 3, 1, 0)
    unit = [u for u in compute_units(m) if u.skip_sources]
    assert len(unit) == 1
    assert unit[0].kind == "conv"
    assert unit[0].skip_sources == (0,)


def test_units_reject_bare_shuffle():
    layers = (LayerSpec(CONV3, 3, 32), LayerSpec(SHUFFLE_UP, 32, 8, scale_level=1),
              LayerSpec(SHUFFLE_UP, 8, 2, scale_level=2))
    with pytest.raises(ValueError):
        compute_units(ModelIR("bad", "custom", 32, layers))


def test_units_reject_mid_model_unshuffle():
    layers = (LayerSpec(CONV3, 3, 32), LayerSpec(UNSHUFFLE_DOWN, 32, 128, scale_level=-1))
    with pytest.raises(ValueError):
        compute_units(ModelIR("bad", "custom", 32, layers))


def test_validate_rejects_wrong_stratum():
    layers = (LayerSpec(CONV3, 3, 32, scale_level=1),)
    with pytest.raises(ValueError):
        modelir.validate_model(ModelIR("bad", "custom", 32, layers))


def test_validate_rejects_channel_mismatch():
    layers = (LayerSpec(CONV3, 3, 32), LayerSpec(CONV3, 64, 32))
    with pytest.raises(ValueError):
        modelir.validate_model(ModelIR("bad", "custom", 32, layers))


def test_validate_rejects_cross_stratum_link():
    m = build_ernet("sr2", 2, 1, 0)
    bad = ModelIR(m.name, m.family, m.channels, m.layers, ((0, len(m.layers) - 1),))
    with pytest.raises(ValueError):
        modelir.validate_model(bad)


# ---------------------------------------------------------------------------
# scanning

def test_scan_admits_quoted_flagship():
    entries = scan_models("sr4", 655.0, 128, range(29, 41))
    by_b = {e.B: e for e in entries}
    assert by_b[34].R == 4 and by_b[34].N == 0 and by_b[34].r_e == 4.0
    assert by_b[34].effective_kop <= 655.0


def test_scan_unlimited_budget_hits_ratio_cap():
    entries = scan_models("dn", 1e12, 128, range(2, 10))
    assert len(entries) == 8
    assert all(e.r_e == 4.0 for e in entries)


def test_scan_monotone_in_budget():
    small = {e.B: e.r_e for e in scan_models("sr4", 400.0, 128, range(29, 41))}
    large = {e.B: e.r_e for e in scan_models("sr4", 655.0, 128, range(29, 41))}
    assert set(small) <= set(large)
    for B, r in small.items():
        assert large[B] >= r


def test_scan_skips_geometrically_infeasible_depths():
    entries = scan_models("sr4", 655.0, 128, range(2, 31))
    assert min(e.B for e in entries) == 29


def test_pick_model_prefers_more_capacity():
    entries = scan_models("sr4", 655.0, 128, range(29, 36))
    best = modelir.pick_model(entries)
    assert best.intrinsic_kop == max(e.intrinsic_kop for e in entries)


# ---------------------------------------------------------------------------
# container io

def test_model_container_round_trip(tmp_path):
    m = build_ernet("sr2", 3, 2, 1)
    weights = modelir.init_weights(m, seed=7)
    qmap = {0: {"w": modelir.QFormat.parse("Q6"), "b": modelir.QFormat.parse("Q8"),
                "o": modelir.QFormat.parse("UQ7"), "s": None}}
    path = tmp_path / "model.json"
    modelir.save_model(path, m, weights, qmap)
    m2, w2, q2 = modelir.load_model(path)
    assert m2 == m
    assert set(w2) == set(weights)
    for i in weights:
        for key in weights[i]:
            np.testing.assert_array_equal(
                w2[i][key], weights[i][key].astype(np.float32).astype(np.float64))
    assert q2[0]["w"].notation == "Q6"
    assert q2[0]["s"] is None


def test_container_rejects_foreign_files(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError):
        modelir.load_model(path)


def test_init_weights_deterministic():
    m = build_ernet("dn", 2, 1, 0)
    a = modelir.init_weights(m, seed=3)
    b = modelir.init_weights(m, seed=3)
    c = modelir.init_weights(m, seed=4)
    for i in a:
        for key in a[i]:
            np.testing.assert_array_equal(a[i][key], b[i][key])
    assert any(not np.array_equal(a[i][k], c[i][k]) for i in a for k in a[i])


def test_weight_shapes_cover_er():
    layer = LayerSpec(ER, 32, 32, expand_ratio=3)
    shapes = modelir.weight_shapes(layer)
    assert shapes == {"w3": (96, 32, 3, 3), "b3": (96,), "w1": (32, 96), "b1": (32,)}
