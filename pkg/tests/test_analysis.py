import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmcirc.analysis import (
    AnalysisError,
    ModeAmplitudes,
    evaluate_point,
    ideal_circulator_s,
    ideal_port_currents,
    metrics_from_sweep,
    mode_decompose,
    mode_reconstruct,
    mode_splitting,
    synthetic_sweep,
    tune_circulation,
    write_comparison_csv,
    write_heatmap_csv,
    write_metrics_json,
)
from stmcirc.hb_engine import solve_sparams, sweep
from stmcirc.topologies import PRESETS, build_single_ended

FREQS = np.linspace(0.9e9, 1.1e9, 21)
BSD = PRESETS["bandstop-delta-1ghz"].spec.junction
R3 = math.sqrt(3)


def test_ideal_matrix_metrics():
    m = metrics_from_sweep(synthetic_sweep(FREQS, lambda f: ideal_circulator_s()), 1e9)
    assert m.il_db == 0 and m.rl_db == 200 and m.ix_db == 200
    assert m.bw20_frac == pytest.approx(0.2)
    assert m.direction == "1→2→3" and not m.ambiguous


def test_reverse_ideal_matrix_direction():
    m = metrics_from_sweep(synthetic_sweep(FREQS, lambda f: ideal_circulator_s("1→3→2")), 1e9, 1, 3, 2)
    assert m.direction == "1→3→2" and m.ix_db == 200 and m.il_db == 0


def test_constant_leak_twenty_db():
    def s(f):
        x = ideal_circulator_s().copy()
        x[2, 0] = 0.1
        return x
    m = metrics_from_sweep(synthetic_sweep(FREQS, s), 1e9)
    assert m.ix_db == pytest.approx(20.0, abs=1e-12)
    assert m.bw20_frac == pytest.approx(0.2)


def test_bandwidth_interpolates_crossings():
    # ix falls linearly (in dB) from 40 at 1 GHz to 0 at +-0.1 GHz: 20 dB edges at +-50 MHz
    def s(f):
        x = ideal_circulator_s().copy()
        ix = 40.0 * (1 - abs(f - 1e9) / 0.1e9)
        x[2, 0] = 10 ** (-ix / 20)
        return x
    m = metrics_from_sweep(synthetic_sweep(FREQS, s), 1e9)
    assert m.bw20_frac == pytest.approx(0.1, rel=1e-9)


def test_f0_outside_sweep_raises():
    sw = synthetic_sweep(FREQS, lambda f: ideal_circulator_s())
    with pytest.raises(AnalysisError, match="outside"):
        metrics_from_sweep(sw, 1.2e9)


def test_tie_is_ambiguous():
    s = np.full((3, 3), 0.5, dtype=complex)
    m = metrics_from_sweep(synthetic_sweep(FREQS, lambda f: s), 1e9)
    assert m.ambiguous


@settings(max_examples=25, deadline=None)
@given(st.floats(-math.pi, math.pi))
def test_metrics_ignore_global_phase(theta):
    sw = sweep(build_single_ended(BSD), 0.98e9, 1.02e9, 5, BSD.fm_hz, 6)
    rot = sweep(build_single_ended(BSD), 0.98e9, 1.02e9, 5, BSD.fm_hz, 6)
    for p in rot.points:
        p.smatrix.data = p.smatrix.data * np.exp(1j * theta)
    a = metrics_from_sweep(sw, 1e9, 1, 3, 2)
    b = metrics_from_sweep(rot, 1e9, 1, 3, 2)
    assert a.to_dict() == pytest.approx(b.to_dict())


def test_tuned_preset_metrics():
    sw = sweep(build_single_ended(BSD), 0.9e9, 1.1e9, 201, BSD.fm_hz, 20)
    m = metrics_from_sweep(sw, 1e9, 1, 3, 2)
    assert m.ix_db > 100 and m.rl_db > 10 and 0 < m.il_db < 3
    assert m.direction == "1→3→2"
    assert m.worst_imp_at[1] in (-1, 1)
    assert abs(m.worst_imp_dbc + 11) <= 5


def test_ideal_port_currents_examples():
    np.testing.assert_allclose(ideal_port_currents(1, math.radians(30)), (R3, -R3, 0), atol=4e-16)
    np.testing.assert_allclose(ideal_port_currents(1, 0.0), (2, -1, -1), atol=4e-16)
    np.testing.assert_allclose(ideal_port_currents(1, math.radians(-30)), (R3, 0, -R3), atol=4e-16)
    np.testing.assert_allclose(ideal_port_currents(2.5, 0.3), 2.5 * np.array(ideal_port_currents(1, 0.3)))


def test_mode_decompose_examples():
    m = mode_decompose((1, 1, 1))
    assert m.a0 == pytest.approx(1) and abs(m.a_plus) < 1e-15 and abs(m.a_minus) < 1e-15
    m = mode_decompose((1, 0, 0))
    assert np.allclose([m.a0, m.a_plus, m.a_minus], 1 / 3)
    alpha, ig = 0.5236, 0.7
    m = mode_decompose(ideal_port_currents(ig, alpha))
    assert abs(m.a0) < 1e-15
    assert abs(m.a_plus) == pytest.approx(ig) and abs(m.a_minus) == pytest.approx(ig)
    assert np.angle(m.a_plus / m.a_minus) == pytest.approx(2 * alpha)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False),
                min_size=3, max_size=3))
def test_mode_round_trip(v):
    back = mode_reconstruct(mode_decompose(v))
    scale = max(1.0, max(abs(x) for x in v))
    assert np.max(np.abs(back - np.array(v))) <= 1e-12 * scale


def test_mode_reconstruct_formula():
    m = ModeAmplitudes(0.1 + 0.2j, -0.3j, 1.5)
    n = np.arange(3)
    want = m.a0 + m.a_plus * np.exp(1j * n * 2 * np.pi / 3) + m.a_minus * np.exp(-1j * n * 2 * np.pi / 3)
    np.testing.assert_allclose(mode_reconstruct(m), want, atol=1e-15)


@pytest.mark.parametrize("name", ["bandstop-delta-1ghz", "bandpass-wye-current"])
def test_in_phase_excitation_is_inert(name):
    j = PRESETS[name].spec.junction
    S = solve_sparams(build_single_ended(j), 1.0e9, j.fm_hz, 8, in_channels=(0,)).fundamental
    b = S @ np.ones(3)
    assert np.max(np.abs(b - b[0])) < 1e-9


def test_reversed_modulation_swaps_ports():
    fwd = build_single_ended(BSD)
    rev = build_single_ended(replace(BSD, bias=-1))
    a = metrics_from_sweep(sweep(fwd, 0.99e9, 1.01e9, 3, BSD.fm_hz, 8), 1e9, 1, 3, 2)
    b = metrics_from_sweep(sweep(rev, 0.99e9, 1.01e9, 3, BSD.fm_hz, 8), 1e9, 1, 2, 3)
    assert abs(a.ix_db - b.ix_db) < 0.01 and abs(a.il_db - b.il_db) < 0.01
    assert a.direction == "1→3→2" and b.direction == "1→2→3"


def test_mode_splitting_degenerate_at_zero_depth():
    wp, wm = mode_splitting(build_single_ended(replace(BSD, depth=0.0)), (0.9e9, 1.2e9), 301, k_max=1)
    assert abs(wp - wm) < 1e-6 * wp
    assert wp == pytest.approx(BSD.f0_hz, rel=2e-3)


def test_mode_splitting_grows_with_depth_and_brackets_f0():
    splits = []
    for d in (0.02, 0.05, 0.1):
        wp, wm = mode_splitting(build_single_ended(replace(BSD, depth=d)), (0.85e9, 1.25e9), 201, k_max=8)
        splits.append(abs(wp - wm))
    assert splits[0] < splits[1] < splits[2]
    wp, wm = mode_splitting(build_single_ended(BSD), (0.85e9, 1.25e9), 201)
    assert min(wp, wm) < 1e9 < max(wp, wm)


def test_mode_splitting_errors_without_resonance():
    with pytest.raises(AnalysisError):
        mode_splitting(build_single_ended(replace(BSD, depth=0.0)), (2.0e9, 2.5e9), 51, k_max=1)


def test_tuner_finds_circulation():
    start = replace(BSD, depth=0.1, f0_hz=1e9)
    r = tune_circulation(start, 1e9, k_max=8)
    assert not r.untuned and r.ix_db >= 50 and r.rl_db >= 10
    assert (r.through_port, r.isolated_port) == (3, 2)
    assert r.grid_ix.shape == (11, 11)
    again = tune_circulation(start, 1e9, k_max=8)
    assert again.to_dict() == r.to_dict()


def test_tuner_depth_zero_is_untuned():
    r = tune_circulation(BSD, 1e9, fix_depth=0.0, tank_range=None, k_max=4)
    recip = evaluate_point(replace(BSD, depth=0.0), 1e9, 4)
    assert r.untuned and r.evaluations == 1
    assert r.ix_db == pytest.approx(recip["ix_db"])
    assert r.ix_db < 20


def test_tuner_fm_axis_without_viable_point():
    # a tank pinned far from the target leaves nothing to tune
    j = replace(BSD, f0_hz=1.6e9)
    r = tune_circulation(j, 1e9, fm_range=(0.05e9, 0.06e9), depth_range=(0.01, 0.02), grid_points=3,
                         max_evals=10, k_max=4)
    assert r.untuned and r.to_dict()["status"] == "untuned"
    assert r.axes == ("fm_hz", "depth")


def test_writers(tmp_path):
    m = metrics_from_sweep(synthetic_sweep(FREQS, lambda f: ideal_circulator_s()), 1e9)
    write_metrics_json(tmp_path / "m.json", m, {"x": 1})
    import json
    doc = json.loads((tmp_path / "m.json").read_text())
    assert set(doc) == {"f0_hz", "il_db", "rl_db", "ix_db", "bw20_frac", "worst_imp_dbc", "direction", "x"}
    write_comparison_csv(tmp_path / "c.csv", [("ideal", m)], ["h"])
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "# h" and lines[1].startswith("design,f0_hz")
    r = tune_circulation(BSD, 1e9, fix_depth=0.0, tank_range=None, k_max=2)
    write_heatmap_csv(tmp_path / "h.csv", r)
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "ix_db"
