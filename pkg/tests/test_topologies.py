import math
from dataclasses import replace

import numpy as np
import pytest

from stmcirc.hb_engine import solve_sparams
from stmcirc.netlist import Circuit, validate
from stmcirc.topologies import (
    PRESETS,
    ArchitectureSpec,
    BuildError,
    JunctionSpec,
    MatchingFilterSpec,
    attach_matching_filters,
    bandpass_ladder,
    build,
    build_single_ended,
    chebyshev_prototype,
    modulation_phases,
)

FM = 0.19e9
BSD = PRESETS["bandstop-delta-1ghz"].spec.junction
BPW = PRESETS["bandpass-wye-current"].spec.junction

ARCHS = [
    ("single-ended", 1),
    ("differential-voltage", 2),
    ("differential-current", 2),
    ("n-way-parallel", 3),
    ("n-way-series", 3),
]


def _fund(circ, f=1.0e9, K=6):
    return solve_sparams(circ, f, FM, K, in_channels=(0,))


def _dbc(S, out_port, k, through):
    return 20 * np.log10(abs(S.entry(out_port, k, 1, 0)) / abs(S.entry(through, 0, 1, 0)))


def test_phase_tables():
    np.testing.assert_allclose(np.degrees(modulation_phases(1)[:, 0]), [0, 120, 240])
    t2 = modulation_phases(2)
    np.testing.assert_allclose(t2[:, 1] - t2[:, 0], np.pi)
    np.testing.assert_allclose(np.degrees(modulation_phases(4)[0]), [0, 90, 180, 270])
    np.testing.assert_allclose(np.degrees(modulation_phases(1, -1)[:, 0]), [0, -120, -240])


@pytest.mark.parametrize("N", [2, 3, 4, 5, 8])
def test_phase_row_sums_vanish(N):
    rows = np.exp(1j * modulation_phases(N)).sum(axis=1)
    assert np.max(np.abs(rows)) < 1e-12


def test_c0_from_f0():
    j = JunctionSpec(f0_hz=1.3e9, l0=7e-9)
    assert abs(1 / (2 * math.pi * math.sqrt(j.l0 * j.c0)) - 1.3e9) < 1e-3


def test_tank_topologies():
    bs = build_single_ended(replace(BSD, depth=0.1))
    bp = build_single_ended(replace(BPW, depth=0.1))
    # parallel tanks share both terminals; series tanks have a private mid node
    pairs = [(e.node_a, e.node_b) for e in bs.elements if e.kind in ("inductor", "modulated-capacitor")]
    assert pairs == [("t1", "t2")] * 2 + [("t2", "t3")] * 2 + [("t3", "t1")] * 2
    assert {"m1", "m2", "m3", "c"} <= set(bp.nodes)
    assert not any(e.node_b == "0" or e.node_a == "0" for e in bp.elements if e.kind != "port")


@pytest.mark.parametrize("arr,N", ARCHS)
@pytest.mark.parametrize("depth", [0.0, 0.2])
def test_cyclic_symmetry_and_validity(arr, N, depth):
    spec = ArchitectureSpec(replace(BSD, depth=depth), arr, N)
    circ = build(spec)
    assert validate(circ) == []
    S = _fund(circ, 1.02e9).fundamental
    P = np.roll(np.eye(3), 1, axis=0)
    assert np.max(np.abs(P @ S @ P.T - S)) < 1e-9
    if depth == 0:
        assert np.max(np.abs(S - S.T)) < 1e-10


@pytest.mark.parametrize("arr,N", ARCHS)
def test_reversed_bias_transposes_fundamental(arr, N):
    fwd = build(ArchitectureSpec(replace(BSD, depth=0.2), arr, N))
    rev = build(ArchitectureSpec(replace(BSD, depth=0.2, bias=-1), arr, N))
    a, b = _fund(fwd).fundamental, _fund(rev).fundamental
    assert np.max(np.abs(a - b.T)) < 1e-9


def test_relabel_and_phase_advance_permutes_s():
    circ = build_single_ended(replace(BSD, depth=0.2))
    moved = []
    for e in circ.elements:
        if e.kind == "port":
            e = replace(e, port_index=e.port_index % 3 + 1)
        elif e.mod is not None:
            e = replace(e, mod=replace(e.mod, phase_rad=e.mod.phase_rad + 2 * math.pi / 3))
        moved.append(e)
    a = solve_sparams(circ, 1.0e9, FM, 4)
    b = solve_sparams(circ.with_elements(moved), 1.0e9, FM, 4)
    for m in range(1, 4):
        for n in range(1, 4):
            for k in range(-4, 5):
                for l in range(-4, 5):
                    x = a.entry(m, k, n, l)
                    y = b.entry(m % 3 + 1, k, n % 3 + 1, l)
                    assert abs(abs(x) - abs(y)) < 1e-9
    np.testing.assert_allclose(b.fundamental, np.roll(np.roll(a.fundamental, 1, 0), 1, 1), atol=1e-9)


def test_differential_matched_cancels_odd_channels():
    p = PRESETS["bandstop-delta-differential"]
    S = _fund(build(p.spec), K=8)
    for m in (1, 2, 3):
        for k in (-1, 1):
            assert _dbc(S, m, k, 3) < -120


def test_differential_depth_zero_reciprocal():
    for arr in ("differential-voltage", "differential-current"):
        S = _fund(build(ArchitectureSpec(replace(BSD, depth=0.0), arr, 2))).fundamental
        assert np.max(np.abs(S - S.T)) < 1e-10


def test_two_way_parallel_equals_differential_current():
    j = replace(BPW, depth=0.15)
    a = _fund(build(ArchitectureSpec(j, "n-way-parallel", 2))).fundamental
    b = _fund(build(ArchitectureSpec(j, "differential-current", 2))).fundamental
    assert np.max(np.abs(a - b)) < 1e-9


def test_three_way_keeps_only_multiples_of_three():
    j = PRESETS["bandstop-delta-1ghz"].spec.junction
    S = _fund(build(ArchitectureSpec(j, "n-way-series", 3)), K=8)
    for m in (1, 2, 3):
        for k in (-2, -1, 1, 2):
            assert _dbc(S, m, k, 3) < -120
    assert max(_dbc(S, m, k, 3) for m in (1, 2, 3) for k in (-3, 3)) > -60


def test_mismatch_revives_odd_channels():
    spec = PRESETS["bandstop-delta-differential"].spec
    S = _fund(build(replace(spec, unit2_cap_error=0.01)), K=8)
    worst = max(_dbc(S, m, k, 3) for m in (1, 2, 3) for k in (-1, 1))
    assert -100 < worst < -30


def test_arrangement_checks():
    with pytest.raises(BuildError):
        build(ArchitectureSpec(BSD, "differential-voltage", 3))
    with pytest.raises(BuildError):
        build(ArchitectureSpec(BSD, "n-way-parallel", 1))
    with pytest.raises(BuildError):
        build(ArchitectureSpec(BSD, "single-ended", 2))
    with pytest.raises(BuildError):
        build(ArchitectureSpec(replace(BSD, depth=1.0)))
    with pytest.raises(BuildError):
        MatchingFilterSpec(order=7).check()
    with pytest.raises(BuildError):
        MatchingFilterSpec(fractional_bw=0.5).check()


def test_chebyshev_prototype_known_values():
    # order-2, 0.5 dB ripple lowpass prototype
    np.testing.assert_allclose(chebyshev_prototype(2, 0.5), [1.0, 1.4029, 0.7071, 1.9841], atol=1e-4)
    np.testing.assert_allclose(chebyshev_prototype(3, 0.5), [1.0, 1.5963, 1.0967, 1.5963, 1.0], atol=1e-4)


def test_order_zero_filter_is_identity():
    circ = build_single_ended(replace(BSD, depth=0.2))
    same = attach_matching_filters(circ, MatchingFilterSpec(order=0))
    assert same == circ
    a, b = _fund(circ).data, _fund(same).data
    assert np.nanmax(np.abs(a - b)) < 1e-12


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_standalone_filter_passes_center(order):
    from stmcirc.netlist import Element
    spec = MatchingFilterSpec(order=order, fractional_bw=0.1, ripple_db=0.5, center_hz=1e9, z0=50.0)
    els = bandpass_ladder(spec, "a", "b", "F.")
    # even orders are not impedance-symmetric: terminate the load with g_{n+1}
    g = chebyshev_prototype(order, 0.5)
    ports = (Element("port", "a", "0", 50.0, port_index=1, z0=50.0),
             Element("port", "b", "0", 50.0 * g[-1], port_index=2, z0=50.0 * g[-1]))
    circ = Circuit(tuple(els) + ports)
    s21 = lambda f: abs(solve_sparams(circ, f, 0.1e9, 0).fundamental[1, 0])
    if order % 2:
        assert s21(1e9) >= 0.999
    else:
        # even orders put a ripple minimum at the center
        assert abs(s21(1e9) - 10 ** (-0.5 / 20)) < 1e-6
    band = np.linspace(0.95e9, 1.05e9, 801)
    assert max(s21(f) for f in band) >= 0.999


def test_filtered_build_valid():
    p = PRESETS["bandpass-wye-current-filtered"]
    circ = build(p.spec)
    assert validate(circ) == []
    assert sum(1 for e in circ.elements if e.name.startswith("F1.")) == 4
