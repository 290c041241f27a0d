import math

import numpy as np
import pytest

from stmcirc.hb_engine import (
    GMIN,
    HarmonicGrid,
    SolverError,
    assemble,
    convergence_order,
    default_k_max,
    solve_sparams,
    sweep,
    write_harmonic_csv,
    write_touchstone,
)
from stmcirc.netlist import Circuit, Element, ModulationLaw
from stmcirc.topologies import JunctionSpec, build_single_ended

F0 = 1e9
FM = 0.19e9


def _junction(depth=0.1, **kw):
    return build_single_ended(JunctionSpec(l0=2.5e-9, depth=depth, fm_hz=FM, **kw))


def _two_port(series: Element) -> Circuit:
    return Circuit((Element("port", "a", "0", 50.0, port_index=1), series,
                    Element("port", "b", "0", 50.0, port_index=2)))


def test_grid_channels_ordered():
    g = HarmonicGrid(1e9, 0.2e9, 2)
    np.testing.assert_allclose(g.channels, [0.6e9, 0.8e9, 1e9, 1.2e9, 1.4e9])
    with pytest.raises(ValueError, match="k=-5"):
        HarmonicGrid(1e9, 0.2e9, 5)


def test_static_capacitor_block_is_diagonal():
    c = Circuit((Element("capacitor", "a", "0", 1e-12),))
    M = assemble(c, HarmonicGrid(1e9, 0.2e9, 1)).matrix
    w = 2 * np.pi * np.array([0.8e9, 1.0e9, 1.2e9])
    np.testing.assert_allclose(M, np.diag(GMIN + 1j * w * 1e-12), rtol=1e-15)
    assert abs(M[0, 0] - 5.0265e-3j) < 1e-7


def test_capacitance_law_off_diagonal():
    mod = ModulationLaw("capacitance-law", 0.2, 0.2e9, 0.0)
    c = Circuit((Element("modulated-capacitor", "a", "0", 1e-12, mod=mod),))
    M = assemble(c, HarmonicGrid(1e9, 0.2e9, 1)).matrix
    w = 2 * np.pi * np.array([0.8e9, 1.0e9, 1.2e9])
    for p in range(3):
        for q in range(3):
            want = {0: GMIN + 1j * w[p] * 1e-12, 1: 1j * w[p] * 0.1e-12}.get(abs(p - q), 0.0)
            assert abs(M[p, q] - want) < 1e-18


def test_series_inductor_matches_hand_two_port():
    L, f = 3e-9, 1.3e9
    S = solve_sparams(_two_port(Element("inductor", "a", "b", L)), f, 0.2e9, 2).fundamental
    z = 2j * np.pi * f * L
    # closed form for a series impedance between two 50-ohm ports
    np.testing.assert_allclose(S[1, 0], 100 / (100 + z), atol=1e-9)
    np.testing.assert_allclose(S[0, 0], z / (100 + z), atol=1e-9)


def test_shunt_capacitor_phase():
    c = Circuit((Element("port", "a", "0", 50.0, port_index=1), Element("capacitor", "a", "0", 1e-12)))
    s11 = solve_sparams(c, 1e9, 0.2e9, 1).fundamental[0, 0]
    assert abs(abs(s11) - 1.0) < 1e-9
    assert abs(np.angle(s11) - (-2 * math.atan(2 * math.pi * 1e9 * 1e-12 * 50))) < 1e-9
    assert abs(np.angle(s11) + 0.608792) < 1e-6


def test_through_connection():
    S = solve_sparams(_two_port(Element("resistor", "a", "b", 1e-9)), 1e9, 0.2e9, 1).fundamental
    assert abs(S[1, 0]) >= 0.999999 and abs(S[0, 0]) <= 1e-4


@pytest.mark.parametrize("f", [0.7e9, 1.0e9, 1.37e9])
def test_unmodulated_reciprocal_and_lossless(f):
    S = solve_sparams(_junction(0.0), f, FM, 2)
    fund = S.fundamental
    assert np.max(np.abs(fund - fund.T)) < 1e-10
    assert np.max(np.abs(fund.conj().T @ fund - np.eye(3))) < 1e-8
    assert np.max(np.abs(S.data - S.data.T)) < 1e-10


def test_depth_zero_decouples_channels():
    S = solve_sparams(_junction(0.0), 1.05e9, FM, 3)
    nch = 7
    ch = np.tile(np.arange(nch), 3)
    inter = ch[:, None] != ch[None, :]
    assert np.max(np.abs(S.data[inter])) < 1e-12


def test_modulated_junction_is_nonreciprocal():
    fund = solve_sparams(_junction(0.2), 1.0e9, FM, 8, in_channels=(0,)).fundamental
    assert np.max(np.abs(fund - fund.T)) > 0.1


def test_reversed_modulation_transposes_weighted_by_channel_frequency():
    c = _junction(0.2)
    S = solve_sparams(c, 1.01e9, FM, 6)
    Sm = solve_sparams(c.mirrored_modulation(), 1.01e9, FM, 6).data
    w = np.tile(S.grid.channels, 3)
    assert np.max(np.abs(Sm - (w[:, None] / w[None, :]) * S.data.T)) < 1e-9


def test_real_signal_conjugate_symmetry():
    c = _junction(0.15)
    K = 4
    nch = 2 * K + 1
    S = solve_sparams(c, 1.01e9, FM, K).data
    Sn = solve_sparams(c, -1.01e9, FM, K).data
    flip = np.array([(m * nch) + (nch - 1 - k) for m in range(3) for k in range(nch)])
    assert np.max(np.abs(S - np.conj(Sn[np.ix_(flip, flip)]))) < 1e-9


def test_modulated_lossless_power_balance():
    # a pumped lossless network conserves sum_k |b_k|^2 / w_k (photon flux)
    S = solve_sparams(_junction(0.1), 1.01e9, FM, 10, in_channels=(0,))
    w = S.grid.channels
    col = S.idx(1, 0)
    flux = sum(np.sum(np.abs(S.data[S.idx(m, -10):S.idx(m, 10) + 1, col]) ** 2 / w) for m in (1, 2, 3))
    assert abs(flux * 1.01e9 - 1.0) < 1e-6


def test_sweep_endpoints_and_pointwise_equality():
    c = _junction(0.1)
    sw = sweep(c, 0.9e9, 1.1e9, 2, FM, 4)
    assert list(sw.freqs) == [0.9e9, 1.1e9]
    for f, S in sw:
        ref = solve_sparams(c, f, FM, 4, in_channels=(0,))
        assert np.array_equal(S.fundamental, ref.fundamental)


def test_sweep_threads_bit_identical():
    c = _junction(0.1)
    a = sweep(c, 0.9e9, 1.1e9, 9, FM, 4, threads=1)
    b = sweep(c, 0.9e9, 1.1e9, 9, FM, 4, threads=3)
    for (fa, Sa), (fb, Sb) in zip(a, b):
        assert fa == fb
        assert np.array_equal(Sa.data, Sb.data, equal_nan=True)


def test_sweep_dodges_dc_channel():
    sw = sweep(_junction(0.1), 0.95e9, 1.045e9, 2, 0.19e9, 6)
    p0, p1 = sw.points
    # 0.95 GHz = 5 fm puts channel k=-5 on DC
    assert p0.perturbed and p0.f == 0.95e9 + 1.0 and p0.smatrix is not None
    assert not p1.perturbed and p1.f == 1.045e9


def test_truncation_drift_k6_vs_k10():
    c = _junction(0.1)
    a = solve_sparams(c, 1.0e9, FM, 6, in_channels=(0,)).fundamental
    b = solve_sparams(c, 1.0e9, FM, 10, in_channels=(0,)).fundamental
    assert np.max(np.abs(a - b)) < 1e-4


def test_convergence_order_ladder():
    assert convergence_order(_junction(0.0), F0, FM).k == 1
    small = convergence_order(_junction(0.05), F0, FM)
    large = convergence_order(_junction(0.3), F0, FM)
    assert small.converged and small.k <= 6
    assert large.k > small.k
    for d in (0.05, 0.1, 0.2):
        hist = [h for _, h in convergence_order(_junction(d), F0, FM).history]
        assert all(b <= a for a, b in zip(hist[1:], hist[2:]))


def test_convergence_reports_non_convergence():
    rep = convergence_order(_junction(0.3), F0, FM, k_limit=3)
    assert not rep.converged and rep.k == 3 and len(rep.history) == 3


def test_default_k_max():
    assert default_k_max(0.0) == 6
    assert default_k_max(0.1) == 8
    assert default_k_max(0.25) == 20


def test_invalid_circuit_raises():
    bad = Circuit((Element("port", "a", "0", 50.0, port_index=2),))
    with pytest.raises(SolverError, match="contiguous"):
        solve_sparams(bad, 1e9, 0.2e9, 1)


def test_exports(tmp_path):
    sw = sweep(_junction(0.1), 0.9e9, 1.1e9, 3, FM, 2)
    write_touchstone(tmp_path / "x.s3p", sw, ["hdr"])
    lines = (tmp_path / "x.s3p").read_text().splitlines()
    assert lines[0] == "! hdr" and lines[1] == "# Hz S RI R 50"
    assert len(lines) == 2 + 3 * 3
    write_harmonic_csv(tmp_path / "x.csv", sw)
    rows = (tmp_path / "x.csv").read_text().splitlines()
    assert rows[0] == "f_hz,out_port,out_k,in_port,in_k,re,im"
    # fundamental excitations only: 3 freqs x 3 inputs x 3 outputs x 5 channels
    assert len(rows) == 1 + 3 * 3 * 3 * 5
