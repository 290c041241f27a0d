"""Parametric circuit builders for modulated three-port junctions.

Tank placement per topology (node ``t<n>`` is the terminal of port ``n``):

=================  ===========================================================
bandstop / delta   parallel L-C on each loop edge ``t_n -> t_{n+1}``
bandpass / wye     series L-C on each arm ``t_n -> center`` (floating center)
bandstop / wye     parallel L-C on each arm ``t_n -> center``
bandpass / delta   series L-C on each loop edge
=================  ===========================================================

"Bandpass"/"bandstop" name the two-port response of one branch: a series
resonator passes at f0, a parallel resonator in series blocks it.

Tank ``n`` carries modulation phase ``(n-1)*2*pi/3`` (sign flipped for a
counter-rotating bias), unit ``i`` of a multi-unit build adds
``(i-1)*2*pi/N``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .netlist import Circuit, Element, ModulationLaw, NetlistError

RESONANCES = ("bandpass", "bandstop")
CONNECTIONS = ("wye", "delta")
ARRANGEMENTS = ("single-ended", "differential-voltage", "differential-current", "n-way-parallel", "n-way-series")


class BuildError(NetlistError):
    pass


@dataclass(frozen=True)
class JunctionSpec:
    resonance: str = "bandstop"
    connection: str = "delta"
    f0_hz: float = 1e9
    l0: float = 100e-9
    depth: float = 0.0
    fm_hz: float = 0.19e9
    law: str = "frequency-law"
    q_factor: Optional[float] = None  # inductors
    cap_q_factor: Optional[float] = None
    z0: float = 50.0
    # +1: phases increase with tank index, -1: reversed rotation
    bias: int = 1

    @property
    def c0(self) -> float:
        return 1.0 / ((2 * math.pi * self.f0_hz) ** 2 * self.l0)

    def check(self) -> None:
        if self.resonance not in RESONANCES:
            raise BuildError(f"resonance must be one of {RESONANCES}")
        if self.connection not in CONNECTIONS:
            raise BuildError(f"connection must be one of {CONNECTIONS}")
        for name in ("f0_hz", "l0", "fm_hz", "z0"):
            if not getattr(self, name) > 0:
                raise BuildError(f"{name} must be > 0")
        if not 0 <= self.depth < 1:
            raise BuildError("depth must lie in [0, 1)")
        if self.bias not in (1, -1):
            raise BuildError("bias must be +1 or -1")


@dataclass(frozen=True)
class MatchingFilterSpec:
    order: int = 2
    fractional_bw: float = 0.1
    ripple_db: float = 0.5
    center_hz: Optional[float] = None
    # impedance level of the ladder; defaults to the port impedance
    z0: float = 50.0

    def check(self) -> None:
        if not 0 <= self.order <= 6:
            raise BuildError("filter order must be in 0..6")
        if self.order and not 0 < self.fractional_bw < 0.5:
            raise BuildError("fractional_bw must be in (0, 0.5)")
        if self.order and not self.ripple_db > 0:
            raise BuildError("ripple_db must be > 0")


@dataclass(frozen=True)
class ArchitectureSpec:
    junction: JunctionSpec = field(default_factory=JunctionSpec)
    arrangement: str = "single-ended"
    n_ways: int = 1
    filters: Optional[MatchingFilterSpec] = None
    # fractional capacitance error injected into unit 2 (mismatch studies)
    unit2_cap_error: float = 0.0

    def check(self) -> None:
        self.junction.check()
        if self.arrangement not in ARRANGEMENTS:
            raise BuildError(f"arrangement must be one of {ARRANGEMENTS}")
        if self.arrangement.startswith("differential") and self.n_ways != 2:
            raise BuildError("differential arrangements require n_ways = 2")
        if self.arrangement.startswith("n-way") and self.n_ways < 2:
            raise BuildError("n-way arrangements require n_ways >= 2")
        if self.arrangement == "single-ended" and self.n_ways != 1:
            raise BuildError("single-ended arrangement requires n_ways = 1")
        if self.filters is not None:
            self.filters.check()


def modulation_phases(n_ways: int, bias: int = 1) -> np.ndarray:
    """Phase table ``phi[n-1, i-1] = bias*(n-1)*2pi/3 + (i-1)*2pi/N``."""
    if n_ways < 1:
        raise BuildError("N must be >= 1")
    n = np.arange(3)[:, None]
    i = np.arange(n_ways)[None, :]
    return bias * n * 2 * np.pi / 3 + i * 2 * np.pi / n_ways


def _junction_elements(spec: JunctionSpec, prefix: str, terminals: list, phases, scale: float = 1.0,
                       cap_error: float = 0.0) -> list:
    """Tank elements of one junction between the given terminal nodes.

    ``scale`` multiplies every tank impedance (L*scale, C/scale).
    """
    L = spec.l0 * scale
    C = spec.c0 / scale * (1.0 + cap_error)
    els = []
    center = f"{prefix}c"
    for n in range(3):
        if spec.connection == "delta":
            a, b = terminals[n], terminals[(n + 1) % 3]
        else:
            a, b = terminals[n], center
        mod = ModulationLaw(spec.law, spec.depth, spec.fm_hz, float(phases[n]))
        cap_kind = "modulated-capacitor"
        tank = f"{prefix}T{n + 1}"
        series = spec.resonance == "bandpass"
        if series:
            mid = f"{prefix}m{n + 1}"
            els.append(Element("inductor", a, mid, L, name=f"{tank}.L", q_factor=spec.q_factor))
            els.append(Element(cap_kind, mid, b, C, name=f"{tank}.C", q_factor=spec.cap_q_factor, mod=mod))
        else:
            els.append(Element("inductor", a, b, L, name=f"{tank}.L", q_factor=spec.q_factor))
            els.append(Element(cap_kind, a, b, C, name=f"{tank}.C", q_factor=spec.cap_q_factor, mod=mod))
    return els


def _ports(z0: float, terminals: list) -> list:
    return [Element("port", terminals[n], "0", z0, name=f"P{n + 1}", port_index=n + 1, z0=z0) for n in range(3)]


def build_single_ended(spec: JunctionSpec) -> Circuit:
    spec.check()
    terms = ["t1", "t2", "t3"]
    phases = modulation_phases(1, spec.bias)[:, 0]
    els = _junction_elements(spec, "", terms, phases) + _ports(spec.z0, terms)
    return Circuit(tuple(els), label=f"single-ended {spec.resonance}/{spec.connection}", ref_freq_hz=spec.f0_hz)


def _combined(spec: ArchitectureSpec, mode: str, invert_odd: bool) -> Circuit:
    """N units joined through ideal 1:1 transformers.

    ``mode='parallel'``: every unit winding sits across the logical port
    (current combination).  ``mode='series'``: unit windings are stacked
    between the logical terminal and ground (voltage summation).  Unit
    impedances are scaled by N (parallel) or 1/N (series) so the combination
    keeps the single-ended impedance level.
    """
    js = spec.junction
    N = spec.n_ways
    table = modulation_phases(N, js.bias)
    scale = N if mode == "parallel" else 1.0 / N
    els = []
    for i in range(N):
        pre = f"u{i + 1}."
        terms = [f"{pre}t{n + 1}" for n in range(3)]
        err = spec.unit2_cap_error if i == 1 else 0.0
        els += _junction_elements(js, pre, terms, table[:, i], scale=scale, cap_error=err)
        for n in range(3):
            # odd units see an inverted winding (balun) when requested
            inv = invert_odd and i % 2 == 1
            sec = (terms[n], "0") if not inv else ("0", terms[n])
            if mode == "parallel":
                pri = (f"t{n + 1}", "0")
            else:
                top = f"t{n + 1}" if i == 0 else f"s{n + 1}.{i}"
                bot = "0" if i == N - 1 else f"s{n + 1}.{i + 1}"
                pri = (top, bot)
            els.append(Element("ideal-transformer", pri[0], pri[1], 1.0, name=f"{pre}X{n + 1}",
                               node_c=sec[0], node_d=sec[1]))
    els += _ports(js.z0, ["t1", "t2", "t3"])
    return Circuit(tuple(els), label=f"{spec.arrangement} x{N} {js.resonance}/{js.connection}",
                   ref_freq_hz=js.f0_hz)


def build_differential(spec: ArchitectureSpec) -> Circuit:
    spec.check()
    if spec.arrangement not in ("differential-voltage", "differential-current"):
        raise BuildError("build_differential needs a differential arrangement")
    mode = "parallel" if spec.arrangement == "differential-current" else "series"
    return _combined(spec, mode, invert_odd=True)


def build_n_way(spec: ArchitectureSpec) -> Circuit:
    spec.check()
    if spec.arrangement not in ("n-way-parallel", "n-way-series"):
        raise BuildError("build_n_way needs an n-way arrangement")
    mode = "parallel" if spec.arrangement == "n-way-parallel" else "series"
    return _combined(spec, mode, invert_odd=False)


def build(spec: ArchitectureSpec) -> Circuit:
    """Dispatch on the arrangement and attach filters if requested."""
    spec.check()
    if spec.arrangement == "single-ended":
        circ = build_single_ended(spec.junction)
    elif spec.arrangement.startswith("differential"):
        circ = build_differential(spec)
    else:
        circ = build_n_way(spec)
    if spec.filters is not None:
        f = spec.filters
        if f.center_hz is None:
            f = replace(f, center_hz=spec.junction.f0_hz)
        circ = attach_matching_filters(circ, f)
    return circ


# -- matching filters -------------------------------------------------------------

def chebyshev_prototype(order: int, ripple_db: float) -> np.ndarray:
    """Lowpass prototype values g0..g_{n+1} of an equal-ripple ladder."""
    n = order
    beta = math.log(1.0 / math.tanh(ripple_db * math.log(10) / 40))
    gamma = math.sinh(beta / (2 * n))
    a = [math.sin((2 * k - 1) * math.pi / (2 * n)) for k in range(1, n + 1)]
    b = [gamma ** 2 + math.sin(k * math.pi / n) ** 2 for k in range(1, n + 1)]
    g = [1.0, 2 * a[0] / gamma]
    for k in range(2, n + 1):
        g.append(4 * a[k - 2] * a[k - 1] / (b[k - 2] * g[-1]))
    g.append(1.0 if n % 2 else 1.0 / math.tanh(beta / 4) ** 2)
    return np.array(g)


def bandpass_ladder(spec: MatchingFilterSpec, a: str, b: str, prefix: str) -> list:
    """Bandpass ladder between nodes ``a`` (source side) and ``b``.

    Element k of the prototype becomes a series L-C (odd k) or shunt L-C
    (even k) resonator at the center frequency.
    """
    spec.check()
    if spec.order == 0:
        return []
    g = chebyshev_prototype(spec.order, spec.ripple_db)
    w0 = 2 * math.pi * spec.center_hz
    fbw = spec.fractional_bw
    R = spec.z0
    n = spec.order
    els = []
    node = a
    for k in range(1, n + 1):
        gk = g[k]
        if k % 2 == 1:
            Ls = R * gk / (w0 * fbw)
            Cs = fbw / (w0 * R * gk)
            mid = f"{prefix}s{k}"
            # the series branch lands on the far node when nothing follows
            # it or only the final shunt resonator does
            nxt = b if k >= n - 1 else f"{prefix}n{k}"
            els.append(Element("inductor", node, mid, Ls, name=f"{prefix}L{k}"))
            els.append(Element("capacitor", mid, nxt, Cs, name=f"{prefix}C{k}"))
            node = nxt
        else:
            Lp = R * fbw / (w0 * gk)
            Cp = gk / (w0 * R * fbw)
            els.append(Element("inductor", node, "0", Lp, name=f"{prefix}L{k}"))
            els.append(Element("capacitor", node, "0", Cp, name=f"{prefix}C{k}"))
    for e in els:
        if not (e.value > 0 and math.isfinite(e.value)):
            raise BuildError(f"unrealizable filter element {e.label}: {e.value!r}")
    return els


def attach_matching_filters(circuit: Circuit, spec: MatchingFilterSpec) -> Circuit:
    """Insert the same bandpass ladder between each port and the junction."""
    spec.check()
    ports = circuit.ports
    if len(ports) != 3:
        raise BuildError("matching filters need exactly three ports")
    if spec.order == 0:
        return circuit
    if spec.center_hz is None:
        if circuit.ref_freq_hz is None:
            raise BuildError("filter center frequency unknown")
        spec = replace(spec, center_hz=circuit.ref_freq_hz)
    els = [e for e in circuit.elements if e.kind != "port"]
    for p in ports:
        ext = f"ext{p.port_index}"
        els += bandpass_ladder(spec, ext, p.node_a, f"F{p.port_index}.")
        els.append(replace(p, node_a=ext))
    return circuit.with_elements(els)


# -- presets --------------------------------------------------------------------

@dataclass(frozen=True)
class Preset:
    spec: ArchitectureSpec
    target_hz: float
    note: str = ""

    @property
    def untuned(self) -> ArchitectureSpec:
        """Starting point for the tuner: tank on target, moderate depth."""
        j = replace(self.spec.junction, depth=0.1, f0_hz=self.target_hz)
        return replace(self.spec, junction=j)


_BSD = JunctionSpec(resonance="bandstop", connection="delta", l0=2.5e-9, fm_hz=0.19e9)
_BPW = JunctionSpec(resonance="bandpass", connection="wye", l0=80e-9, fm_hz=0.19e9)
_BW_FILTER = MatchingFilterSpec(order=2, fractional_bw=0.08, ripple_db=0.5, center_hz=1e9, z0=25.0)

# depth and tank frequency below are tuner outputs at 1 GHz (default settings)
PRESETS = {
    "bandstop-delta-1ghz": Preset(
        ArchitectureSpec(replace(_BSD, depth=0.2390617047988305, f0_hz=1031007372.202021)),
        1e9, "lossless single-ended"),
    "bandstop-delta-1ghz-q40": Preset(
        ArchitectureSpec(replace(_BSD, depth=0.17814543169075794, f0_hz=1014875429.3374547, q_factor=40.0)),
        1e9, "single-ended, inductor Q = 40, re-tuned"),
    "bandstop-delta-differential": Preset(
        ArchitectureSpec(replace(_BSD, depth=0.2594759847870951, f0_hz=1033706611.4400499),
                         "differential-voltage", 2),
        1e9, "voltage-mode pair"),
    "bandstop-delta-3way": Preset(
        ArchitectureSpec(replace(_BSD, depth=0.2598891755634934, f0_hz=1034184015.437029), "n-way-series", 3),
        1e9, "three stacked units"),
    "bandpass-wye-current": Preset(
        ArchitectureSpec(replace(_BPW, depth=0.14818763579704405, f0_hz=996914857.8663743),
                         "differential-current", 2),
        1e9, "current-mode pair, no filters"),
    "bandpass-wye-current-filtered": Preset(
        ArchitectureSpec(replace(_BPW, depth=0.14818514240973052, f0_hz=996914899.9155473),
                         "differential-current", 2, _BW_FILTER),
        1e9, "current-mode pair with order-2 matching filters"),
}
