"""Circuit description types for linear periodically time-varying networks.

A :class:`Circuit` is a flat list of two-terminal elements (plus four-terminal
ideal transformers).  Capacitors may carry a :class:`ModulationLaw`, in which
case their capacitance is a periodic function of time at the modulation
frequency.  Everything here is immutable; the solvers consume these objects
without modifying them.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np

KINDS = (
    "resistor",
    "inductor",
    "capacitor",
    "modulated-capacitor",
    "ideal-transformer",
    "port",
)
LAWS = ("frequency-law", "capacitance-law")

# samples per period for the sampled Fourier expansion of the frequency law
FOURIER_SAMPLES = 8192


class NetlistError(ValueError):
    """Raised when a circuit or modulation law cannot be used as given."""


@dataclass(frozen=True)
class ModulationLaw:
    """Periodic capacitance law.

    ``frequency-law``: ``C(t) = C0 / (1 + depth*cos(wm*t + phase))**2`` so an
    inductor-tuned tank follows ``f0*(1 + depth*cos(...))`` exactly.
    ``capacitance-law``: ``C(t) = C0 * (1 + depth*cos(wm*t + phase))``.
    """

    law: str = "frequency-law"
    depth: float = 0.0
    mod_freq_hz: float = 1.0
    phase_rad: float = 0.0

    def capacitance(self, base_c: float, t):
        theta = 2.0 * np.pi * self.mod_freq_hz * np.asarray(t, dtype=float) + self.phase_rad
        if self.law == "frequency-law":
            return base_c / (1.0 + self.depth * np.cos(theta)) ** 2
        return base_c * (1.0 + self.depth * np.cos(theta))

    def capacitance_rate(self, base_c: float, t):
        """Time derivative dC/dt of :meth:`capacitance`."""
        wm = 2.0 * np.pi * self.mod_freq_hz
        theta = wm * np.asarray(t, dtype=float) + self.phase_rad
        if self.law == "frequency-law":
            return 2.0 * base_c * self.depth * wm * np.sin(theta) / (1.0 + self.depth * np.cos(theta)) ** 3
        return -base_c * self.depth * wm * np.sin(theta)


@dataclass(frozen=True)
class Element:
    kind: str
    node_a: str
    node_b: str
    value: float
    name: str = ""
    port_index: Optional[int] = None
    z0: float = 50.0
    q_factor: Optional[float] = None
    mod: Optional[ModulationLaw] = None
    # secondary winding of an ideal transformer (primary is node_a/node_b)
    node_c: Optional[str] = None
    node_d: Optional[str] = None

    @property
    def label(self) -> str:
        return self.name or f"{self.kind}({self.node_a},{self.node_b})"

    def nodes(self) -> tuple:
        if self.kind == "ideal-transformer":
            return (self.node_a, self.node_b, self.node_c, self.node_d)
        return (self.node_a, self.node_b)


@dataclass(frozen=True)
class Circuit:
    elements: tuple
    ground_node: str = "0"
    label: str = ""
    # frequency at which q_factor losses are referred (tank natural frequency)
    ref_freq_hz: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))

    @property
    def nodes(self) -> list:
        """Non-ground node names in first-appearance order."""
        seen = {}
        for el in self.elements:
            for n in el.nodes():
                if n is not None and n != self.ground_node and n not in seen:
                    seen[n] = None
        return list(seen)

    @property
    def node_count(self) -> int:
        return len(self.nodes) + 1

    @property
    def ports(self) -> list:
        return sorted((e for e in self.elements if e.kind == "port"), key=lambda e: e.port_index)

    @property
    def n_ports(self) -> int:
        return len(self.ports)

    @property
    def mod_freq_hz(self) -> Optional[float]:
        for e in self.elements:
            if e.kind == "modulated-capacitor" and e.mod is not None:
                return e.mod.mod_freq_hz
        return None

    @property
    def max_depth(self) -> float:
        return max(
            (e.mod.depth for e in self.elements if e.kind == "modulated-capacitor" and e.mod is not None),
            default=0.0,
        )

    def with_elements(self, elements: Iterable[Element]) -> "Circuit":
        return replace(self, elements=tuple(elements))

    def with_mod_freq(self, fm: float) -> "Circuit":
        """Copy with every modulation law retimed to ``fm``."""
        return self.with_elements(
            replace(e, mod=replace(e.mod, mod_freq_hz=fm)) if e.mod is not None else e
            for e in self.elements
        )

    def with_depth(self, depth: float) -> "Circuit":
        return self.with_elements(
            replace(e, mod=replace(e.mod, depth=depth)) if e.mod is not None else e
            for e in self.elements
        )

    def mirrored_modulation(self) -> "Circuit":
        """Copy with every modulation phase negated (reversed rotation)."""
        return self.with_elements(
            replace(e, mod=replace(e.mod, phase_rad=-e.mod.phase_rad)) if e.mod is not None else e
            for e in self.elements
        )


def validate(circuit: Circuit) -> list:
    """Return a list of human-readable diagnostics; empty means usable."""
    diags = []
    port_indices = []
    fms = set()
    has_q = False
    for el in circuit.elements:
        tag = el.label
        if el.kind not in KINDS:
            diags.append(f"{tag}: unknown element kind {el.kind!r}")
            continue
        if el.node_a == el.node_b:
            diags.append(f"{tag}: both terminals on node {el.node_a!r}")
        if not (el.value > 0 and math.isfinite(el.value)):
            diags.append(f"{tag}: value must be finite and > 0, got {el.value!r}")
        if el.q_factor is not None:
            has_q = True
            if not el.q_factor > 0:
                diags.append(f"{tag}: q_factor must be > 0, got {el.q_factor!r}")
        if el.kind == "ideal-transformer":
            if el.node_c is None or el.node_d is None:
                diags.append(f"{tag}: transformer needs a secondary (node_c, node_d)")
            elif el.node_c == el.node_d:
                diags.append(f"{tag}: secondary terminals on the same node")
        if el.kind == "port":
            if el.port_index is None or el.port_index < 1:
                diags.append(f"{tag}: port_index must be an integer >= 1")
            else:
                port_indices.append(el.port_index)
            if not el.z0 > 0:
                diags.append(f"{tag}: z0 must be > 0")
        if el.kind == "modulated-capacitor":
            if el.mod is None:
                diags.append(f"{tag}: modulated capacitor without a modulation law")
            else:
                m = el.mod
                if m.law not in LAWS:
                    diags.append(f"{tag}: unknown modulation law {m.law!r}")
                if not 0 <= m.depth < 1:
                    diags.append(f"{tag}: modulation depth {m.depth!r} outside [0, 1)")
                if not m.mod_freq_hz > 0:
                    diags.append(f"{tag}: modulation frequency must be > 0")
                else:
                    fms.add(m.mod_freq_hz)
        elif el.mod is not None:
            diags.append(f"{tag}: only modulated capacitors may carry a modulation law")

    seen = set()
    for p in port_indices:
        if p in seen:
            diags.append(f"duplicate port_index {p}")
        seen.add(p)
    if seen and sorted(seen) != list(range(1, len(seen) + 1)):
        diags.append(f"port indices {sorted(seen)} are not contiguous from 1")
    if len(fms) > 1:
        diags.append(f"modulated capacitors use different modulation frequencies {sorted(fms)}")
    if has_q and not (circuit.ref_freq_hz and circuit.ref_freq_hz > 0):
        diags.append("q_factor given but circuit.ref_freq_hz is not set")
    return diags


def fourier_coefficients(mod: ModulationLaw, base_c: float, k_max: int) -> np.ndarray:
    """Complex Fourier coefficients ``C_k``, k = -k_max..k_max, of the law.

    Convention: ``C(t) = sum_k C_k exp(+j k wm t)``.  Index ``k_max + k`` of
    the returned array holds ``C_k``.
    """
    if k_max < 1:
        raise NetlistError("k_max must be >= 1")
    out = np.zeros(2 * k_max + 1, dtype=complex)
    if mod.depth == 0:
        out[k_max] = base_c
        return out
    if mod.law == "capacitance-law":
        out[k_max] = base_c
        out[k_max + 1] = 0.5 * mod.depth * base_c * np.exp(1j * mod.phase_rad)
        out[k_max - 1] = np.conj(out[k_max + 1])
        return out
    if mod.law != "frequency-law":
        raise NetlistError(f"unknown modulation law {mod.law!r}")
    if not 0 <= mod.depth < 1:
        raise NetlistError(f"frequency law is singular for depth {mod.depth} >= 1")
    n = max(FOURIER_SAMPLES, 8 * k_max)
    theta = 2.0 * np.pi * np.arange(n) / n
    # sample at phase 0 and rotate afterwards: exact equivariance in phase
    samples = base_c / (1.0 + mod.depth * np.cos(theta)) ** 2
    spec = np.fft.fft(samples) / n
    k = np.arange(-k_max, k_max + 1)
    # the phase-0 law is even in time, so its coefficients are real
    out = spec[k % n].real * np.exp(1j * k * mod.phase_rad)
    return out


# -- serialization ------------------------------------------------------------

def _element_to_dict(el: Element) -> dict:
    d = {"kind": el.kind, "nodes": [n for n in el.nodes()], "value": el.value}
    if el.name:
        d["name"] = el.name
    if el.kind == "port":
        d["port_index"] = el.port_index
        d["z0"] = el.z0
    if el.q_factor is not None:
        d["q_factor"] = el.q_factor
    if el.mod is not None:
        d["mod"] = {
            "law": el.mod.law,
            "depth": el.mod.depth,
            "mod_freq_hz": el.mod.mod_freq_hz,
            "phase_rad": el.mod.phase_rad,
        }
    return d


def _element_from_dict(d: dict) -> Element:
    nodes = list(d["nodes"])
    if len(nodes) not in (2, 4):
        raise NetlistError(f"element needs 2 or 4 nodes, got {nodes}")
    mod = d.get("mod")
    return Element(
        kind=d["kind"],
        node_a=nodes[0],
        node_b=nodes[1],
        node_c=nodes[2] if len(nodes) == 4 else None,
        node_d=nodes[3] if len(nodes) == 4 else None,
        value=float(d["value"]),
        name=d.get("name", ""),
        port_index=d.get("port_index"),
        z0=float(d.get("z0", 50.0)),
        q_factor=d.get("q_factor"),
        mod=ModulationLaw(**mod) if mod is not None else None,
    )


def dumps(circuit: Circuit) -> str:
    """Serialize to the JSON netlist schema.

    Top level: ``{"label", "ground_node", "ref_freq_hz", "elements": [...]}``;
    each element: ``{"kind", "nodes": [a, b] or [a, b, c, d], "value",
    "name"?, "port_index"?, "z0"?, "q_factor"?, "mod"?: {"law", "depth",
    "mod_freq_hz", "phase_rad"}}``.  Floats are written with ``repr`` so
    a load/dump cycle is bit-exact.
    """
    doc = {
        "label": circuit.label,
        "ground_node": circuit.ground_node,
        "ref_freq_hz": circuit.ref_freq_hz,
        "elements": [_element_to_dict(e) for e in circuit.elements],
    }
    return json.dumps(doc, indent=1)


def loads(text: str) -> Circuit:
    doc = json.loads(text)
    return Circuit(
        elements=tuple(_element_from_dict(d) for d in doc["elements"]),
        ground_node=doc.get("ground_node", "0"),
        label=doc.get("label", ""),
        ref_freq_hz=doc.get("ref_freq_hz"),
    )
