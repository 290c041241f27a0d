"""Harmonic (conversion-matrix) modified nodal analysis for LPTV circuits.

Every node voltage, inductor current and transformer current is expanded
on the signed channel frequencies ``f + k*fm``, ``k = -K..K``.  Static
elements stamp channel-diagonal blocks; a modulated capacitor stamps the
conversion matrix ``I_p = j*w_p * sum_q C_{p-q} V_q`` (charge formulation,
``i = d(C v)/dt``).  Ports are Thevenin terminations with a real reference
impedance, identical on every channel, and S-parameters are power-wave
ratios.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .netlist import Circuit, Element, fourier_coefficients, validate

GMIN = 1e-12
# series floor on inductor branches; pins the circulating current of an
# inductor-only loop when one channel lands on 0 Hz
RMIN = 1e-12
K_LADDER_MAX = 24
CONVERGENCE_TOL = 1e-6


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class HarmonicGrid:
    input_freq_hz: float
    mod_freq_hz: float
    k_max: int
    # a channel on 0 Hz is only well posed for circuits with a resistive path
    # at every node; opt in explicitly
    allow_dc: bool = False

    def __post_init__(self):
        if self.k_max < 0:
            raise ValueError("k_max must be >= 0")
        if not self.mod_freq_hz > 0:
            raise ValueError("mod_freq_hz must be > 0")
        if not self.allow_dc:
            for k, fc in zip(self.ks, self.channels):
                if abs(fc) < 1.0:
                    raise ValueError(
                        f"channel k={k} at {fc:.3f} Hz lies within 1 Hz of DC; perturb the input frequency"
                    )

    @property
    def ks(self) -> np.ndarray:
        return np.arange(-self.k_max, self.k_max + 1)

    @property
    def channels(self) -> np.ndarray:
        return self.input_freq_hz + self.ks * self.mod_freq_hz

    @property
    def n_channels(self) -> int:
        return 2 * self.k_max + 1

    def index(self, k: int) -> int:
        return k + self.k_max


@dataclass
class HarmonicSMatrix:
    """Scattering data over (port, channel) pairs.

    ``data[i, j]`` with ``i = (m-1)*(2K+1) + (k+K)`` is the wave leaving port
    ``m`` on channel ``k`` per unit wave entering the port/channel of ``j``.
    """

    grid: HarmonicGrid
    n_ports: int
    data: np.ndarray
    z0: tuple

    def idx(self, port: int, k: int) -> int:
        return (port - 1) * self.grid.n_channels + self.grid.index(k)

    def entry(self, out_port: int, out_k: int, in_port: int, in_k: int = 0) -> complex:
        return self.data[self.idx(out_port, out_k), self.idx(in_port, in_k)]

    def block(self, out_k: int = 0, in_k: int = 0) -> np.ndarray:
        """Port-by-port matrix between two channels (fundamental by default)."""
        rows = [self.idx(m, out_k) for m in range(1, self.n_ports + 1)]
        cols = [self.idx(n, in_k) for n in range(1, self.n_ports + 1)]
        return self.data[np.ix_(rows, cols)]

    @property
    def fundamental(self) -> np.ndarray:
        return self.block(0, 0)


@dataclass
class _Layout:
    nodes: dict
    inductors: list
    transformers: list
    n_unknowns: int


def _elaborate(circuit: Circuit) -> list:
    """Expand lossy capacitors into capacitor + series resistor."""
    out = []
    f_ref = circuit.ref_freq_hz
    for i, el in enumerate(circuit.elements):
        if el.kind in ("capacitor", "modulated-capacitor") and el.q_factor is not None:
            w0 = 2 * math.pi * f_ref
            mid = f"__q{i}"
            out.append(Element("resistor", el.node_a, mid, 1.0 / (w0 * el.value * el.q_factor), name=el.label + ".esr"))
            out.append(Element(el.kind, mid, el.node_b, el.value, name=el.label, mod=el.mod))
        else:
            out.append(el)
    return out


def _inductor_esr(circuit: Circuit, el: Element) -> float:
    if el.q_factor is None:
        return 0.0
    return 2 * math.pi * circuit.ref_freq_hz * el.value / el.q_factor


class HarmonicSystem:
    """Assembled harmonic MNA matrix plus right-hand-side construction."""

    def __init__(self, circuit: Circuit, grid: HarmonicGrid, matrix: np.ndarray, layout: _Layout, ports: list):
        self.circuit = circuit
        self.grid = grid
        self.matrix = matrix
        self.layout = layout
        self.ports = ports

    def _unk(self, node: str) -> Optional[int]:
        if node == self.circuit.ground_node:
            return None
        return self.layout.nodes[node]

    def row(self, k: int, local: int) -> int:
        return self.grid.index(k) * self.layout.n_unknowns + local

    def rhs(self, port: int, k: int, a: complex = 1.0) -> np.ndarray:
        """Source vector for incident power wave ``a`` on ``port`` at channel ``k``."""
        b = np.zeros(self.matrix.shape[0], dtype=complex)
        el = self.ports[port - 1]
        inj = 2.0 * a / math.sqrt(el.z0)
        ia, ib = self._unk(el.node_a), self._unk(el.node_b)
        if ia is not None:
            b[self.row(k, ia)] += inj
        if ib is not None:
            b[self.row(k, ib)] -= inj
        return b

    def port_voltages(self, x: np.ndarray, port: int) -> np.ndarray:
        """Port voltage on every channel from a solution vector (or columns)."""
        el = self.ports[port - 1]
        n = self.layout.n_unknowns
        out = 0
        ia, ib = self._unk(el.node_a), self._unk(el.node_b)
        ks = np.arange(self.grid.n_channels) * n
        if ia is not None:
            out = out + x[ks + ia]
        if ib is not None:
            out = out - x[ks + ib]
        return out


def _layout(circuit: Circuit, elements: list) -> _Layout:
    nodes = {}
    for el in elements:
        for n in el.nodes():
            if n is not None and n != circuit.ground_node and n not in nodes:
                nodes[n] = len(nodes)
    inductors = [el for el in elements if el.kind == "inductor"]
    transformers = [el for el in elements if el.kind == "ideal-transformer"]
    return _Layout(nodes, inductors, transformers, len(nodes) + len(inductors) + len(transformers))


def assemble(circuit: Circuit, grid: HarmonicGrid, gmin: float = GMIN) -> HarmonicSystem:
    diags = validate(circuit)
    if diags:
        raise SolverError("invalid circuit: " + "; ".join(diags))
    elements = _elaborate(circuit)
    lay = _layout(circuit, elements)
    n = lay.n_unknowns
    nch = grid.n_channels
    K = grid.k_max
    omegas = 2 * math.pi * grid.channels
    gnd = circuit.ground_node

    def idx(node):
        return None if node == gnd else lay.nodes[node]

    # channel-independent conductances and static capacitances
    G = np.zeros((n, n), dtype=complex)
    Cs = np.zeros((n, n))
    Lrow = np.zeros((n, n))  # multiplies j*w on branch rows
    modcaps = []

    def stamp2(mat, a, b, val):
        if a is not None:
            mat[a, a] += val
        if b is not None:
            mat[b, b] += val
        if a is not None and b is not None:
            mat[a, b] -= val
            mat[b, a] -= val

    for i in range(len(lay.nodes)):
        G[i, i] += gmin
    ports = [None] * circuit.n_ports
    for el in elements:
        a, b = idx(el.node_a), idx(el.node_b)
        if el.kind == "resistor":
            stamp2(G, a, b, 1.0 / el.value)
        elif el.kind == "port":
            stamp2(G, a, b, 1.0 / el.z0)
            ports[el.port_index - 1] = el
        elif el.kind == "capacitor":
            stamp2(Cs, a, b, el.value)
        elif el.kind == "modulated-capacitor":
            modcaps.append((a, b, el))
    off = len(lay.nodes)
    for j, el in enumerate(lay.inductors):
        r = off + j
        a, b = idx(el.node_a), idx(el.node_b)
        if a is not None:
            G[a, r] += 1.0
            G[r, a] += 1.0
        if b is not None:
            G[b, r] -= 1.0
            G[r, b] -= 1.0
        G[r, r] -= _inductor_esr(circuit, el) + RMIN
        Lrow[r, r] -= el.value
    off += len(lay.inductors)
    for j, el in enumerate(lay.transformers):
        r = off + j
        ratio = el.value
        for node, coef in ((el.node_a, 1.0), (el.node_b, -1.0), (el.node_c, -ratio), (el.node_d, ratio)):
            u = idx(node)
            if u is not None:
                G[u, r] += coef
                G[r, u] += coef

    M = np.zeros((n * nch, n * nch), dtype=complex)
    for p in range(nch):
        sl = slice(p * n, (p + 1) * n)
        M[sl, sl] = G + 1j * omegas[p] * (Cs + Lrow)

    if modcaps:
        kk = np.arange(nch)
        diff = kk[:, None] - kk[None, :]
        for a, b, el in modcaps:
            coeffs = fourier_coefficients(el.mod, el.value, max(2 * K, 1))
            conv = 1j * omegas[:, None] * coeffs[diff + max(2 * K, 1)]
            for u, v, sign in ((a, a, 1), (b, b, 1), (a, b, -1), (b, a, -1)):
                if u is None or v is None:
                    continue
                M[np.ix_(kk * n + u, kk * n + v)] += sign * conv

    return HarmonicSystem(circuit, grid, M, lay, ports)


def _factor(system: HarmonicSystem):
    M = system.matrix
    if not np.all(np.isfinite(M)):
        raise SolverError("non-finite entries in the harmonic MNA matrix")
    lu, piv = sla.lu_factor(M, check_finite=False)
    d = np.abs(np.diag(lu))
    scale = np.max(np.abs(M))
    bad = np.nonzero(d <= scale * 1e-300 + 0.0)[0]
    if bad.size:
        ch = system.grid.ks[bad[0] // system.layout.n_unknowns]
        raise SolverError(f"singular harmonic system at channel k={ch} "
                          f"({system.grid.channels[system.grid.index(ch)]:.6g} Hz)")
    return lu, piv


def solve_sparams(
    circuit: Circuit,
    f: float,
    fm: float,
    k_max: int,
    allow_dc: bool = False,
    in_channels: Optional[Sequence[int]] = None,
) -> HarmonicSMatrix:
    """Harmonic S-matrix at input frequency ``f``.

    ``in_channels`` restricts the excitations that are solved (others are
    left as NaN); by default every port/channel pair is excited.
    """
    grid = HarmonicGrid(f, fm, k_max, allow_dc=allow_dc)
    system = assemble(circuit, grid)
    lu, piv = _factor(system)
    nports = circuit.n_ports
    nch = grid.n_channels
    chans = list(grid.ks) if in_channels is None else list(in_channels)
    cols = [(port, k) for port in range(1, nports + 1) for k in chans]
    B = np.stack([system.rhs(port, k) for port, k in cols], axis=1)
    X = sla.lu_solve((lu, piv), B, check_finite=False)
    if not np.all(np.isfinite(X)):
        raise SolverError(f"non-finite solution at f={f:.6g} Hz")
    data = np.full((nports * nch, nports * nch), np.nan, dtype=complex)
    z0 = tuple(p.z0 for p in system.ports)
    for c, (port, k) in enumerate(cols):
        j = (port - 1) * nch + grid.index(k)
        for m in range(1, nports + 1):
            v = system.port_voltages(X[:, c], m)
            bwave = v / math.sqrt(z0[m - 1])
            if m == port:
                bwave = bwave.copy()
                bwave[grid.index(k)] -= 1.0
            data[(m - 1) * nch:(m) * nch, j] = bwave
    return HarmonicSMatrix(grid, nports, data, z0)


@dataclass
class SweepPoint:
    f: float
    smatrix: Optional[HarmonicSMatrix]
    perturbed: bool = False
    error: Optional[str] = None


@dataclass
class Sweep:
    points: list
    mod_freq_hz: float
    k_max: int

    def __iter__(self) -> Iterator:
        return ((p.f, p.smatrix) for p in self.points)

    def __len__(self):
        return len(self.points)

    @property
    def freqs(self) -> np.ndarray:
        return np.array([p.f for p in self.points])

    @property
    def ok(self) -> list:
        return [p for p in self.points if p.smatrix is not None]

    def trace(self, out_port: int, in_port: int, out_k: int = 0, in_k: int = 0) -> np.ndarray:
        return np.array([
            p.smatrix.entry(out_port, out_k, in_port, in_k) if p.smatrix is not None else np.nan
            for p in self.points
        ])


def _dodge_dc(f: float, fm: float, k_max: int) -> tuple:
    perturbed = False
    for _ in range(1000):
        ch = f + np.arange(-k_max, k_max + 1) * fm
        if np.all(np.abs(ch) >= 1.0):
            return f, perturbed
        f += 1.0
        perturbed = True
    raise SolverError("could not move the input frequency off a DC channel")


def sweep(
    circuit: Circuit,
    f_start: float,
    f_stop: float,
    n_points: int,
    fm: float,
    k_max: int,
    threads: int = 1,
    in_channels: Optional[Sequence[int]] = (0,),
) -> Sweep:
    """Uniform frequency sweep, endpoints included.

    Only fundamental-channel excitations are solved by default (what the
    metrics need); pass ``in_channels=None`` for the full matrix.  Points are
    independent, so ``threads > 1`` evaluates them concurrently with
    bit-identical results.
    """
    if not f_start < f_stop:
        raise ValueError("f_start must be < f_stop")
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    freqs = np.linspace(f_start, f_stop, n_points)

    def run(f0):
        f, moved = _dodge_dc(float(f0), fm, k_max)
        try:
            return SweepPoint(f, solve_sparams(circuit, f, fm, k_max, in_channels=in_channels), moved)
        except SolverError as exc:
            return SweepPoint(f, None, moved, str(exc))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            points = list(pool.map(run, freqs))
    else:
        points = [run(f) for f in freqs]
    return Sweep(points, fm, k_max)


def default_k_max(depth: float) -> int:
    return max(6, math.ceil(8 * depth / 0.1))


@dataclass
class ConvergenceReport:
    k: int
    converged: bool
    history: list = field(default_factory=list)  # (K, max |S_K - S_{K+2}|)


def convergence_order(circuit: Circuit, f: float, fm: float, k_limit: int = K_LADDER_MAX,
                      tol: float = CONVERGENCE_TOL) -> ConvergenceReport:
    """Smallest K whose fundamental block moves by < ``tol`` going to K+2."""
    f, _ = _dodge_dc(f, fm, k_limit + 2)
    cache = {}

    def fund(K):
        if K not in cache:
            cache[K] = solve_sparams(circuit, f, fm, K, in_channels=(0,)).fundamental
        return cache[K]

    history = []
    for K in range(1, k_limit + 1):
        d = float(np.max(np.abs(fund(K) - fund(K + 2))))
        history.append((K, d))
        if d < tol:
            return ConvergenceReport(K, True, history)
    return ConvergenceReport(k_limit, False, history)


# -- export ---------------------------------------------------------------------

def write_touchstone(path, sw: Sweep, header: Sequence[str] = ()) -> None:
    """Fundamental-block export, Touchstone v1, real/imaginary, 50 ohm."""
    lines = [f"! {h}" for h in header]
    lines.append("# Hz S RI R 50")
    for f, S in sw:
        if S is None:
            continue
        blk = S.fundamental
        for m in range(S.n_ports):
            vals = " ".join(f"{z.real:.12e} {z.imag:.12e}" for z in blk[m])
            lines.append(f"{f:.6f} {vals}" if m == 0 else f"  {vals}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_harmonic_csv(path, sw: Sweep, header: Sequence[str] = ()) -> None:
    """Every finite entry as rows of f_hz,out_port,out_k,in_port,in_k,re,im."""
    out = [f"# {h}" for h in header]
    out.append("f_hz,out_port,out_k,in_port,in_k,re,im")
    for f, S in sw:
        if S is None:
            continue
        ks = S.grid.ks
        for n in range(1, S.n_ports + 1):
            for l in ks:
                j = S.idx(n, l)
                if np.isnan(S.data[0, j]):
                    continue
                for m in range(1, S.n_ports + 1):
                    for k in ks:
                        z = S.data[S.idx(m, k), j]
                        out.append(f"{f:.6f},{m},{k},{n},{l},{z.real:.12e},{z.imag:.12e}")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
