"""Floquet-Bloch bands of periodic lattices of modulated three-port atoms.

The lattice state is written in loop charges.  Kirchhoff's current law
(with Bloch factors on the branches that leave the unit cell) restricts
branch charges to the null space of the incidence matrix; inductors give
the kinetic energy and capacitors (static, coupling, modulated) the
potential energy:

    T = 1/2 qdot^H M(k) qdot,     V = 1/2 q^H S(k, t) q.

Loops made only of capacitors carry no inductance; they are eliminated by
minimizing the potential (a Schur complement), which leaves a regular
Hamiltonian system q' = M^-1 p, p' = -S_eff(t) q.  All Bloch phases use
fractional wave vectors, ``exp(j 2 pi (p k1 + q k2))``, so every operator is
exactly periodic over the Brillouin zone.

Modes are reported in a physical basis (inductor branch charges and
currents), which does not depend on the arbitrary null-space basis picked
at each wave vector; Berry phases are computed there.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.integrate import solve_ivp

from .netlist import Circuit, Element, ModulationLaw
from .topologies import JunctionSpec

RTOL = 1e-10
ATOL = 1e-12
UNIT_CIRCLE_TOL = 1e-6
HERMITIAN_TOL = 1e-10
CHERN_RESIDUAL_MAX = 0.05
# band separation below this fraction of the top band counts as a touching
DEGENERACY_TOL = 1e-9
N_TIME_SAMPLES = 64


class LatticeError(RuntimeError):
    pass


@dataclass(frozen=True)
class BlochLattice:
    unit_cell: Circuit
    a1: tuple = (math.sqrt(3) / 2, 1.5)
    a2: tuple = (-math.sqrt(3) / 2, 1.5)
    # (element, (p, q)): element.node_b lives in cell (p, q)
    boundary_branches: tuple = ()
    # per meta-atom bias direction, +1 = CW, -1 = CCW
    bias: tuple = (1, 1)
    # cell index of each element, filled for supercells (ribbon weights)
    cell_of: Optional[dict] = None
    label: str = ""

    @property
    def mod_freq_hz(self) -> Optional[float]:
        return self.unit_cell.mod_freq_hz

    @property
    def is_static(self) -> bool:
        return self.unit_cell.max_depth == 0.0


@dataclass
class BandDiagram:
    k_frac: np.ndarray  # (n_k, 2) fractional wave vectors
    labels: list  # label or "" per k-point
    bands: np.ndarray  # (n_k, n_bands), ascending per row
    kind: str = "static"  # "static" or "floquet"
    # Floquet only: quasi-energies folded into [-fm/2, fm/2), same order as bands
    folded: Optional[np.ndarray] = None
    mod_freq_hz: Optional[float] = None
    localization: Optional[np.ndarray] = None
    wall_flag: Optional[np.ndarray] = None
    centroid: Optional[np.ndarray] = None

    @property
    def gap_report(self) -> list:
        """(lower band, upper band, minimal direct gap over the path)."""
        return [(i, i + 1, float(np.min(self.bands[:, i + 1] - self.bands[:, i])))
                for i in range(self.bands.shape[1] - 1)]

    @property
    def k_distance(self) -> np.ndarray:
        d = np.r_[0.0, np.linalg.norm(np.diff(self.k_frac, axis=0), axis=1)]
        return np.cumsum(d)


# -- construction -------------------------------------------------------------

PRESET_F0 = 1.0
PRESET_DEPTH = 0.1
PRESET_FM_RATIO = 0.15
PRESET_COUPLING_RATIO = 0.2


def preset_meta_atom(depth: float = PRESET_DEPTH) -> JunctionSpec:
    """Normalized bandpass/wye atom: f0 = 1 Hz, L = 1 H."""
    return JunctionSpec(resonance="bandpass", connection="wye", f0_hz=PRESET_F0, l0=1.0,
                        depth=depth, fm_hz=PRESET_FM_RATIO * PRESET_F0, law="frequency-law")


def _atom(spec: JunctionSpec, name: str, bias: int, ground_c: float, f_scale: float = 1.0) -> list:
    els = []
    c0 = spec.c0 / f_scale ** 2
    for n in range(3):
        t, m, ctr = f"{name}.t{n + 1}", f"{name}.m{n + 1}", f"{name}.c"
        els.append(Element("inductor", t, m, spec.l0, name=f"{name}.L{n + 1}"))
        phase = bias * n * 2.0 * math.pi / 3.0
        if spec.depth > 0:
            law = ModulationLaw(spec.law, spec.depth, spec.fm_hz, phase)
            els.append(Element("modulated-capacitor", m, ctr, c0, name=f"{name}.C{n + 1}", mod=law))
        else:
            els.append(Element("capacitor", m, ctr, c0, name=f"{name}.C{n + 1}"))
        els.append(Element("capacitor", t, "0", ground_c, name=f"{name}.Cg{n + 1}"))
    return els


HONEYCOMB_OFFSETS = ((0, 0), (1, 0), (0, 1))


def build_honeycomb(meta_atom: JunctionSpec, coupling_c: float, bias=(1, 1),
                    ground_c: Optional[float] = None, detune_b: float = 1.0) -> BlochLattice:
    """Two wye atoms per cell; arm n of A meets arm n of B in cell n's offset.

    Every arm terminal also sees ``ground_c`` (default: the atom's tank
    capacitance) to ground, which gives the rotating modes of an isolated
    atom a finite resonance.  ``detune_b`` scales the tank frequency of the
    B atom (a static, trivially gapped control).
    """
    meta_atom.check()
    if meta_atom.resonance != "bandpass" or meta_atom.connection != "wye":
        raise LatticeError("the honeycomb builder expects a bandpass/wye meta-atom")
    if isinstance(bias, int):
        bias = (bias, bias)
    cg = meta_atom.c0 if ground_c is None else ground_c
    els = _atom(meta_atom, "A", bias[0], cg) + _atom(meta_atom, "B", bias[1], cg, detune_b)
    boundary = []
    for n, off in enumerate(HONEYCOMB_OFFSETS):
        el = Element("capacitor", f"A.t{n + 1}", f"B.t{n + 1}", coupling_c, name=f"Cc{n + 1}")
        if off == (0, 0):
            els.append(el)
        else:
            boundary.append((el, off))
    cell = Circuit(tuple(els), label="honeycomb cell")
    return BlochLattice(cell, boundary_branches=tuple(boundary), bias=tuple(bias),
                        label=f"honeycomb bias={tuple(bias)}")


def preset_lattice(bias=(1, 1), depth: float = PRESET_DEPTH) -> BlochLattice:
    atom = preset_meta_atom(depth)
    return build_honeycomb(atom, PRESET_COUPLING_RATIO * atom.c0, bias)


def high_symmetry_path(n_per_segment: int = 20) -> tuple:
    """Gamma-K-M-Gamma in fractional coordinates of the reciprocal basis."""
    pts = [("Γ", (0.0, 0.0)), ("K", (1 / 3, -1 / 3)), ("M", (0.5, 0.0)), ("Γ", (0.0, 0.0))]
    ks, labels = [], []
    for (la, a), (_, b) in zip(pts[:-1], pts[1:]):
        for i in range(n_per_segment):
            s = i / n_per_segment
            ks.append((a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])))
            labels.append(la if i == 0 else "")
    ks.append(pts[-1][1])
    labels.append(pts[-1][0])
    return np.array(ks), labels


# -- Bloch operators ----------------------------------------------------------

@dataclass
class _Branches:
    kinds: list
    a: np.ndarray  # node index or -1
    b: np.ndarray
    offset: np.ndarray  # (n_br, 2)
    value: np.ndarray
    mods: list  # ModulationLaw or None
    cells: np.ndarray
    n_nodes: int


def _branches(lat: BlochLattice) -> _Branches:
    gnd = lat.unit_cell.ground_node
    nodes = {}
    items = [(e, (0, 0)) for e in lat.unit_cell.elements] + list(lat.boundary_branches)
    for e, _ in items:
        for n in (e.node_a, e.node_b):
            if n != gnd and n not in nodes:
                nodes[n] = len(nodes)
    kinds, a, b, off, val, mods, cells = [], [], [], [], [], [], []
    for e, o in items:
        if e.kind not in ("inductor", "capacitor", "modulated-capacitor"):
            raise LatticeError(f"{e.label}: lattice cells take only L and C branches")
        kinds.append("L" if e.kind == "inductor" else "C")
        a.append(nodes.get(e.node_a, -1))
        b.append(nodes.get(e.node_b, -1))
        off.append(o)
        val.append(e.value)
        mods.append(e.mod if e.kind == "modulated-capacitor" else None)
        cells.append((lat.cell_of or {}).get(e.name, 0))
    return _Branches(kinds, np.array(a), np.array(b), np.array(off, float), np.array(val),
                     mods, np.array(cells), len(nodes))


def incidence(lat: BlochLattice, k) -> np.ndarray:
    """Bloch incidence matrix (nodes x branches) at fractional wave vector k."""
    br = _branches(lat)
    return _incidence(br, k)


def _incidence(br: _Branches, k) -> np.ndarray:
    D = np.zeros((br.n_nodes, len(br.kinds)), dtype=complex)
    ph = np.exp(-2j * np.pi * (br.offset @ np.asarray(k, float)))
    for j in range(len(br.kinds)):
        if br.a[j] >= 0:
            D[br.a[j], j] += 1.0
        if br.b[j] >= 0:
            D[br.b[j], j] -= ph[j]
    return D


@dataclass
class BlochOperators:
    """Reduced Hamiltonian data at one wave vector."""

    k: np.ndarray
    m_inv: np.ndarray  # inverse mass (massive loop coordinates)
    s0: np.ndarray  # effective elastance with modulated caps at their mean
    w_mod: np.ndarray  # columns: coupling of each modulated cap to the coordinates
    mods: list
    c_mod: np.ndarray
    to_phys: np.ndarray  # loop coordinates -> inductor branch charges
    mass: np.ndarray
    n_dof: int
    exact_split: bool
    _schur: Optional[tuple] = None

    def stiffness(self, t: float) -> np.ndarray:
        if not self.mods:
            return self.s0
        el = np.array([1.0 / m.capacitance(c, t) - 1.0 / c for m, c in zip(self.mods, self.c_mod)])
        if self.exact_split:
            return self.s0 + (self.w_mod * el) @ self.w_mod.conj().T
        # modulated capacitor inside a massless loop: redo the elimination
        S_full, Um, U0, Nc_mod = self._schur
        S = S_full + (Nc_mod.conj().T * el) @ Nc_mod
        saa = Um.conj().T @ S @ Um
        sab = Um.conj().T @ S @ U0
        sbb = U0.conj().T @ S @ U0
        return saa - sab @ np.linalg.solve(sbb, sab.conj().T)


def bloch_operators(lat: BlochLattice, k, _br: Optional[_Branches] = None) -> BlochOperators:
    br = _br or _branches(lat)
    D = _incidence(br, k)
    N = sla.null_space(D)
    isL = np.array([kd == "L" for kd in br.kinds])
    isC = ~isL
    modidx = [j for j in range(len(br.kinds)) if br.mods[j] is not None]
    NL = N[isL]
    M = NL.conj().T @ (br.value[isL][:, None] * NL)
    M = 0.5 * (M + M.conj().T)
    ev, U = np.linalg.eigh(M)
    big = ev > 1e-9 * max(ev.max(), 1e-300)
    Um, U0 = U[:, big], U[:, ~big]
    Nc = N[isC]
    el0 = 1.0 / br.value[isC]
    S = Nc.conj().T @ (el0[:, None] * Nc)
    herm = max(np.max(np.abs(M - M.conj().T)), np.max(np.abs(S - S.conj().T)) / max(np.max(np.abs(S)), 1e-300))
    if herm > HERMITIAN_TOL:
        raise LatticeError(f"non-Hermitian Bloch assembly ({herm:.2e}) at k={tuple(k)}")
    saa = Um.conj().T @ S @ Um
    if U0.shape[1]:
        sab = Um.conj().T @ S @ U0
        sbb = U0.conj().T @ S @ U0
        s_eff = saa - sab @ np.linalg.solve(sbb, sab.conj().T)
    else:
        s_eff = saa
    s_eff = 0.5 * (s_eff + s_eff.conj().T)
    Nmod = N[modidx]
    exact = (not U0.shape[1]) or (not modidx) or np.max(np.abs(Nmod @ U0)) < 1e-12 * max(np.max(np.abs(N)), 1)
    w_mod = (Nmod @ Um).conj().T
    return BlochOperators(
        k=np.asarray(k, float), m_inv=np.diag(1.0 / ev[big]), s0=s_eff, w_mod=w_mod,
        mods=[br.mods[j] for j in modidx], c_mod=br.value[modidx], to_phys=NL @ Um,
        mass=np.diag(ev[big]), n_dof=int(big.sum()), exact_split=bool(exact),
        _schur=(S, Um, U0, Nmod),
    )


# -- static bands -------------------------------------------------------------

def static_frequencies(op: BlochOperators) -> np.ndarray:
    w2 = sla.eigh(op.s0, op.mass, eigvals_only=True)
    if np.min(w2) < -1e-9 * np.max(np.abs(w2)):
        raise LatticeError("negative stiffness eigenvalue in a lossless lattice")
    return np.sqrt(np.maximum(w2, 0.0)) / (2 * np.pi)


def static_bands(lat: BlochLattice, k_path, labels=None, n_bands: Optional[int] = None) -> BandDiagram:
    if not lat.is_static:
        raise LatticeError("static_bands needs depth = 0 everywhere; use floquet_bands")
    br = _branches(lat)
    ks = np.asarray(k_path, float)
    rows = [static_frequencies(bloch_operators(lat, k, br)) for k in ks]
    bands = np.array(rows)
    if n_bands is not None:
        bands = bands[:, :n_bands]
    return BandDiagram(ks, list(labels) if labels is not None else [""] * len(ks), bands)


# -- Floquet ------------------------------------------------------------------

@dataclass
class FloquetModes:
    k: np.ndarray
    quasi: np.ndarray  # folded quasi-energies, ascending by unfolded value
    unfolded: np.ndarray
    vectors: np.ndarray  # physical-basis eigenvectors (columns), unit norm
    cell_weights: Optional[np.ndarray] = None


def monodromy(op: BlochOperators, fm: float, n_samples: int = N_TIME_SAMPLES) -> tuple:
    """Fundamental matrix at ``n_samples`` points of one period plus Phi(T)."""
    n = op.n_dof
    T = 1.0 / fm
    Minv = op.m_inv

    def rhs(t, y):
        X = y.reshape(2 * n, 2 * n)
        Q, P = X[:n], X[n:]
        return np.concatenate([Minv @ P, -op.stiffness(t) @ Q]).ravel()

    t_eval = np.linspace(0.0, T, n_samples + 1)
    sol = solve_ivp(rhs, (0.0, T), np.eye(2 * n, dtype=complex).ravel(), method="DOP853",
                    rtol=RTOL, atol=ATOL, t_eval=t_eval)
    if not sol.success:
        raise LatticeError(f"monodromy integration failed: {sol.message}")
    X = sol.y.T.reshape(-1, 2 * n, 2 * n)
    return t_eval, X


def floquet_modes(op: BlochOperators, fm: float, check_unitary: bool = True) -> FloquetModes:
    n = op.n_dof
    if not op.mods:
        # LTI: exact exponential reduction
        f = static_frequencies(op)
        w2, V = sla.eigh(op.s0, op.mass)
        quasi = _fold(f, fm)
        vec = np.vstack([op.to_phys @ V, op.to_phys @ (1j * 2 * np.pi * f * V)])
        vec /= np.linalg.norm(vec, axis=0)
        return FloquetModes(op.k, quasi, f, vec)
    t, X = monodromy(op, fm)
    Phi = X[-1]
    lam, V = np.linalg.eig(Phi)
    if check_unitary and np.max(np.abs(np.abs(lam) - 1.0)) > UNIT_CIRCLE_TOL:
        raise LatticeError(f"monodromy eigenvalues leave the unit circle by "
                           f"{np.max(np.abs(np.abs(lam) - 1.0)):.2e}; integration inaccurate or lattice unstable")
    Q, P = V[:n], V[n:]
    krein = np.imag(np.sum(Q.conj() * P, axis=0))
    keep = krein > 0
    if keep.sum() != n:
        raise LatticeError("Krein signatures do not split evenly; modes are at a parametric instability")
    lam, V = lam[keep], V[:, keep]
    eps = np.angle(lam) * fm / (2 * np.pi)
    # unfold with the dominant harmonic of each Floquet mode's periodic part
    traj = np.einsum("tij,jm->tim", X[:-1], V)[:, :n, :]  # charges over one period
    phys = np.einsum("pi,tim->tpm", op.to_phys, traj)
    ns = X.shape[0] - 1
    tt = t[:-1]
    u = phys * np.exp(-2j * np.pi * eps[None, None, :] * tt[:, None, None])
    spec = np.sum(np.abs(np.fft.fft(u, axis=0)) ** 2, axis=1)  # (harmonic, mode)
    harm = np.fft.fftfreq(ns, d=1.0 / ns)
    unf = eps + harm[np.argmax(spec, axis=0)] * fm
    quasi = _fold(eps, fm)
    order = np.argsort(unf)
    vec = np.vstack([op.to_phys @ Q[:, keep], op.to_phys @ (op.m_inv @ P[:, keep])])[:, order]
    vec /= np.linalg.norm(vec, axis=0)
    return FloquetModes(op.k, quasi[order], unf[order], vec)


def _fold(x, fm: float) -> np.ndarray:
    return (np.asarray(x) + fm / 2) % fm - fm / 2


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def floquet_bands(lat: BlochLattice, k_path, labels=None, threads: int = 1) -> BandDiagram:
    """Quasi-energy bands.

    ``bands`` holds unfolded values (folded value plus the dominant
    harmonic times fm) so band order and gaps follow the static bands they
    grow out of; ``folded`` holds the same modes folded into [-fm/2, fm/2).
    """
    fm = lat.mod_freq_hz
    if fm is None:
        raise LatticeError("floquet_bands needs a modulated lattice (or pass mod frequency via the cell)")
    br = _branches(lat)
    ks = np.asarray(k_path, float)
    modes = _map(lambda k: floquet_modes(bloch_operators(lat, k, br), fm), ks, threads)
    return BandDiagram(ks, list(labels) if labels is not None else [""] * len(ks),
                       np.array([m.unfolded for m in modes]), kind="floquet",
                       folded=np.array([m.quasi for m in modes]), mod_freq_hz=fm)


# -- topology -----------------------------------------------------------------

@dataclass
class ChernResult:
    value: int
    raw: float
    residual: float
    min_gap: float
    berry_flux: np.ndarray  # (N, N) plaquette fluxes


def _modes_on_grid(lat: BlochLattice, n: int, threads: int = 1) -> list:
    br = _branches(lat)
    fm = lat.mod_freq_hz
    ks = [(i / n, j / n) for i in range(n) for j in range(n)]

    def one(k):
        op = bloch_operators(lat, k, br)
        return floquet_modes(op, fm) if fm else floquet_modes(op, 1.0)

    return _map(one, ks, threads)


def _as_group(b) -> tuple:
    return tuple(sorted(b)) if isinstance(b, (tuple, list, range)) else (int(b),)


def chern_numbers(lat: BlochLattice, bands: Sequence, n: int = 12, threads: int = 1,
                  modes: Optional[list] = None) -> dict:
    """Chern numbers of bands or band groups (0-based, ascending unfolded order).

    An entry of ``bands`` may be a single index or a tuple of adjacent
    indices; a group is treated as one composite bundle (determinant
    links), which only needs the gaps that bound the group to stay open.
    Keys of the result are the tuples.
    """
    if n < 12:
        raise LatticeError("Brillouin-zone grid must be at least 12 x 12")
    modes = modes or _modes_on_grid(lat, n, threads)
    grid = np.empty((n, n), dtype=object)
    for idx, m in enumerate(modes):
        grid[idx // n, idx % n] = m
    out = {}
    for entry in bands:
        grp = _as_group(entry)
        lo_b, hi_b = grp[0], grp[-1]
        if list(grp) != list(range(lo_b, hi_b + 1)):
            raise LatticeError(f"band group {grp} is not contiguous")
        gaps = []
        for m in modes:
            e = m.unfolded
            below = e[lo_b] - e[lo_b - 1] if lo_b > 0 else np.inf
            above = e[hi_b + 1] - e[hi_b] if hi_b + 1 < len(e) else np.inf
            gaps.append(min(below, above))
        min_gap = float(min(gaps))
        scale = max(float(np.max(np.abs(m.unfolded))) for m in modes)
        if min_gap <= DEGENERACY_TOL * scale:
            raise LatticeError(f"bands {grp} are not isolated on the {n}x{n} grid")
        sel = list(grp)

        def v(i, j):
            return grid[i % n, j % n].vectors[:, sel]

        def link(x, y):
            z = np.linalg.det(x.conj().T @ y)
            return z / abs(z)

        flux = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                u1 = link(v(i, j), v(i + 1, j))
                u2 = link(v(i + 1, j), v(i + 1, j + 1))
                u3 = link(v(i + 1, j + 1), v(i, j + 1))
                u4 = link(v(i, j + 1), v(i, j))
                flux[i, j] = np.angle(u1 * u2 * u3 * u4)
        raw = float(flux.sum() / (2 * np.pi))
        val = int(round(raw))
        res = abs(raw - val)
        if res > CHERN_RESIDUAL_MAX:
            raise LatticeError(f"Chern sum {raw:.3f} for bands {grp} is not near an integer; refine the grid")
        out[grp] = ChernResult(val, raw, res, min_gap, flux)
    return out


def chern_number(lat: BlochLattice, band_index, n: int = 12, threads: int = 1) -> int:
    """Chern number of one band, or of a contiguous band group given as a tuple."""
    return chern_numbers(lat, [band_index], n, threads)[_as_group(band_index)].value


# -- ribbons ------------------------------------------------------------------

def ribbon_lattice(lat: BlochLattice, width: int, wall: bool = True, boundary: str = "periodic") -> BlochLattice:
    """Supercell of ``width`` cells stacked along a2, Bloch-periodic along a1.

    With ``wall`` the bias of the upper half (cells >= width/2) is
    reversed.  ``boundary="periodic"`` closes the stack on itself, so the
    only interfaces are bias walls (a second wall then sits at the seam);
    ``"open"`` leaves bare edges.
    """
    if width < 8:
        raise LatticeError("ribbon width must be at least 8 cells")
    if boundary not in ("periodic", "open"):
        raise LatticeError("boundary must be 'periodic' or 'open'")
    els, bnd, cell_of = [], [], {}

    def ren(e: Element, j: int, jb: Optional[int] = None, flip: bool = False) -> Element:
        jb = j if jb is None else jb

        def nm(node, jj):
            return node if node == lat.unit_cell.ground_node else f"{node}@{jj}"

        mod = e.mod
        if mod is not None and flip:
            mod = replace(mod, phase_rad=-mod.phase_rad)
        ne = replace(e, node_a=nm(e.node_a, j), node_b=nm(e.node_b, jb), name=f"{e.name}@{j}", mod=mod)
        cell_of[ne.name] = j
        return ne

    for j in range(width):
        flip = wall and j >= width // 2
        for e in lat.unit_cell.elements:
            els.append(ren(e, j, flip=flip))
        for e, (p, q) in lat.boundary_branches:
            jt = j + q
            if 0 <= jt < width:
                ne = ren(e, j, jt)
                (els.append(ne) if p == 0 else bnd.append((ne, (p, 0))))
            elif boundary == "periodic":
                ne = ren(e, j, jt % width)
                bnd.append((ne, (p, 0)))
    cell = Circuit(tuple(els), ground_node=lat.unit_cell.ground_node, label=f"ribbon W={width}")
    return BlochLattice(cell, lat.a1, lat.a2, tuple(bnd), lat.bias, cell_of,
                        label=f"ribbon W={width} wall={wall} {boundary}")


def ribbon_edge_spectrum(lat: BlochLattice, width: int = 12, wall: bool = True, k_parallel=None,
                         boundary: str = "periodic", threads: int = 1) -> BandDiagram:
    """Floquet spectrum of a ribbon with per-mode localization tags.

    ``localization`` is the inverse participation ratio of the mode's
    weight over cells; ``wall_flag`` marks modes whose weight centroid
    sits within 1.5 cells of the mid-ribbon wall; ``centroid`` is that
    centroid in cell units.
    """
    rib = ribbon_lattice(lat, width, wall, boundary)
    if k_parallel is None:
        k_parallel = np.linspace(0.0, 1.0, 41)
    kp = np.asarray(k_parallel, float)
    ks = np.stack([kp, np.zeros_like(kp)], axis=1)
    br = _branches(rib)
    fm = rib.mod_freq_hz
    isL = np.array([kd == "L" for kd in br.kinds])
    cells_L = br.cells[isL]

    def one(k):
        op = bloch_operators(rib, k, br)
        return floquet_modes(op, fm) if fm else floquet_modes(op, 1.0)

    modes = _map(one, ks, threads)
    nL = int(isL.sum())
    bands, folded, ipr, flag, cen = [], [], [], [], []
    wall_pos = width / 2 - 0.5
    for m in modes:
        w = np.abs(m.vectors[:nL]) ** 2 + np.abs(m.vectors[nL:]) ** 2 / np.maximum(
            (2 * np.pi * m.unfolded[None, :]) ** 2, 1e-300)
        per = np.zeros((width, w.shape[1]))
        np.add.at(per, cells_L, w)
        per /= per.sum(axis=0, keepdims=True)
        ipr.append(np.sum(per ** 2, axis=0))
        # circular centroid for periodic stacks, linear otherwise
        if boundary == "periodic":
            ang = np.angle(np.sum(per * np.exp(2j * np.pi * (np.arange(width)[:, None] + 0.5) / width), axis=0))
            c = (ang % (2 * np.pi)) * width / (2 * np.pi) - 0.5
        else:
            c = np.sum(per * np.arange(width)[:, None], axis=0)
        cen.append(c)
        flag.append(np.abs(c - wall_pos) <= 1.5)
        bands.append(m.unfolded)
        folded.append(m.quasi)
    return BandDiagram(ks, [""] * len(ks), np.array(bands), kind="floquet" if fm else "static",
                       folded=np.array(folded) if fm else None, mod_freq_hz=fm,
                       localization=np.array(ipr), wall_flag=np.array(flag), centroid=np.array(cen))


@dataclass
class EdgeModeReport:
    gap: tuple
    n_traversing: int
    slopes: list  # group-velocity sign per traversing branch
    uniform_sign: bool
    points: list  # (k, value) of in-gap wall-localized modes


def gap_traversing_modes(rib: BandDiagram, gap: tuple, wall_only: bool = True) -> EdgeModeReport:
    """Find branches that cross the bulk gap ``(lo, hi)`` as k sweeps the zone.

    In-gap modes at each k are linked to the nearest in-gap mode at the next
    k; a chain whose values reach the lower and upper quarter of the gap
    counts as traversing.  Its slope sign comes from a least-squares fit of
    value against k.  With ``wall_only`` only modes flagged at the wall take
    part.
    """
    lo, hi = gap
    span = hi - lo
    kx = rib.k_frac[:, 0]
    pts = []
    for i in range(len(kx)):
        e = rib.bands[i]
        sel = (e > lo) & (e < hi)
        if wall_only and rib.wall_flag is not None:
            sel &= rib.wall_flag[i]
        pts.append([(kx[i], float(v)) for v in e[sel]])
    chains = []
    open_chains = []
    for i, row in enumerate(pts):
        new_open = []
        used = set()
        for ch in open_chains:
            last = ch[-1][1]
            best, bj = None, None
            for j, (_, v) in enumerate(row):
                if j in used:
                    continue
                d = abs(v - last)
                if d < 0.25 * span and (best is None or d < best):
                    best, bj = d, j
            if bj is not None:
                used.add(bj)
                ch.append(row[bj])
                new_open.append(ch)
            else:
                chains.append(ch)
        for j, p in enumerate(row):
            if j not in used:
                new_open.append([p])
        open_chains = new_open
    chains.extend(open_chains)
    trav, slopes = 0, []
    for ch in chains:
        vals = np.array([v for _, v in ch])
        if len(ch) >= 3 and vals.min() <= lo + 0.25 * span and vals.max() >= hi - 0.25 * span:
            ks = np.array([k for k, _ in ch])
            s = np.polyfit(ks, vals, 1)[0]
            d = np.sign(np.diff(vals))
            trav += 1
            slopes.append(int(np.sign(s)) if np.all(d == d[0]) else 0)
    uniform = bool(slopes) and all(s == slopes[0] and s != 0 for s in slopes)
    return EdgeModeReport(gap, trav, slopes, uniform, [p for row in pts for p in row])


def bulk_gap(diag: BandDiagram, lower_band: int) -> tuple:
    """Global gap between ``lower_band`` and the next band: (top of lower, bottom of upper)."""
    return float(np.max(diag.bands[:, lower_band])), float(np.min(diag.bands[:, lower_band + 1]))


# -- export -------------------------------------------------------------------

def write_bands_csv(path, diag: BandDiagram, header: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        cols = ["k_label", "k1_frac", "k2_frac", "band_index", "value"]
        if diag.folded is not None:
            cols.append("quasi_energy")
        if diag.localization is not None:
            cols += ["localization_score", "wall"]
        w.writerow(cols)
        for i, k in enumerate(diag.k_frac):
            for b in range(diag.bands.shape[1]):
                row = [diag.labels[i], k[0], k[1], b, diag.bands[i, b]]
                if diag.folded is not None:
                    row.append(diag.folded[i, b])
                if diag.localization is not None:
                    row += [diag.localization[i, b], int(diag.wall_flag[i, b])]
                w.writerow(row)


def write_berry_flux_csv(path, res: ChernResult, header: Sequence[str] = ()) -> None:
    n = res.berry_flux.shape[0]
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["i", "j", "k1_frac", "k2_frac", "berry_flux"])
        for i in range(n):
            for j in range(n):
                w.writerow([i, j, i / n, j / n, res.berry_flux[i, j]])
