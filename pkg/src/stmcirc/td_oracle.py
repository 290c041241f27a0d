"""Brute-force time-domain periodic steady state, used to cross-check the
harmonic solver on small circuits.

The circuit is written as ``d/dt(E(t) x) + G x = B a(t)`` with ``x`` the node
voltages, inductor currents and transformer currents, and ``a(t)`` the
incident port waves.  ``E(t)`` holds the (time-varying) capacitances and
inductances; its null space is fixed by topology, so projecting onto its
range gives an ordinary ODE in the generalized charges/fluxes
``w = P^T E(t) x``.  This route shares nothing with the harmonic assembly
except the modulation-law evaluator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.integrate import solve_ivp

from .hb_engine import HarmonicGrid, HarmonicSMatrix, _elaborate, _inductor_esr
from .netlist import Circuit, validate

RTOL = 1e-10
PERIODIC_TOL = 1e-9
MAX_PERIODS = 10_000


class StateSpaceError(RuntimeError):
    pass


@dataclass
class StateSpaceModel:
    circuit: Circuit
    n_states: int
    P: np.ndarray  # range basis of E
    N: np.ndarray  # w = N s: basis of the constraint-consistent charges/fluxes
    Pi: np.ndarray  # oblique projector enforcing inductor-cutset constraints
    E_static: np.ndarray  # P^T E P without modulated capacitors
    mod_vectors: list  # (P^T incidence, element) per modulated capacitor
    Gs: np.ndarray
    Bs: np.ndarray
    Cy: np.ndarray  # x = Cy @ y + Du @ a
    Du: np.ndarray
    port_rows: list  # (row of node_a or None, row of node_b or None, z0)
    cap_rows: list  # (row a, row b, element) for every capacitor, for audits
    res_rows: list  # (row a, row b, R)
    ind_rows: list  # (state-space row of the current, ESR)

    def e_hat(self, t: float) -> np.ndarray:
        E = self.E_static.copy()
        for v, el in self.mod_vectors:
            E += el.mod.capacitance(el.value, t) * np.outer(v, v)
        return E

    def a_matrix(self, t: float) -> np.ndarray:
        """System matrix of ``s' = A(t) s + B a(t)`` with ``w = N s``."""
        return -self.N.T @ self.Pi @ self.Gs @ np.linalg.solve(self.e_hat(t), self.N)

    @property
    def n_ports(self) -> int:
        return len(self.port_rows)

    def typical_state(self) -> float:
        """Smallest natural charge/flux magnitude under a unit incident wave."""
        z0 = [pr[2] for pr in self.port_rows] or [50.0]
        E = self.e_hat(0.0)
        # inductor rows carry -L on the diagonal, capacitor rows +C
        y = np.where(np.diag(E) < 0, 2.0 / math.sqrt(min(z0)), 2.0 * math.sqrt(max(z0)))
        w = np.abs(E) @ y
        w = w[w > 0]
        return float(w.min()) if w.size else 1.0


def build_state_space(circuit: Circuit) -> StateSpaceModel:
    diags = validate(circuit)
    if diags:
        raise StateSpaceError("invalid circuit: " + "; ".join(diags))
    elements = _elaborate(circuit)
    gnd = circuit.ground_node
    nodes = {}
    for el in elements:
        for nd in el.nodes():
            if nd is not None and nd != gnd and nd not in nodes:
                nodes[nd] = len(nodes)
    inds = [e for e in elements if e.kind == "inductor"]
    xfs = [e for e in elements if e.kind == "ideal-transformer"]
    nn = len(nodes)
    n = nn + len(inds) + len(xfs)

    def idx(nd):
        return None if nd == gnd else nodes[nd]

    def inc(a, b):
        v = np.zeros(n)
        if a is not None:
            v[a] += 1.0
        if b is not None:
            v[b] -= 1.0
        return v

    G = np.zeros((n, n))
    E_struct = np.zeros((n, n))
    E_static = np.zeros((n, n))
    mods = []
    ports = [None] * circuit.n_ports
    caps, ress = [], []
    for el in elements:
        a, b = idx(el.node_a), idx(el.node_b)
        if el.kind in ("resistor", "port"):
            r = el.value if el.kind == "resistor" else el.z0
            v = inc(a, b)
            G += np.outer(v, v) / r
            if el.kind == "port":
                ports[el.port_index - 1] = (a, b, el.z0)
            else:
                ress.append((a, b, r))
        elif el.kind in ("capacitor", "modulated-capacitor"):
            v = inc(a, b)
            E_struct += np.outer(v, v)
            caps.append((a, b, el))
            if el.kind == "capacitor" or el.mod is None or el.mod.depth == 0:
                E_static += el.value * np.outer(v, v)
            else:
                mods.append((v, el))
    ind_rows = []
    for j, el in enumerate(inds):
        r = nn + j
        v = inc(idx(el.node_a), idx(el.node_b))
        G[:nn, r] += v[:nn]
        G[r, :nn] += v[:nn]
        esr = _inductor_esr(circuit, el)
        G[r, r] -= esr
        E_struct[r, r] = 1.0
        E_static[r, r] = -el.value
        ind_rows.append((r, esr))
    for j, el in enumerate(xfs):
        r = nn + len(inds) + j
        for nd, coef in ((el.node_a, 1.0), (el.node_b, -1.0), (el.node_c, -el.value), (el.node_d, el.value)):
            u = idx(nd)
            if u is not None:
                G[u, r] += coef
                G[r, u] += coef

    nl = len(inds)
    B = np.zeros((n, len(ports)))
    for k, (a, b, z0) in enumerate(ports):
        B[:, k] = inc(a, b) * 2.0 / math.sqrt(z0)

    # ideal transformers only tie node voltages together: solve those ties
    # up front (x = T xi) so their currents drop out as multipliers
    nf = nn + nl
    Tn = sla.null_space(G[nf:, :nn]) if xfs else np.eye(nn)
    nr = Tn.shape[1]
    T = np.zeros((nf, nr + nl))
    T[:nn, :nr] = Tn
    T[nn:, nr:] = np.eye(nl)
    G = T.T @ G[:nf, :nf] @ T
    E_struct = T.T @ E_struct[:nf, :nf] @ T
    E_static = T.T @ E_static[:nf, :nf] @ T
    B = T.T @ B[:nf]
    mods = [(T.T @ v[:nf], el) for v, el in mods]
    n = nr + nl

    # null space of E is fixed by topology; build the range basis block-wise
    # so inductor fluxes stay separate from capacitor charges
    Pn = sla.orth(E_struct[:nr, :nr]) if nr else np.zeros((0, 0))
    P = np.zeros((n, Pn.shape[1] + nl))
    P[:nr, :Pn.shape[1]] = Pn
    P[nr:, Pn.shape[1]:] = np.eye(nl)
    Q = sla.null_space(P.T)
    r = P.shape[1]
    n_cap = Pn.shape[1]

    N_basis = np.eye(r)
    proj = np.eye(r)
    manifold = np.eye(r)  # admissible y = E^-1 w
    if Q.shape[1]:
        H = Q.T @ G @ Q
        _, sv, vt = np.linalg.svd(H)
        null = vt[sv <= 1e-9 * max(sv[0], 1.0)].conj().T if sv.size else np.zeros((Q.shape[1], 0))
        Hp = np.linalg.pinv(H, rcond=1e-9)
        Hinv_QG = Hp @ (Q.T @ G @ P)
        Hinv_QB = Hp @ (Q.T @ B)
        Gs = P.T @ G @ P - P.T @ G @ Q @ Hinv_QG
        Bs = P.T @ B - P.T @ G @ Q @ Hinv_QB
        Cy = P - Q @ Hinv_QG
        Du = Q @ Hinv_QB
        if null.shape[1]:
            # a free algebraic direction z either floats harmlessly (g = 0)
            # or its KCL row is a constraint g^T y = 0 on the states, with
            # z's voltage acting as the multiplier
            Z = Q @ null
            g = P.T @ G @ Z
            _, gs, gvt = np.linalg.svd(g, full_matrices=False)
            live = gvt[gs > 1e-9 * max(np.max(np.abs(G)), 1.0)].T
            Z, g = Z @ live, g @ live
        if null.shape[1] and Z.shape[1]:
            ok = (np.max(np.abs(Z.T @ B)) <= 1e-9 * max(np.max(np.abs(B)), 1.0)
                  and np.max(np.abs(g[:n_cap])) <= 1e-9 * max(np.max(np.abs(g)), 1.0))
            if not ok:
                bad = T @ Z[:, 0]
                names = [nd for nd, i in nodes.items() if abs(bad[i]) > 1e-6]
                involved = sorted({e.label for e in elements if any(x in names for x in e.nodes())})
                raise StateSpaceError(
                    "degenerate topology (inductor-only cutset reaching a port or a capacitor constraint) "
                    f"at nodes {names}; elements involved: {involved}"
                )
            # y_L = -L^-1 w_L on the static inductor block
            Lblk = -(P.T @ E_static @ P)[n_cap:, n_cap:]
            h = np.zeros_like(g)
            h[n_cap:] = -np.linalg.solve(Lblk, g[n_cap:])
            proj = np.eye(r) - g @ np.linalg.solve(h.T @ g, h.T)
            N_basis = sla.null_space(h.T)
            manifold = sla.null_space(g.T)
    else:
        Gs, Bs, Cy, Du = P.T @ G @ P, P.T @ B, P, np.zeros((n, len(ports)))

    # charges of floating capacitive islands are conserved and undriven;
    # starting from rest they stay zero, so drop them from the state
    drive = N_basis.T @ proj @ np.hstack([Gs @ manifold, Bs])
    kept = sla.null_space(sla.null_space(drive.T).T)
    N_basis = N_basis @ kept

    return StateSpaceModel(
        circuit=circuit,
        n_states=N_basis.shape[1],
        P=P,
        N=N_basis,
        Pi=proj,
        E_static=P.T @ E_static @ P,
        mod_vectors=[(P.T @ v, el) for v, el in mods],
        Gs=Gs,
        Bs=Bs,
        Cy=T @ Cy,
        Du=T @ Du,
        port_rows=ports,
        cap_rows=caps,
        res_rows=ress,
        ind_rows=[(row, esr) for row, esr in ind_rows],
    )


@dataclass
class SteadyState:
    """One common period of periodic steady state for a set of real drives."""

    t: np.ndarray
    y: np.ndarray  # (n_samples, rank E, n_runs) of y = E^-1 w
    a: np.ndarray  # (n_samples, n_ports, n_runs) incident waves
    x: np.ndarray  # (n_samples, n_unknowns, n_runs)
    periods: int


def _common_period(f: float, fm: float, max_den: int = 64) -> tuple:
    ratio = Fraction(f / fm).limit_denominator(max_den)
    if abs(float(ratio) - f / fm) > 1e-12 * f / fm:
        raise StateSpaceError(f"f/fm = {f / fm!r} is not rational with denominator <= {max_den}")
    return ratio.numerator, ratio.denominator


def periodic_steady_state(model: StateSpaceModel, drives, f: float, fm: float, n_samples: int,
                          max_periods: int = MAX_PERIODS) -> SteadyState:
    """Integrate until the state repeats over the common period.

    ``drives`` is a list of ``(port, phase)``: run ``r`` drives ``port`` with
    ``a(t) = cos(2 pi f t - phase)``.
    """
    p, q = _common_period(f, fm)
    T = q / fm
    w_ = 2 * math.pi * f
    nr = len(drives)
    r = model.n_states
    sel = np.zeros((model.n_ports, nr))
    ph = np.zeros(nr)
    for j, (port, phase) in enumerate(drives):
        sel[port - 1, j] = 1.0
        ph[j] = phase
    BsS = model.Bs @ sel
    NP = model.N.T @ model.Pi
    Nb = model.N

    def rhs(t, sflat):
        Y = np.linalg.solve(model.e_hat(t), Nb @ sflat.reshape(r, nr))
        return (NP @ (-model.Gs @ Y + BsS * np.cos(w_ * t - ph))).ravel()

    w0 = np.zeros(r * nr)
    t0 = 0.0
    # absolute tolerance from physical magnitudes: a run that starts from
    # rest with zero forcing would otherwise crawl
    scale = model.typical_state()
    for period in range(1, max_periods + 1):
        sol = solve_ivp(rhs, (t0, t0 + T), w0, method="DOP853", rtol=RTOL, atol=RTOL * scale + 1e-300)
        if not sol.success:
            raise StateSpaceError(f"integration failed: {sol.message}")
        w1 = sol.y[:, -1]
        scale = max(scale, float(np.max(np.abs(w1))))
        if np.max(np.abs(w1 - w0)) < PERIODIC_TOL * scale:
            break
        w0, t0 = w1, t0 + T
    else:
        raise StateSpaceError(f"no periodic steady state after {max_periods} periods (marginal stability?)")

    ts = t0 + T * np.arange(n_samples) / n_samples
    sol = solve_ivp(rhs, (t0, t0 + T), w0, method="DOP853", rtol=RTOL, atol=RTOL * scale, t_eval=ts)
    S = sol.y.T.reshape(n_samples, r, nr)
    Y = np.stack([np.linalg.solve(model.e_hat(t), Nb @ S[i]) for i, t in enumerate(ts)])
    A = sel[None, :, :] * np.cos(w_ * ts[:, None, None] - ph[None, None, :])
    X = np.einsum("ij,sjr->sir", model.Cy, Y) + np.einsum("ij,sjr->sir", model.Du, A)
    return SteadyState(ts, Y, A, X, period)


def _port_voltage(model: StateSpaceModel, X: np.ndarray, port: int) -> np.ndarray:
    a, b, _ = model.port_rows[port - 1]
    v = 0
    if a is not None:
        v = v + X[:, a]
    if b is not None:
        v = v - X[:, b]
    return v


def psss_sparams(model: StateSpaceModel, f: float, fm: float, k_max: int,
                 in_ports: Optional[list] = None, n_samples: Optional[int] = None) -> HarmonicSMatrix:
    """Fundamental-excitation columns of the harmonic S-matrix.

    Each port is driven with a cosine and a sine run; their combination
    ``r_cos + j r_sin`` is the response to ``exp(j w t)``, whose spectrum
    over one common period holds only the channels ``f + k fm``.
    """
    p, q = _common_period(f, fm)
    grid = HarmonicGrid(f, fm, k_max, allow_dc=True)
    nports = model.n_ports
    in_ports = list(range(1, nports + 1)) if in_ports is None else list(in_ports)
    if n_samples is None:
        n_samples = 1 << max(10, math.ceil(math.log2(8 * (p + 3 * k_max * q + 1))))
    drives = [(port, phase) for port in in_ports for phase in (0.0, math.pi / 2)]
    ss = periodic_steady_state(model, drives, f, fm, n_samples)
    nch = grid.n_channels
    data = np.full((nports * nch, nports * nch), np.nan, dtype=complex)
    bins = (p + grid.ks * q) % n_samples
    for j, port in enumerate(in_ports):
        col = (port - 1) * nch + grid.index(0)
        for m in range(1, nports + 1):
            v = _port_voltage(model, ss.x, m)
            z0 = model.port_rows[m - 1][2]
            b = v / math.sqrt(z0) - ss.a[:, m - 1, :]
            bc = b[:, 2 * j] + 1j * b[:, 2 * j + 1]
            spec = np.fft.fft(bc) / n_samples
            data[(m - 1) * nch:m * nch, col] = spec[bins]
    z0s = tuple(pr[2] for pr in model.port_rows)
    return HarmonicSMatrix(grid, nports, data, z0s)


def energy_audit(model: StateSpaceModel, f: float, fm: float, port: int = 1, n_samples: int = 4096) -> dict:
    """Cycle-averaged power balance for a cosine drive on ``port``.

    Returns source power into the circuit, power burnt in terminations and
    internal resistors, power drawn from the modulation and the relative
    residual of ``source + pump = dissipated``.
    """
    ss = periodic_steady_state(model, [(port, 0.0)], f, fm, n_samples)
    X = ss.x[:, :, 0]
    src = term = 0.0
    for m in range(1, model.n_ports + 1):
        z0 = model.port_rows[m - 1][2]
        v = _port_voltage(model, ss.x, m)[:, 0]
        e = 2 * math.sqrt(z0) * ss.a[:, m - 1, 0]
        i = (e - v) / z0
        src += np.mean(e * i)
        term += np.mean(i * i * z0)
    internal = 0.0
    for a, b, R in model.res_rows:
        va = X[:, a] if a is not None else 0
        vb = X[:, b] if b is not None else 0
        internal += np.mean((va - vb) ** 2 / R)
    for row, esr in model.ind_rows:
        internal += np.mean(X[:, row] ** 2 * esr)
    pump = 0.0
    for a, b, el in model.cap_rows:
        if el.kind != "modulated-capacitor" or el.mod is None:
            continue
        va = X[:, a] if a is not None else 0
        vb = X[:, b] if b is not None else 0
        v = va - vb
        pump -= np.mean(0.5 * v * v * el.mod.capacitance_rate(el.value, ss.t))
    residual = (src + pump - term - internal) / max(abs(src), abs(term), 1e-300)
    return {"source": src, "terminations": term, "internal": internal, "pump": pump, "residual": residual}


def write_waveforms(path, model: StateSpaceModel, ss: SteadyState, run: int = 0) -> None:
    """Debug dump: t, state vector, port voltages for one run."""
    hdr = ["t"] + [f"y{i}" for i in range(ss.y.shape[1])] + [f"v{m}" for m in range(1, model.n_ports + 1)]
    rows = [",".join(hdr)]
    vs = [_port_voltage(model, ss.x, m)[:, run] for m in range(1, model.n_ports + 1)]
    for s, t in enumerate(ss.t):
        vals = [f"{t:.15e}"] + [f"{v:.12e}" for v in ss.y[s, :, run]] + [f"{v[s]:.12e}" for v in vs]
        rows.append(",".join(vals))
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
