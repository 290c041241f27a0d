"""Circulator figures of merit, ideal three-port algebra, and the tuner."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import minimize

from .hb_engine import (
    HarmonicGrid,
    HarmonicSMatrix,
    K_LADDER_MAX,
    Sweep,
    SweepPoint,
    _dodge_dc,
    default_k_max,
    solve_sparams,
)
from .netlist import Circuit
from .topologies import ArchitectureSpec, JunctionSpec, build, build_single_ended

IX_CAP_DB = 200.0
BW_THRESHOLD_DB = 20.0
TIE_DB = 0.01
UNTUNED_DB = 20.0
IL_LIMIT_DB = 6.0

_W = np.exp(2j * np.pi / 3)


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class CirculatorMetrics:
    f0_hz: float
    il_db: float
    rl_db: float
    ix_db: float
    bw20_frac: float
    worst_imp_dbc: float
    direction: str
    # where the worst IMP sits: (port, k); not part of the flat export
    worst_imp_at: tuple = field(default=(0, 0), compare=False)
    ambiguous: bool = field(default=False, compare=False)

    def to_dict(self) -> dict:
        keys = ("f0_hz", "il_db", "rl_db", "ix_db", "bw20_frac", "worst_imp_dbc", "direction")
        return {k: getattr(self, k) for k in keys}


def _db(x) -> np.ndarray:
    return -20.0 * np.log10(np.maximum(np.abs(x), 1e-300))


def _capped(x):
    return np.minimum(_db(x), IX_CAP_DB)


def ideal_circulator_s(direction: str = "1→2→3") -> np.ndarray:
    """Ideal lossless circulator matrix (power goes 1→2, 2→3, 3→1 by default)."""
    if direction in ("1→2→3", "123"):
        return np.array([[0, 0, 1], [1, 0, 0], [0, 1, 0]], dtype=complex)
    if direction in ("1→3→2", "132"):
        return np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=complex)
    raise AnalysisError(f"unknown direction {direction!r}")


def synthetic_sweep(freqs: Sequence[float], s_of_f: Callable[[float], np.ndarray],
                    mod_freq_hz: float = 1.0) -> Sweep:
    """Wrap plain 3x3 matrices as a one-channel-deep harmonic sweep.

    Conversion channels are filled with zeros; handy for checking metrics
    against hand-made S-matrices.
    """
    pts = []
    for f in freqs:
        f_eff, _ = _dodge_dc(float(f), mod_freq_hz, 1)
        grid = HarmonicGrid(f_eff, mod_freq_hz, 1)
        s = np.asarray(s_of_f(f), dtype=complex)
        n = s.shape[0]
        data = np.zeros((3 * n, 3 * n), dtype=complex)
        hs = HarmonicSMatrix(grid, n, data, (50.0,) * n)
        for o in range(n):
            for i in range(n):
                data[hs.idx(o + 1, 0), hs.idx(i + 1, 0)] = s[o, i]
        pts.append(SweepPoint(float(f), hs))
    return Sweep(pts, mod_freq_hz, 1)


def _interp_band(freqs: np.ndarray, ix: np.ndarray, i0: int, f0: float, level: float) -> tuple:
    """Edges of the contiguous region around index i0 where ix >= level."""
    lo = freqs[0]
    for i in range(i0, 0, -1):
        if ix[i - 1] < level:
            a, b = ix[i - 1], ix[i]
            lo = freqs[i - 1] + (level - a) / (b - a) * (freqs[i] - freqs[i - 1])
            break
    hi = freqs[-1]
    for i in range(i0, len(freqs) - 1):
        if ix[i + 1] < level:
            a, b = ix[i], ix[i + 1]
            hi = freqs[i] + (a - level) / (a - b) * (freqs[i + 1] - freqs[i])
            break
    return max(lo, freqs[0]), min(hi, freqs[-1])


def metrics_from_sweep(sw: Sweep, f0: float, input_port: int = 1, through_port: int = 2,
                       isolated_port: int = 3) -> CirculatorMetrics:
    """Single-frequency figures at ``f0`` plus the 20-dB isolation bandwidth.

    Values at ``f0`` are linearly interpolated (in dB) between the two
    bracketing sweep points.  The IMP search uses the sweep point nearest
    to ``f0``.
    """
    pts = sw.ok
    if not pts:
        raise AnalysisError("sweep has no solved points")
    freqs = np.array([p.f for p in pts])
    order = np.argsort(freqs)
    freqs = freqs[order]
    pts = [pts[i] for i in order]
    tol = 1e-9 * max(abs(f0), 1.0)
    if not (freqs[0] - tol <= f0 <= freqs[-1] + tol):
        raise AnalysisError(f"f0 = {f0:g} Hz lies outside the sweep [{freqs[0]:g}, {freqs[-1]:g}] Hz")

    def trace(o, i):
        return np.array([p.smatrix.entry(o, 0, i, 0) for p in pts])

    thr = trace(through_port, input_port)
    iso = trace(isolated_port, input_port)
    refl = trace(input_port, input_port)
    il_t, rl_t, ix_t = _db(thr), np.minimum(_db(refl), IX_CAP_DB), _capped(iso)

    def at_f0(y):
        return float(np.interp(f0, freqs, y)) if len(freqs) > 1 else float(y[0])

    il, rl, ix = at_f0(il_t), at_f0(rl_t), at_f0(ix_t)

    i0 = int(np.argmin(np.abs(freqs - f0)))
    if ix < BW_THRESHOLD_DB or len(freqs) < 2:
        bw = 0.0
    else:
        # start from a point inside the band; i0 may sit just outside it
        if ix_t[i0] < BW_THRESHOLD_DB:
            j = i0 + 1 if freqs[i0] < f0 else i0 - 1
            i0 = min(max(j, 0), len(freqs) - 1)
        lo, hi = _interp_band(freqs, ix_t, i0, f0, BW_THRESHOLD_DB)
        bw = max(0.0, (hi - lo) / f0)

    p0 = pts[i0].smatrix
    ref = abs(p0.entry(through_port, 0, input_port, 0))
    worst, where = -math.inf, (0, 0)
    K = p0.grid.k_max
    for m in range(1, p0.n_ports + 1):
        for k in range(-K, K + 1):
            if k == 0:
                continue
            v = abs(p0.entry(m, k, input_port, 0))
            dbc = 20.0 * math.log10(max(v, 1e-300) / max(ref, 1e-300))
            if dbc > worst:
                worst, where = dbc, (m, k)
    if K == 0 or not math.isfinite(worst):
        worst = -IX_CAP_DB

    s21 = at_f0(_db(trace(2, 1)))
    s31 = at_f0(_db(trace(3, 1)))
    ambiguous = abs(s21 - s31) <= TIE_DB
    direction = "1→2→3" if s21 < s31 else "1→3→2"
    return CirculatorMetrics(
        f0_hz=float(f0), il_db=il, rl_db=rl, ix_db=ix, bw20_frac=bw,
        worst_imp_dbc=float(worst), direction=direction, worst_imp_at=where, ambiguous=ambiguous,
    )


def write_metrics_json(path, metrics: CirculatorMetrics, extra: Optional[dict] = None) -> None:
    doc = metrics.to_dict()
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, ensure_ascii=False)
        fh.write("\n")


def write_comparison_csv(path, rows: Sequence[tuple], header: Sequence[str] = ()) -> None:
    """Rows of (label, CirculatorMetrics) in a Table-II style layout."""
    cols = ("design", "f0_hz", "il_db", "rl_db", "ix_db", "bw20_frac", "worst_imp_dbc", "direction")
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for label, m in rows:
            d = m.to_dict()
            w.writerow([label] + [d[c] for c in cols[1:]])


# -- ideal three-port algebra ------------------------------------------------

@dataclass(frozen=True)
class ModeAmplitudes:
    a0: complex
    a_plus: complex
    a_minus: complex


def ideal_port_currents(i_g: float, alpha: float) -> tuple:
    """Port currents of two counter-rotating modes of amplitude ``i_g``
    whose relative phase is set by ``alpha``."""
    n = np.arange(3)
    return tuple(float(v) for v in 2.0 * i_g * np.cos(n * 2.0 * np.pi / 3.0 + alpha))


def mode_decompose(v) -> ModeAmplitudes:
    v = np.asarray(v, dtype=complex)
    n = np.arange(3)
    a0 = v.sum() / 3.0
    ap = np.sum(v * _W ** (-n)) / 3.0
    am = np.sum(v * _W ** n) / 3.0
    return ModeAmplitudes(complex(a0), complex(ap), complex(am))


def mode_reconstruct(m: ModeAmplitudes) -> np.ndarray:
    n = np.arange(3)
    return m.a0 + m.a_plus * _W ** n + m.a_minus * _W ** (-n)


def modal_reflections(s: np.ndarray) -> ModeAmplitudes:
    """Eigenvalues of a circulant 3x3 S-matrix on the in-phase and rotating modes."""
    n = np.arange(3)
    out = []
    for sigma in (0, 1, -1):
        a = _W ** (sigma * n)
        out.append(complex(np.vdot(a, s @ a) / 3.0))
    return ModeAmplitudes(*out)


def mode_splitting(circuit: Circuit, band: tuple, n_points: int = 401, k_max: Optional[int] = None) -> tuple:
    """Resonances (omega_plus, omega_minus) of the two rotating modes, in Hz.

    Each rotating mode is driven on its own and its resonance is taken as
    the peak of the modal group delay inside ``band``, refined by a
    parabola through the three samples around the peak.
    """
    f_lo, f_hi = band
    fm = circuit.mod_freq_hz or 1.0
    K = k_max if k_max is not None else min(default_k_max(circuit.max_depth), K_LADDER_MAX)
    freqs = np.linspace(f_lo, f_hi, n_points)
    lam = np.zeros((2, n_points), dtype=complex)
    for i, f in enumerate(freqs):
        f_eff, _ = _dodge_dc(f, fm, K)
        s = solve_sparams(circuit, f_eff, fm, K, in_channels=(0,)).fundamental
        m = modal_reflections(s)
        lam[0, i], lam[1, i] = m.a_plus, m.a_minus
    out = []
    for row, name in zip(lam, ("clockwise", "counterclockwise")):
        ph = np.unwrap(np.angle(row))
        tau = np.abs(np.gradient(ph, freqs))
        j = int(np.argmax(tau))
        if j == 0 or j == n_points - 1:
            raise AnalysisError(f"no {name} resonance inside {f_lo:g}..{f_hi:g} Hz")
        y0, y1, y2 = tau[j - 1], tau[j], tau[j + 1]
        den = y0 - 2 * y1 + y2
        shift = 0.5 * (y0 - y2) / den if den != 0 else 0.0
        out.append(float(freqs[j] + shift * (freqs[1] - freqs[0])))
    return tuple(out)


# -- tuner --------------------------------------------------------------------

@dataclass
class TuneResult:
    fm_hz: float
    depth: float
    tank_f0_hz: float
    ix_db: float
    il_db: float
    rl_db: float
    through_port: int
    isolated_port: int
    untuned: bool
    evaluations: int
    spec: Union[JunctionSpec, ArchitectureSpec]
    # coarse-grid landscape: axis names, axis values, ix_db grid
    axes: tuple = ()
    axis_values: tuple = ()
    grid_ix: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {
            "fm_hz": self.fm_hz, "depth": self.depth, "tank_f0_hz": self.tank_f0_hz,
            "ix_db": self.ix_db, "il_db": self.il_db, "rl_db": self.rl_db,
            "through_port": self.through_port, "isolated_port": self.isolated_port,
            "status": "untuned" if self.untuned else "tuned", "evaluations": self.evaluations,
        }


def _junction(spec) -> JunctionSpec:
    return spec.junction if isinstance(spec, ArchitectureSpec) else spec


def _with_knobs(spec, fm: float, depth: float, f0: float):
    j = replace(_junction(spec), fm_hz=fm, depth=depth, f0_hz=f0)
    return replace(spec, junction=j) if isinstance(spec, ArchitectureSpec) else j


def _circuit(spec) -> Circuit:
    return build(spec) if isinstance(spec, ArchitectureSpec) else build_single_ended(spec)


def evaluate_point(spec, target: float, k_max: int) -> dict:
    """Fundamental figures at ``target`` for both circulation senses."""
    j = _junction(spec)
    c = _circuit(spec)
    f_eff, _ = _dodge_dc(target, j.fm_hz, k_max)
    s = solve_sparams(c, f_eff, j.fm_hz, k_max, in_channels=(0,)).fundamental
    best = None
    for thr, iso in ((2, 3), (3, 2)):
        il = float(_db(s[thr - 1, 0]))
        ix = float(min(_db(s[iso - 1, 0]), IX_CAP_DB))
        cand = dict(il_db=il, ix_db=ix, rl_db=float(min(_db(s[0, 0]), IX_CAP_DB)), through=thr, isolated=iso)
        if best is None or ix > best["ix_db"]:
            best = cand
    return best


def is_untuned(ix_db: float, il_db: float, depth: float, il_limit_db: float = IL_LIMIT_DB) -> bool:
    """No circulation: unmodulated, leaky, or blocking the through path."""
    return depth == 0.0 or ix_db < UNTUNED_DB or il_db > il_limit_db


def tune_circulation(
    spec: Union[JunctionSpec, ArchitectureSpec],
    target: float,
    fm_range: Optional[tuple] = None,
    depth_range: tuple = (0.02, 0.5),
    tank_range: Optional[tuple] = (0.95, 1.10),
    fix_depth: Optional[float] = None,
    grid_points: int = 11,
    max_evals: int = 200,
    il_limit_db: float = IL_LIMIT_DB,
    k_max: Optional[int] = None,
) -> TuneResult:
    """Maximize isolation at ``target`` (Hz).

    Free knobs are chosen from modulation frequency, depth and the tank
    natural frequency (as a ratio to ``target``).  With ``fm_range=None``
    the modulation frequency stays at ``spec``'s value and the knobs are
    (depth, tank); otherwise they are (fm, depth) with the tank fixed.
    Passing ``fix_depth`` pins the depth.  ``tank_range=None`` pins the tank.

    Isolation alone is maximized trivially by a junction that reflects
    everything, so the objective subtracts 10 dB per dB of through loss
    beyond ``il_limit_db``.
    """
    j0 = _junction(spec)
    axes = []
    if fm_range is not None:
        axes.append(("fm_hz", fm_range[0], fm_range[1]))
    if fix_depth is None:
        axes.append(("depth", depth_range[0], depth_range[1]))
    if fm_range is None and tank_range is not None:
        axes.append(("tank", tank_range[0] * target, tank_range[1] * target))

    depth_hi = fix_depth if fix_depth is not None else depth_range[1]
    K = k_max if k_max is not None else min(default_k_max(depth_hi), K_LADDER_MAX)
    evals = [0]
    cache = {}

    def knobs(x):
        d = dict(fm_hz=j0.fm_hz, depth=fix_depth if fix_depth is not None else j0.depth, tank=j0.f0_hz)
        for (name, _, _), v in zip(axes, x):
            d[name] = float(v)
        return d

    def run(x):
        key = tuple(np.round(np.asarray(x, float), 15))
        if key in cache:
            return cache[key]
        kb = knobs(x)
        evals[0] += 1
        r = evaluate_point(_with_knobs(spec, kb["fm_hz"], kb["depth"], kb["tank"]), target, K)
        cache[key] = r
        return r

    def score(r):
        return -r["ix_db"] + 10.0 * max(0.0, r["il_db"] - il_limit_db)

    axis_values = tuple(np.linspace(lo, hi, grid_points) for _, lo, hi in axes)
    grid_ix = None
    if axes:
        mesh = np.meshgrid(*axis_values, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        scores, ixs = [], []
        for p in pts:
            r = run(p)
            scores.append(score(r))
            ixs.append(r["ix_db"])
        grid_ix = np.array(ixs).reshape(mesh[0].shape)
        start = pts[int(np.argmin(scores))]

        lo = np.array([a[1] for a in axes])
        hi = np.array([a[2] for a in axes])
        span = hi - lo

        def obj(u):
            x = lo + u * span
            if np.any(u < 0) or np.any(u > 1):
                return 1e3 + float(np.sum(np.abs(np.clip(u, 0, 1) - u)))
            return score(run(x))

        u0 = (start - lo) / span
        # the initial simplex spans one coarse-grid cell
        step = 1.0 / max(grid_points - 1, 1)
        simplex = [u0]
        for d in range(len(axes)):
            e = u0.copy()
            e[d] = e[d] + step if e[d] + step <= 1 else e[d] - step
            simplex.append(e)
        res = minimize(obj, u0, method="Nelder-Mead",
                       options=dict(initial_simplex=np.array(simplex), fatol=0.01, xatol=1e-12,
                                    maxfev=max_evals))
        cands = [start, lo + np.clip(res.x, 0, 1) * span]
        best_x = min(cands, key=lambda x: score(run(x)))
    else:
        best_x = np.zeros(0)

    kb = knobs(best_x)
    r = run(best_x)
    tuned = _with_knobs(spec, kb["fm_hz"], kb["depth"], kb["tank"])
    return TuneResult(
        fm_hz=kb["fm_hz"], depth=kb["depth"], tank_f0_hz=kb["tank"], ix_db=r["ix_db"], il_db=r["il_db"],
        rl_db=r["rl_db"], through_port=r["through"], isolated_port=r["isolated"],
        untuned=is_untuned(r["ix_db"], r["il_db"], kb["depth"], il_limit_db), evaluations=evals[0] if axes else 1, spec=tuned,
        axes=tuple(a[0] for a in axes), axis_values=axis_values, grid_ix=grid_ix,
    )


def write_heatmap_csv(path, result: TuneResult, header: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        if result.grid_ix is None:
            w.writerow(["ix_db"])
            w.writerow([result.ix_db])
            return
        names = list(result.axes)
        w.writerow(names + ["ix_db"])
        mesh = np.meshgrid(*result.axis_values, indexing="ij")
        for idx in np.ndindex(result.grid_ix.shape):
            w.writerow([m[idx] for m in mesh] + [result.grid_ix[idx]])
