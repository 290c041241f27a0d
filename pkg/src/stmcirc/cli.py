"""Command-line front end: ``stmcirc sweep|tune|bands --config FILE --out DIR``.

Configs are YAML or JSON with a strict schema.  Physical quantities are
strings with an SI prefix and an exact unit: ``"1 GHz"``, ``"2.5 nH"``,
``"1.2 pF"``, ``"50 ohm"``.  Unknown keys and malformed units exit with
status 2 and name the offending key.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import sys
from dataclasses import replace
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError

from . import __version__
from .analysis import (
    evaluate_point,
    is_untuned,
    metrics_from_sweep,
    tune_circulation,
    write_heatmap_csv,
)
from .hb_engine import SolverError, default_k_max, sweep, write_harmonic_csv, write_touchstone
from .lattice import (
    LatticeError,
    build_honeycomb,
    bulk_gap,
    chern_numbers,
    gap_traversing_modes,
    high_symmetry_path,
    floquet_bands,
    preset_meta_atom,
    PRESET_COUPLING_RATIO,
    ribbon_edge_spectrum,
    static_bands,
    write_bands_csv,
    write_berry_flux_csv,
)
from .netlist import NetlistError
from .topologies import PRESETS, ArchitectureSpec, JunctionSpec, MatchingFilterSpec

EXIT_CONFIG = 2
EXIT_RUNTIME = 1

_PREFIX = {"f": 1e-15, "p": 1e-12, "n": 1e-9, "u": 1e-6, "µ": 1e-6, "m": 1e-3, "": 1.0,
           "k": 1e3, "M": 1e6, "G": 1e9, "T": 1e12}
_QTY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([A-Za-zµ]*)\s*$")


def parse_quantity(text, unit: str) -> float:
    """``"1.5 GHz"`` -> 1.5e9 for unit ``"Hz"``; the unit must match exactly."""
    if isinstance(text, bool) or not isinstance(text, str):
        raise ValueError(f"expected a string with unit {unit!r}, e.g. '1 {unit}'")
    m = _QTY.match(text)
    if not m:
        raise ValueError(f"cannot parse quantity {text!r}")
    num, suffix = m.groups()
    if not suffix.endswith(unit):
        raise ValueError(f"unit of {text!r} is not {unit!r}")
    prefix = suffix[: len(suffix) - len(unit)]
    if prefix not in _PREFIX:
        raise ValueError(f"unknown SI prefix {prefix!r} in {text!r} (unit {unit!r})")
    return float(num) * _PREFIX[prefix]


def _unit(u):
    return BeforeValidator(lambda v: parse_quantity(v, u))


Hz = Annotated[float, _unit("Hz")]
Farad = Annotated[float, _unit("F")]
Henry = Annotated[float, _unit("H")]
Ohm = Annotated[float, _unit("ohm")]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class JunctionCfg(_Strict):
    resonance: Literal["bandpass", "bandstop"] = "bandstop"
    connection: Literal["wye", "delta"] = "delta"
    f0: Hz
    l0: Henry
    depth: float = 0.0
    fm: Hz
    law: Literal["frequency-law", "capacitance-law"] = "frequency-law"
    q_factor: Optional[float] = None
    cap_q_factor: Optional[float] = None
    z0: Ohm = 50.0
    bias: Literal[1, -1] = 1


class FilterCfg(_Strict):
    order: int = 2
    fractional_bw: float = 0.1
    ripple_db: float = 0.5
    center: Optional[Hz] = None
    z0: Ohm = 50.0


class ArchitectureCfg(_Strict):
    junction: JunctionCfg
    arrangement: Literal["single-ended", "differential-voltage", "differential-current",
                         "n-way-parallel", "n-way-series"] = "single-ended"
    n_ways: int = 1
    filters: Optional[FilterCfg] = None
    unit2_cap_error: float = 0.0


class SweepCfg(_Strict):
    f_start: Hz
    f_stop: Hz
    n_points: int = Field(201, ge=2)
    k_max: Optional[int] = Field(None, ge=1)


class TuneCfg(_Strict):
    fm_range: Optional[Tuple[Hz, Hz]] = None
    depth_range: Tuple[float, float] = (0.02, 0.5)
    tank_range: Optional[Tuple[float, float]] = (0.95, 1.10)
    fix_depth: Optional[float] = None
    grid_points: int = Field(11, ge=2)
    max_evals: int = Field(200, ge=1)
    il_limit_db: float = 6.0
    k_max: Optional[int] = Field(None, ge=1)


class ChernCfg(_Strict):
    bands: List[Union[int, List[int]]] = [[0, 1], [2, 3]]
    grid: int = Field(12, ge=12)


class RibbonCfg(_Strict):
    width: int = Field(12, ge=8)
    wall: bool = True
    n_k: int = Field(41, ge=3)
    boundary: Literal["periodic", "open"] = "periodic"
    gap_between: Tuple[int, int] = (1, 2)


class LatticeCfg(_Strict):
    preset: Literal["honeycomb"] = "honeycomb"
    depth: float = 0.1
    fm_ratio: float = 0.15
    coupling_ratio: float = PRESET_COUPLING_RATIO
    ground_ratio: float = 1.0
    bias: Tuple[Literal[1, -1], Literal[1, -1]] = (1, 1)
    points_per_segment: int = Field(20, ge=1)
    chern: Optional[ChernCfg] = None
    ribbon: Optional[RibbonCfg] = None


class RunConfig(_Strict):
    preset: Optional[str] = None
    architecture: Optional[ArchitectureCfg] = None
    target: Optional[Hz] = None
    sweep: Optional[SweepCfg] = None
    tune: Optional[TuneCfg] = None
    lattice: Optional[LatticeCfg] = None


class ConfigError(ValueError):
    pass


def load_config(path) -> tuple:
    """Parse a config file; returns (RunConfig, sha256 of the raw bytes)."""
    raw = Path(path).read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    try:
        doc = yaml.safe_load(raw.decode("utf-8")) if raw.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML/JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config top level must be a mapping")
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(f"{key}: {err['msg']}") from None
    if cfg.preset is not None and cfg.preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {cfg.preset!r}; choose from {sorted(PRESETS)}")
    if cfg.preset is not None and cfg.architecture is not None:
        raise ConfigError("preset: give either 'preset' or 'architecture', not both")
    return cfg, digest


def architecture_from(cfg: RunConfig) -> tuple:
    """(ArchitectureSpec, target frequency)."""
    if cfg.preset is not None:
        p = PRESETS[cfg.preset]
        return p.spec, cfg.target or p.target_hz
    if cfg.architecture is None:
        raise ConfigError("architecture: missing (or give a preset)")
    a = cfg.architecture
    j = a.junction
    js = JunctionSpec(resonance=j.resonance, connection=j.connection, f0_hz=j.f0, l0=j.l0, depth=j.depth,
                      fm_hz=j.fm, law=j.law, q_factor=j.q_factor, cap_q_factor=j.cap_q_factor, z0=j.z0,
                      bias=j.bias)
    filt = None
    if a.filters is not None:
        f = a.filters
        filt = MatchingFilterSpec(order=f.order, fractional_bw=f.fractional_bw, ripple_db=f.ripple_db,
                                  center_hz=f.center if f.center is not None else (cfg.target or j.f0), z0=f.z0)
    spec = ArchitectureSpec(js, a.arrangement, a.n_ways, filt, a.unit2_cap_error)
    return spec, cfg.target or j.f0


def _header(digest: str) -> list:
    return [f"stmcirc {__version__}", f"config-sha256 {digest}"]


def _meta(digest: str) -> dict:
    return {"_tool": f"stmcirc {__version__}", "_config_sha256": digest}


def _dump_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n")


# -- commands -----------------------------------------------------------------

def cmd_sweep(cfg: RunConfig, digest: str, out: Path, threads: int, k_override: Optional[int]) -> None:
    spec, target = architecture_from(cfg)
    if cfg.sweep is None:
        raise ConfigError("sweep: missing block")
    s = cfg.sweep
    K = k_override or s.k_max or default_k_max(spec.junction.depth)
    from .topologies import build
    circ = build(spec)
    sw = sweep(circ, s.f_start, s.f_stop, s.n_points, spec.junction.fm_hz, K, threads=threads)
    hdr = _header(digest)
    write_harmonic_csv(out / "sweep.csv", sw, hdr)
    write_touchstone(out / "sweep.s3p", sw, hdr)
    pt = evaluate_point(spec, target, K)
    m = metrics_from_sweep(sw, target, 1, pt["through"], pt["isolated"])
    doc = m.to_dict()
    doc["status"] = "untuned" if is_untuned(m.ix_db, m.il_db, spec.junction.depth) else "tuned"
    doc.update(_meta(digest))
    _dump_json(out / "metrics.json", doc)


def cmd_tune(cfg: RunConfig, digest: str, out: Path, threads: int, k_override: Optional[int]) -> None:
    spec, target = architecture_from(cfg)
    t = cfg.tune or TuneCfg()
    r = tune_circulation(spec, target, fm_range=t.fm_range, depth_range=t.depth_range, tank_range=t.tank_range,
                         fix_depth=t.fix_depth, grid_points=t.grid_points, max_evals=t.max_evals,
                         il_limit_db=t.il_limit_db, k_max=k_override or t.k_max)
    doc = r.to_dict()
    doc["achieved_ix_db"] = doc.pop("ix_db")
    doc["target_hz"] = target
    doc.update(_meta(digest))
    _dump_json(out / "tune.json", doc)
    write_heatmap_csv(out / "tune_heatmap.csv", r, _header(digest))


def cmd_bands(cfg: RunConfig, digest: str, out: Path, threads: int, k_override: Optional[int]) -> None:
    lc = cfg.lattice or LatticeCfg()
    atom = preset_meta_atom(lc.depth)
    atom = replace(atom, fm_hz=lc.fm_ratio * atom.f0_hz)
    lat = build_honeycomb(atom, lc.coupling_ratio * atom.c0, lc.bias, ground_c=lc.ground_ratio * atom.c0)
    ks, labels = high_symmetry_path(lc.points_per_segment)
    diag = static_bands(lat, ks, labels) if lc.depth == 0 else floquet_bands(lat, ks, labels, threads)
    hdr = _header(digest)
    write_bands_csv(out / "bands.csv", diag, hdr)
    summary = {"kind": diag.kind,
               "gap_report": [{"lower": a, "upper": b, "min_direct_gap": g} for a, b, g in diag.gap_report]}
    summary.update(_meta(digest))
    _dump_json(out / "bands_summary.json", summary)
    if lc.chern is not None:
        groups = [tuple(b) if isinstance(b, list) else b for b in lc.chern.bands]
        res = chern_numbers(lat, groups, lc.chern.grid, threads)
        doc = {"grid": lc.chern.grid, "bands": [
            {"bands": list(k), "chern": v.value, "raw": v.raw, "residual": v.residual, "min_gap": v.min_gap}
            for k, v in res.items()]}
        doc["sum"] = sum(v.value for v in res.values())
        doc.update(_meta(digest))
        _dump_json(out / "chern.json", doc)
        for k, v in res.items():
            write_berry_flux_csv(out / f"berry_flux_{'-'.join(map(str, k))}.csv", v, hdr)
    if lc.ribbon is not None:
        rc = lc.ribbon
        rib = ribbon_edge_spectrum(lat, rc.width, rc.wall, np.linspace(0.0, 1.0, rc.n_k), rc.boundary, threads)
        write_bands_csv(out / "ribbon.csv", rib, hdr)
        lo, hi = rc.gap_between
        if hi != lo + 1:
            raise ConfigError("lattice.ribbon.gap_between: bands must be adjacent")
        gap = bulk_gap(diag, lo)
        rep = gap_traversing_modes(rib, gap)
        doc = {"gap": list(gap), "wall_modes_traversing": rep.n_traversing, "slopes": rep.slopes,
               "uniform_sign": rep.uniform_sign}
        doc.update(_meta(digest))
        _dump_json(out / "ribbon_summary.json", doc)


COMMANDS = {"sweep": cmd_sweep, "tune": cmd_tune, "bands": cmd_bands}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="stmcirc", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="YAML or JSON run config")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--k-max", type=int, default=None, help="harmonic truncation override")
    args = ap.parse_args(argv)
    out = Path(args.out)
    try:
        cfg, digest = load_config(args.config)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, digest, out, max(1, args.threads), args.k_max)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, LatticeError, NetlistError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
