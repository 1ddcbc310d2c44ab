"""Command-line front end.

    python -m coupled_dpg run <config.yaml>
    python -m coupled_dpg convergence <config.yaml>
    python -m coupled_dpg hose-exact <config.yaml>

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import THREADS_ENV
from .bench import (DEFAULT_CUBE_ASSIGNMENT, Benchmark, HoseMaterials, HoseRadii, StudyResult,
                    assignment_label, convergence_study, cube_benchmark, fmt, hose_benchmark,
                    hose_constants_general, hose_exact, interface_samples, samples_csv)
from .dpg import GramBreakdownError
from .forms import Formulation
from .material import IsotropicMaterial, lame_from_engineering
from .mesh import build_box_mesh, octant_rule
from .system import (BCSpec, BoundaryCondition, ResourceLimitError, Scales, SolverError, SolverOptions)

log = logging.getLogger("coupled_dpg")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2
BENCHMARKS = ("cube", "hose_uniform", "hose_cos2", "custom")
BOX_SIDES = ("x0", "x1", "y0", "y1", "z0", "z1")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ units

_UNITS = {
    "pa": 1.0, "kpa": 1e3, "mpa": 1e6, "gpa": 1e9,
    "m": 1.0, "cm": 1e-2, "mm": 1e-3,
    "n/m^3": 1.0, "n/m3": 1.0,
}
_DIMENSION = {"pa": "stress", "kpa": "stress", "mpa": "stress", "gpa": "stress",
              "m": "length", "cm": "length", "mm": "length", "n/m^3": "force_density", "n/m3": "force_density"}
_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([A-Za-z/^0-9]*)\s*$")


def parse_quantity(value: Any, dimension: str | None = None, where: str = "") -> float:
    """Number or ``"<number> <unit>"`` string in SI base units; bare numbers are taken as SI."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a number or quantity string, got {value!r}")
    m = _QUANTITY.match(value)
    if not m:
        raise ConfigError(f"{where}: cannot parse quantity {value!r}")
    num, unit = float(m.group(1)), m.group(2).lower()
    if not unit:
        return num
    if dimension is None:
        raise ConfigError(f"{where}: expected a plain number, got {value!r}")
    if unit not in _UNITS:
        raise ConfigError(f"{where}: unknown unit {m.group(2)!r} (known: Pa, kPa, MPa, GPa, m, cm, mm, N/m^3)")
    if _DIMENSION[unit] != dimension:
        raise ConfigError(f"{where}: unit {m.group(2)!r} is not a {dimension} unit")
    return num * _UNITS[unit]


# --------------------------------------------------------------- config tree


def _key_lines(node, path=()) -> dict:
    """Line number (1-based) of every mapping key, by key path."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = path + (k.value,)
            out[p] = k.start_mark.line + 1
            out.update(_key_lines(v, p))
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            out.update(_key_lines(v, path + (i,)))
    return out


class _Tree:
    """Mapping wrapper that tracks consumed keys and reports positions."""

    def __init__(self, data: dict, path: tuple, lines: dict, source: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: {self._name(path)} must be a mapping")
        self.data, self.path, self.lines, self.source = data, path, lines, source
        self.used: set = set()

    @staticmethod
    def _name(path) -> str:
        return ".".join(str(p) for p in path) or "<root>"

    def where(self, key=None) -> str:
        path = self.path + ((key,) if key is not None else ())
        line = self.lines.get(path)
        return f"{self.source}:{line}: {self._name(path)}" if line else f"{self.source}: {self._name(path)}"

    def has(self, key) -> bool:
        return key in self.data

    def get(self, key, default=None):
        self.used.add(key)
        return self.data.get(key, default)

    def sub(self, key, default_empty: bool = True) -> "_Tree":
        self.used.add(key)
        v = self.data.get(key)
        if v is None and default_empty:
            v = {}
        if not isinstance(v, dict):
            raise ConfigError(f"{self.where(key)} must be a mapping")
        return _Tree(v, self.path + (key,), self.lines, self.source)

    def integer(self, key, default, lo, hi) -> int:
        v = self.get(key, default)
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{self.where(key)} must be an integer, got {v!r}")
        if not lo <= v <= hi:
            raise ConfigError(f"{self.where(key)} must lie in {lo}..{hi}, got {v}")
        return v

    def quantity(self, key, default, dimension) -> float:
        return parse_quantity(self.get(key, default), dimension, self.where(key))

    def finish(self) -> None:
        unknown = [k for k in self.data if k not in self.used]
        if unknown:
            raise ConfigError(f"{self.where(unknown[0])}: unknown key {unknown[0]!r}")


# --------------------------------------------------------------- RunConfig


@dataclass
class RunConfig:
    benchmark: str
    p_values: tuple[int, ...]
    dp: int
    refinements: int
    solver: SolverOptions
    output: Path
    bench: Benchmark
    geometry: dict = field(default_factory=dict)
    sampling: dict = field(default_factory=dict)
    source: str = ""

    @property
    def scales(self) -> Scales:
        return self.bench.scales


def _material(tree: _Tree) -> tuple[IsotropicMaterial, float]:
    """``{E, nu}`` (engineering) or ``{lam, mu}`` (Lame); returns the material and its E."""
    if tree.has("E") or tree.has("nu"):
        E = tree.quantity("E", None, "stress")
        nu = parse_quantity(tree.get("nu"), None, tree.where("nu"))
        try:
            m = lame_from_engineering(E, nu)
        except ValueError as exc:
            raise ConfigError(f"{tree.where()}: {exc}") from None
    else:
        mu = tree.quantity("mu", 1.0, "stress")
        lam = tree.quantity("lam", 1.0, "stress")
        try:
            m = IsotropicMaterial(mu, lam)
        except ValueError as exc:
            raise ConfigError(f"{tree.where()}: {exc}") from None
        E = mu * (3 * lam + 2 * mu) / (lam + mu)
    tree.finish()
    return m, E


def _assignment(tree: _Tree, names, default: dict) -> dict:
    out = dict(default)
    for k in list(tree.data):
        v = tree.get(k)
        if k not in names:
            raise ConfigError(f"{tree.where(k)}: unknown subdomain {k!r} (known: {', '.join(names)})")
        try:
            out[k] = Formulation.parse(v).value
        except ValueError as exc:
            raise ConfigError(f"{tree.where(k)}: {exc}") from None
    missing = [n for n in names if n not in out]
    if missing:
        raise ConfigError(f"{tree.where()}: no formulation for subdomain(s) {', '.join(missing)}")
    return out


def _vector(tree: _Tree, key, dimension) -> np.ndarray:
    v = tree.get(key)
    if not isinstance(v, list) or len(v) != 3:
        raise ConfigError(f"{tree.where(key)} must be a list of three values")
    return np.array([parse_quantity(c, dimension, f"{tree.where(key)}[{i}]") for i, c in enumerate(v)])


def _constant_field(vec):
    vec = np.asarray(vec, dtype=float)
    return lambda x: np.tile(vec, (np.atleast_2d(x).shape[0], 1))


def _cube(root: _Tree) -> tuple[Benchmark, dict]:
    mat, _ = _material(root.sub("material"))
    names = sorted(DEFAULT_CUBE_ASSIGNMENT)
    single = root.get("single")
    if single is not None:
        try:
            single = Formulation.parse(single)
        except ValueError as exc:
            raise ConfigError(f"{root.where('single')}: {exc}") from None
        if root.has("assignment"):
            raise ConfigError(f"{root.where('single')}: give either single or assignment")
    asg = _assignment(root.sub("assignment"), names, DEFAULT_CUBE_ASSIGNMENT)
    b = cube_benchmark(asg if single is None else None, lam=mat.lam, mu=mat.mu, single=single)
    return b, {"domain": "(0,2)^3", "level0_elements": 8}


def _hose(root: _Tree, name: str) -> tuple[Benchmark, dict]:
    g = root.sub("geometry")
    d = HoseRadii()
    r3 = (g.quantity("R_in", d.R_in, "length"), g.quantity("R_mid", d.R_mid, "length"),
          g.quantity("R_out", d.R_out, "length"))
    if not 0 < r3[0] < r3[1] < r3[2]:
        raise ConfigError(f"{g.where()}: radii must satisfy 0 < R_in < R_mid < R_out")
    radii = HoseRadii(*r3)
    length = g.quantity("length", 1.0, "length")
    if not length > 0:
        raise ConfigError(f"{g.where('length')} must be positive")
    mesh_kw = {k: g.integer(k, 4 if k == "n_theta" else 1, 4 if k == "n_theta" else 1, 64)
               for k in ("n_theta", "n_z", "n_r_inner", "n_r_outer")}
    if mesh_kw["n_theta"] % 4:
        raise ConfigError(f"{g.where('n_theta')} must be a multiple of 4 (the axial pins sit at 0, 90, 180 degrees)")
    g.finish()
    mt = root.sub("materials")
    dm = HoseMaterials()
    mats = {}
    for sub, (E0, nu0) in (("rubber", (dm.E_R, dm.nu_R)), ("steel", (dm.E_S, dm.nu_S))):
        t = mt.sub(sub)
        if not t.has("E"):
            t.data = dict(t.data, E=E0)
        if not t.has("nu"):
            t.data = dict(t.data, nu=nu0)
        m, E = _material(t)
        mats[sub] = (E, parse_quantity(t.data["nu"], None, t.where("nu")))
    mt.finish()
    hm = HoseMaterials(E_S=mats["steel"][0], nu_S=mats["steel"][1], E_R=mats["rubber"][0], nu_R=mats["rubber"][1])
    if hm.nu_S >= 0.5:
        raise ConfigError(f"{mt.where('steel')}: the steel sheath must be compressible (nu < 0.5)")
    ld = root.sub("loading")
    p_out = ld.quantity("p_out", 0.0, "stress")
    if name == "hose_uniform":
        p_in: Any = ld.quantity("p_in", 1e6, "stress")
    else:
        amp = ld.quantity("p_in_amplitude", 1e6, "stress")
        p_in = lambda theta: amp * np.cos(theta) ** 2  # noqa: E731
    ld.finish()
    asg = _assignment(root.sub("assignment"), ("rubber", "steel"), {"rubber": "U", "steel": "P"})
    b = hose_benchmark(name, radii, hm, p_in, p_out, length, assignment=asg, **mesh_kw)
    return b, {"radii": radii, "length": length, "level0_elements": b.mesh.n_elements, "mesh": mesh_kw,
               "materials": hm, "p_out": p_out}


def _custom(root: _Tree) -> tuple[Benchmark, dict]:
    g = root.sub("geometry")
    ext = _vector(g, "extents", "length") if g.has("extents") else np.array([1.0, 1.0, 1.0])
    divs = g.get("divisions", [2, 2, 2])
    if not (isinstance(divs, list) and len(divs) == 3 and all(isinstance(n, int) and n >= 1 for n in divs)):
        raise ConfigError(f"{g.where('divisions')} must be three positive integers")
    layout = g.get("subdomains", "single")
    if layout not in ("single", "octants"):
        raise ConfigError(f"{g.where('subdomains')} must be 'single' or 'octants'")
    if layout == "octants" and any(n % 2 for n in divs):
        raise ConfigError(f"{g.where('divisions')} must be even for an octant split")
    g.finish()
    if min(ext) <= 0:
        raise ConfigError(f"{g.where('extents')} must be positive")
    mesh = build_box_mesh(ext, divs, octant_rule(divs) if layout == "octants" else None)
    names = list(mesh.subdomain_names)
    mt = root.sub("materials")
    materials, moduli = {}, []
    for n in names:
        key = n if mt.has(n) else "default"
        if not mt.has(key):
            raise ConfigError(f"{mt.where()}: no material for subdomain {n!r} and no 'default'")
        m, E = _material(mt.sub(key))
        materials[n] = m
        moduli.append(E)
    mt.used.add("default")
    mt.finish()
    asg_tree = root.sub("assignment")
    default = {n: asg_tree.data["default"] for n in names} if "default" in asg_tree.data else {}
    asg_tree.used.add("default")
    asg_tree.data = {k: v for k, v in asg_tree.data.items() if k != "default"}
    asg = _assignment(asg_tree, names, {k: Formulation.parse(v).value for k, v in default.items()})
    bt = root.sub("boundary")
    faces = {}
    for side in BOX_SIDES:
        if not bt.has(side):
            raise ConfigError(f"{bt.where()}: no condition for side {side!r}")
        t = bt.sub(side)
        kind = t.get("type")
        if kind == "clamped":
            g_vec = _vector(t, "displacement", "length") if t.has("displacement") else np.zeros(3)
            faces[side] = BoundaryCondition.clamped(_constant_field(g_vec))
        elif kind == "traction":
            t_vec = _vector(t, "traction", "stress") if t.has("traction") else np.zeros(3)
            faces[side] = BoundaryCondition.loaded(_constant_field(t_vec))
        else:
            raise ConfigError(f"{t.where('type')} must be 'clamped' or 'traction', got {kind!r}")
        t.finish()
    bt.finish()
    if not any(bc.displacement_components for bc in faces.values()):
        raise ConfigError(f"{bt.where()}: at least one side must be clamped")
    f = _vector(root, "body_force", "force_density") if root.has("body_force") else None
    scales = Scales(length=float(np.linalg.norm(ext)), stress=math.sqrt(min(moduli) * max(moduli)))
    bench = Benchmark("custom", mesh, asg, materials, BCSpec(faces), _constant_field(f) if f is not None else None,
                      None, (), scales, assignment_label(asg))
    return bench, {"extents": ext.tolist(), "divisions": divs, "level0_elements": mesh.n_elements}


def _solver(tree: _Tree) -> SolverOptions:
    method = tree.get("method", "auto")
    if method not in ("direct", "cg", "auto"):
        raise ConfigError(f"{tree.where('method')} must be 'direct', 'cg' or 'auto'")
    frac = tree.get("memory_fraction", 0.8)
    if not isinstance(frac, (int, float)) or not 0 < frac <= 1:
        raise ConfigError(f"{tree.where('memory_fraction')} must lie in (0, 1]")
    tol = tree.get("cg_tol", 1e-12)
    if not isinstance(tol, (int, float)) or not 0 < tol < 1:
        raise ConfigError(f"{tree.where('cg_tol')} must lie in (0, 1)")
    ooc = tree.get("out_of_core", True)
    if not isinstance(ooc, bool):
        raise ConfigError(f"{tree.where('out_of_core')} must be true or false")
    tree.finish()
    return SolverOptions(method=method, cg_tol=float(tol), memory_fraction=float(frac), out_of_core=ooc)


def parse_config(path: str | os.PathLike, overrides: dict | None = None) -> RunConfig:
    """Read and validate a YAML run configuration; raises ConfigError with key/line diagnostics."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such file")
    text = path.read_text()
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML parse error: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: the top level must be a mapping of keys to values")
    data.update(overrides or {})
    root = _Tree(data, (), _key_lines(node) if node is not None else {}, str(path))
    bench_name = root.get("benchmark")
    if bench_name not in BENCHMARKS:
        raise ConfigError(f"{root.where('benchmark')} must be one of {', '.join(BENCHMARKS)}, got {bench_name!r}")
    p = root.get("p", 2)
    p_values = tuple(p) if isinstance(p, list) else (p,)
    if not p_values or any(isinstance(v, bool) or not isinstance(v, int) or not 1 <= v <= 5 for v in p_values):
        raise ConfigError(f"{root.where('p')} must be an integer (or list of integers) in 1..5, got {p!r}")
    dp = root.integer("dp", 1, 1, 3)
    refinements = root.integer("refinements", 2, 0, 6)
    solver = _solver(root.sub("solver"))
    out = root.get("output", "results")
    if not isinstance(out, str) or not out:
        raise ConfigError(f"{root.where('output')} must be a directory path")
    output = Path(out)
    if not output.is_absolute():
        output = path.parent / output
    sampling = {}
    if bench_name == "cube":
        bench, geometry = _cube(root)
    elif bench_name in ("hose_uniform", "hose_cos2"):
        bench, geometry = _hose(root, bench_name)
        st = root.sub("sampling")
        sampling = {"n_r": st.integer("n_r", 8, 2, 1000), "n_theta": st.integer("n_theta", 16, 1, 1000),
                    "n_z": st.integer("n_z", 1, 1, 1000), "n_per_face": st.integer("n_per_face", 3, 1, 20)}
        st.finish()
    else:
        bench, geometry = _custom(root)
    root.finish()
    for name, form in bench.assignment.items():
        if Formulation.parse(form).uses_stiffness and bench.materials[name].incompressible:
            raise ConfigError(f"{root.where('assignment')}: subdomain {name!r} is incompressible (nu = 0.5) but "
                              f"formulation {form} uses the stiffness tensor; use U or M there")
    return RunConfig(bench_name, p_values, dp, refinements, solver, output, bench, geometry, sampling, str(path))


# ------------------------------------------------------------------ commands


def _prepare_output(cfg: RunConfig) -> None:
    try:
        cfg.output.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {cfg.output}: {exc}") from None
    if not os.access(cfg.output, os.W_OK):
        raise ConfigError(f"output directory {cfg.output} is not writable")


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)
    log.info("wrote %s", path)


def _header(cfg: RunConfig) -> str:
    b = cfg.bench
    lines = [f"benchmark: {cfg.benchmark}",
             f"formulation_config: {b.formulation_config}",
             f"level-0 mesh: {b.mesh.n_elements} elements; each refinement splits every element into 8",
             f"p: {', '.join(map(str, cfg.p_values))}; dp: {cfg.dp}; refinements: {cfg.refinements}",
             f"length scale: {fmt(b.scales.length)}; stress scale: {fmt(b.scales.stress)} (SI units)",
             f"solver: {cfg.solver.method}"]
    return "\n".join(lines) + "\n"


def run_study(cfg: RunConfig) -> StudyResult:
    _prepare_output(cfg)
    log.info("length scale %s, stress scale %s", fmt(cfg.scales.length), fmt(cfg.scales.stress))
    keep = cfg.benchmark == "hose_cos2"
    done: list = []
    try:
        res = convergence_study(cfg.bench, cfg.p_values, cfg.refinements, cfg.dp, cfg.solver,
                                keep_solutions=keep, on_level=done.append)
    except (SolverError, ResourceLimitError) as exc:
        # keep the levels that finished
        _write_tables(cfg, StudyResult(cfg.bench, cfg.dp, done), f"stopped: {exc}\n")
        raise
    _write_tables(cfg, res)
    if keep:
        # finest level of the last p
        sol = res.levels[-1].solution
        _write(cfg.output / "interface_samples.csv", samples_csv(interface_samples(sol, cfg.sampling["n_per_face"])))
        for lv in res.levels:
            lv.solution = None
    return res


def _write_tables(cfg: RunConfig, res: StudyResult, note: str = "") -> None:
    _write(cfg.output / "convergence.csv", res.csv())
    _write(cfg.output / "residuals.csv", res.residual_csv())
    _write(cfg.output / "dofs.csv", res.dof_csv())
    _write(cfg.output / "report.txt", _header(cfg) + note)


def _rate_table(res: StudyResult) -> str:
    rows = res.rows()
    out = io.StringIO()
    out.write(f"{'p':>2} {'level':>5} {'n_dof':>9} {'measure':>16} {'error':>14} {'rate':>7}\n")
    for r in rows:
        rate = "" if r["rate"] is None else f"{r['rate']:.3f}"
        out.write(f"{r['p']:>2} {r['level']:>5} {r['n_dof']:>9} {r['error_measure']:>16} "
                  f"{r['error_value']:>14.6e} {rate:>7}\n")
    if not rows:
        for lv in res.levels:
            out.write(f"{lv.p:>2} {lv.level:>5} {lv.n_dof:>9} {'residual':>16} {lv.residual:>14.6e}\n")
    return out.getvalue()


def hose_exact_samples(cfg: RunConfig) -> str:
    if cfg.benchmark != "hose_uniform":
        raise ConfigError("hose-exact needs benchmark: hose_uniform (the cos^2 load has no exact solution)")
    info = cfg.bench.info
    radii, m_R, m_S = info["radii"], info["m_R"], info["m_S"]
    exact = cfg.bench.exact
    s = cfg.sampling
    r = np.linspace(radii.R_in, radii.R_out, s["n_r"])
    th = np.linspace(0.0, 2 * math.pi, s["n_theta"], endpoint=False)
    z = np.linspace(0.0, cfg.geometry["length"], s["n_z"]) if s["n_z"] > 1 else np.array([0.5 * cfg.geometry["length"]])
    R, T, Z = np.meshgrid(r, th, z, indexing="ij")
    x = np.column_stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel(), Z.ravel()])
    u = exact.displacement(x)
    sig = exact.stress(x).reshape(-1, 9)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "z", "u1", "u2", "u3"] + [f"s{i}{j}" for i in (1, 2, 3) for j in (1, 2, 3)])
    for q in range(x.shape[0]):
        w.writerow([fmt(v) for v in (*x[q], *u[q], *sig[q])])
    return buf.getvalue()


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="coupled_dpg", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, hlp in (("run", "solve every level and write CSV reports"),
                      ("convergence", "as run, and print the rate table"),
                      ("hose-exact", "sample the exact hose fields on a grid")):
        sp = sub.add_parser(name, help=hlp)
        sp.add_argument("config")
        sp.add_argument("-o", "--output", help="override the output directory")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if os.environ.get(THREADS_ENV):
        log.info("thread count override %s=%s", THREADS_ENV, os.environ[THREADS_ENV])
    try:
        cfg = parse_config(args.config)
        if args.output:
            cfg.output = Path(args.output)
        if args.command == "hose-exact":
            text = hose_exact_samples(cfg)
            _prepare_output(cfg)
            _write(cfg.output / "hose_exact.csv", text)
            return EXIT_OK
        res = run_study(cfg)
        if args.command == "convergence":
            sys.stdout.write(_header(cfg) + _rate_table(res))
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (SolverError, ResourceLimitError, GramBreakdownError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
