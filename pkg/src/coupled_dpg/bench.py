"""Exact solutions, error norms and convergence studies for the two benchmarks.

* cube: ``u_i = sin(pi x) sin(pi y) sin(pi z)`` on (0, 2)^3 with
  lambda = mu = 1, displacement data on the whole boundary;
* hose: a rubber layer R_in < r < R_mid sheathed by steel up to R_out,
  loaded by internal and external pressure, plane strain along the axis.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .forms import ElementGeometry, Formulation, basis_arrays, element_geometry, trial_layout
from .material import IsotropicMaterial, lame_from_engineering, stiffness_apply
from .mesh import (Mesh, build_box_mesh, build_cylinder_shell_mesh, face_point_to_reference, geometry_eval,
                   octant_rule, refine_uniform)
from .system import (BCSpec, BoundaryCondition, PointConstraint, Scales, Solution, SolverOptions,
                     assemble_and_solve)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("benchmark", "formulation_config", "p", "dp", "level", "n_elements", "n_dof",
               "error_measure", "error_value", "rate")

# every pair of {S, U, M, P} shares a face; equal formulations sit in opposite octants
DEFAULT_CUBE_ASSIGNMENT = {
    "octant_000": "S", "octant_111": "S",
    "octant_100": "U", "octant_011": "U",
    "octant_010": "M", "octant_101": "M",
    "octant_001": "P", "octant_110": "P",
}


@dataclass(frozen=True)
class ExactSolution:
    displacement: Callable
    stress: Callable
    body_force: Callable
    domain: str


# --------------------------------------------------------------------- cube


def cube_exact(lam: float = 1.0, mu: float = 1.0) -> ExactSolution:
    pi = math.pi

    def displacement(x):
        x = np.atleast_2d(x)
        s = np.sin(pi * x).prod(axis=1)
        return np.repeat(s[:, None], 3, axis=1)

    def gradient(x):
        x = np.atleast_2d(x)
        s, c = np.sin(pi * x), np.cos(pi * x)
        d = np.stack([pi * c[:, 0] * s[:, 1] * s[:, 2], pi * s[:, 0] * c[:, 1] * s[:, 2],
                      pi * s[:, 0] * s[:, 1] * c[:, 2]], axis=1)
        return np.repeat(d[:, None, :], 3, axis=1)  # every row is grad(u_i)

    mat = IsotropicMaterial(mu, lam)

    def stress(x):
        return stiffness_apply(mat, gradient(x))

    def body_force(x):
        x = np.atleast_2d(x)
        s, c = np.sin(pi * x), np.cos(pi * x)
        s123 = s.prod(axis=1)
        # second derivatives of the common scalar field
        H = np.empty((x.shape[0], 3, 3))
        for i in range(3):
            for j in range(3):
                if i == j:
                    H[:, i, j] = -pi ** 2 * s123
                else:
                    k = 3 - i - j
                    H[:, i, j] = pi ** 2 * c[:, i] * c[:, j] * s[:, k]
        lap = np.trace(H, axis1=1, axis2=2)
        graddiv = H.sum(axis=2)  # d/dx_i sum_j du_j/dx_j
        return -(mu * lap[:, None] + (lam + mu) * graddiv)

    return ExactSolution(displacement, stress, body_force, "cube")


# --------------------------------------------------------------------- hose


@dataclass(frozen=True)
class HoseRadii:
    R_in: float = 0.5
    R_mid: float = 0.99
    R_out: float = 1.0

    def __post_init__(self):
        if not 0 < self.R_in < self.R_mid < self.R_out:
            raise ValueError("radii must satisfy 0 < R_in < R_mid < R_out")


@dataclass(frozen=True)
class HoseConstants:
    """u_r = a_R r + A / r in the rubber, B r + C / r in the steel.

    The rubber stress is ``2 mu_R grad(u)_sym - p0 I``; ``a_R`` vanishes for
    incompressible rubber.
    """

    A: float
    B: float
    C: float
    p0: float
    d: float
    a_R: float = 0.0


def hose_constants(m_R: IsotropicMaterial, m_S: IsotropicMaterial, radii: HoseRadii,
                   p_in: float, p_out: float) -> HoseConstants:
    """Closed-form constants for incompressible rubber inside compressible steel."""
    if not m_R.incompressible:
        raise ValueError("closed-form constants need incompressible rubber; use hose_constants_general")
    if m_S.incompressible:
        raise ValueError("the steel layer must be compressible")
    muR, muS, lS = m_R.mu, m_S.mu, m_S.lam
    Ri, Rm, Ro = radii.R_in ** 2, radii.R_mid ** 2, radii.R_out ** 2
    d = ((muR - muS) * (lS + muS) * Ro + muS * (lS + muR + muS) * Rm) * Ri \
        - muR * (muS * Rm + (lS + muS) * Ro) * Rm
    if d == 0 or not math.isfinite(d):
        raise ValueError("degenerate material combination: d = 0")
    A = (-p_in * (muS * Rm + (lS + muS) * Ro) + p_out * (lS + 2 * muS) * Ro) * Rm * Ri / (2 * d)
    B = (-p_in * muS * Ri * Rm - p_out * ((muR - muS) * Ri - muR * Rm) * Ro) / (2 * d)
    C = (-p_in * (lS + muS) * Ri + p_out * ((lS + muR + muS) * Ri - muR * Rm)) * Rm * Ro / (2 * d)
    p0 = (p_in * ((muR - muS) * (lS + muS) * Ro + muS * (lS + muR + muS) * Rm) * Ri
          - p_out * muR * (lS + 2 * muS) * Ro * Rm) / d
    return HoseConstants(A, B, C, p0, d)


def hose_constants_general(m_R: IsotropicMaterial, m_S: IsotropicMaterial, radii: HoseRadii,
                           p_in: float, p_out: float) -> HoseConstants:
    """Constants from the interface and boundary conditions, any rubber compressibility."""
    if m_R.incompressible:
        return hose_constants(m_R, m_S, radii, p_in, p_out)
    lR, muR, lS, muS = m_R.lam, m_R.mu, m_S.lam, m_S.mu
    Ri, Rm, Ro = radii.R_in, radii.R_mid, radii.R_out
    # unknowns a_R, A, B, C; sigma_rr = 2(l+mu) a - 2 mu b / r^2
    M = np.array([
        [Rm, 1 / Rm, -Rm, -1 / Rm],
        [2 * (lR + muR), -2 * muR / Rm ** 2, -2 * (lS + muS), 2 * muS / Rm ** 2],
        [2 * (lR + muR), -2 * muR / Ri ** 2, 0.0, 0.0],
        [0.0, 0.0, 2 * (lS + muS), -2 * muS / Ro ** 2],
    ])
    rhs = np.array([0.0, 0.0, -p_in, -p_out])
    a, A, B, C = np.linalg.solve(M, rhs)
    return HoseConstants(float(A), float(B), float(C), float(-2 * lR * a), float(np.linalg.det(M)), float(a))


def _hose_layers(k: HoseConstants, m_R, m_S):
    def rubber(r):
        u = k.a_R * r + k.A / r
        du = k.a_R - k.A / r ** 2
        return u, du, 2 * m_R.mu * du - k.p0, 2 * m_R.mu * u / r - k.p0, np.full_like(r, -k.p0)

    def steel(r):
        u = k.B * r + k.C / r
        du = k.B - k.C / r ** 2
        tr = du + u / r
        return (u, du, 2 * m_S.mu * du + m_S.lam * tr, 2 * m_S.mu * u / r + m_S.lam * tr,
                m_S.lam * tr)

    return rubber, steel


def hose_radial(k: HoseConstants, radii: HoseRadii, m_R, m_S, r, side: str | None = None):
    """(u_r, du_r/dr, sigma_rr, sigma_tt, sigma_zz) at radii ``r``.

    ``side`` forces the rubber or steel branch (useful exactly at R_mid).
    """
    r = np.asarray(r, dtype=float)
    tol = 1e-12 * radii.R_out
    if np.any(r < radii.R_in - tol) or np.any(r > radii.R_out + tol):
        raise ValueError("radius outside [R_in, R_out]")
    rubber, steel = _hose_layers(k, m_R, m_S)
    if side == "rubber":
        return rubber(r)
    if side == "steel":
        return steel(r)
    in_rubber = r <= radii.R_mid
    a, b = rubber(r), steel(r)
    return tuple(np.where(in_rubber, x, y) for x, y in zip(a, b))


def hose_exact(k: HoseConstants, radii: HoseRadii, m_R: IsotropicMaterial,
               m_S: IsotropicMaterial) -> ExactSolution:
    """Cartesian fields of the pressurized hose; the layer is chosen by radius."""

    def radial(x):
        x = np.atleast_2d(x)
        r = np.hypot(x[:, 0], x[:, 1])
        er = np.column_stack([x[:, 0] / r, x[:, 1] / r, np.zeros_like(r)])
        return r, er

    def displacement(x):
        r, er = radial(x)
        u = hose_radial(k, radii, m_R, m_S, r)[0]
        return u[:, None] * er

    def stress(x):
        r, er = radial(x)
        _, _, srr, stt, szz = hose_radial(k, radii, m_R, m_S, r)
        et = np.column_stack([-er[:, 1], er[:, 0], np.zeros_like(r)])
        ez = np.zeros_like(er)
        ez[:, 2] = 1.0
        return (srr[:, None, None] * er[:, :, None] * er[:, None, :]
                + stt[:, None, None] * et[:, :, None] * et[:, None, :]
                + szz[:, None, None] * ez[:, :, None] * ez[:, None, :])

    def body_force(x):
        return np.zeros((np.atleast_2d(x).shape[0], 3))

    return ExactSolution(displacement, stress, body_force, "hose")


# ------------------------------------------------------------------- errors


def field_values(solution: Solution, e: int, variable: str, geo):
    """Displacement or stress of element ``e`` at the points of ``geo`` (physical units)."""
    ed = solution.dofmap.elements[e]
    form = ed.formulation
    layout = trial_layout(form, solution.p)
    coef = solution.coefficients[e]
    sc = solution.scales
    if variable == "displacement":
        var = layout.variable("u")
        vals, _ = basis_arrays(var, solution.p, geo)
        return sc.length * np.einsum("n,nqc->qc", coef[layout.slice("u")], vals)
    if variable == "stress":
        if form is Formulation.PRIMAL:
            var = layout.variable("u")
            _, grads = basis_arrays(var, solution.p, geo)
            grad = np.einsum("n,nqij->qij", coef[layout.slice("u")], grads)
            mat = solution.materials[solution.mesh.subdomain_of(e)]
            return sc.stress * stiffness_apply(mat, grad)
        var = layout.variable("sigma")
        vals, _ = basis_arrays(var, solution.p, geo)
        return sc.stress * np.einsum("n,nqij->qij", coef[layout.slice("sigma")], vals)
    raise ValueError(f"unknown field {variable!r}")


MEASURES = {"displacement_L2": "displacement", "stress_L2": "stress"}


def compute_error(solution: Solution, exact: ExactSolution, measure: str) -> float:
    """L2(Omega) error in physical units, quadrature at enriched order + 2."""
    if measure not in MEASURES:
        raise ValueError(f"unknown error measure {measure!r}")
    variable = MEASURES[measure]
    L = solution.scales.length
    total = 0.0
    for e in range(solution.mesh.n_elements):
        geo = element_geometry(solution.mesh, e, solution.p, solution.dp, extra=2)
        xh = geo.x * L
        uh = field_values(solution, e, variable, geo)
        ex = exact.displacement(xh) if variable == "displacement" else exact.stress(xh)
        diff = (ex - uh).reshape(len(geo.dV), -1)
        total += float(np.einsum("qk,qk,q->", diff, diff, geo.dV)) * L ** 3
    return math.sqrt(total)


# --------------------------------------------------------------- benchmarks


@dataclass
class Benchmark:
    name: str
    mesh: Mesh
    assignment: dict
    materials: dict
    bc: BCSpec
    body_force: Callable | None
    exact: ExactSolution | None
    measures: tuple[str, ...]
    scales: Scales
    formulation_config: str
    info: dict = field(default_factory=dict)


def assignment_label(assignment: dict) -> str:
    return ";".join(f"{k}={Formulation.parse(v).value}" for k, v in sorted(assignment.items()))


def cube_benchmark(assignment: dict | None = None, lam: float = 1.0, mu: float = 1.0,
                   single: str | Formulation | None = None) -> Benchmark:
    """Cube problem; ``single`` assigns one formulation to all octants."""
    mesh = build_box_mesh((2.0, 2.0, 2.0), (2, 2, 2), octant_rule((2, 2, 2)))
    if single is not None:
        f = Formulation.parse(single) if not isinstance(single, Formulation) else single
        assignment = {n: f.value for n in mesh.subdomain_names}
    assignment = dict(assignment or DEFAULT_CUBE_ASSIGNMENT)
    exact = cube_exact(lam, mu)
    mat = IsotropicMaterial(mu, lam)
    bc = BCSpec({t: BoundaryCondition.clamped(exact.displacement) for t in mesh.tag_names})
    E_ref = mu * (3 * lam + 2 * mu) / (lam + mu)
    scales = Scales(length=2.0 * math.sqrt(3.0), stress=E_ref)
    label = assignment_label(assignment)
    if len(set(Formulation.parse(v) for v in assignment.values())) == 1:
        label = "all=" + Formulation.parse(next(iter(assignment.values()))).value
    return Benchmark("cube", mesh, assignment, {n: mat for n in mesh.subdomain_names}, bc,
                     exact.body_force, exact, ("displacement_L2",), scales, label)


@dataclass(frozen=True)
class HoseMaterials:
    E_S: float = 200e9
    nu_S: float = 0.285
    E_R: float = 0.01e9
    nu_R: float = 0.5


def _pin_vertices(mesh: Mesh, R_in: float) -> list[PointConstraint]:
    """Azimuthal pins at theta = 0, pi/2, pi on the bottom face (r = R_in)."""
    x = mesh.vertices
    out = []
    for theta, comp in ((0.0, 1), (0.5 * math.pi, 0), (math.pi, 1)):
        target = np.array([R_in * math.cos(theta), R_in * math.sin(theta), 0.0])
        d = np.linalg.norm(x - target, axis=1)
        v = int(d.argmin())
        if d[v] > 1e-9 * R_in:
            raise ValueError(f"no mesh vertex at theta = {theta:.4f} on the inner bottom edge")
        out.append(PointConstraint(v, comp, 0.0))
    return out


def hose_benchmark(name: str = "hose_uniform", radii: HoseRadii = HoseRadii(),
                   mats: HoseMaterials = HoseMaterials(), p_in: float | Callable = 1e6,
                   p_out: float = 0.0, length: float = 1.0, n_theta: int = 4, n_z: int = 1,
                   n_r_inner: int = 1, n_r_outer: int = 1,
                   assignment: dict | None = None) -> Benchmark:
    """Sheathed hose.  A callable ``p_in(theta)`` gives a nonuniform load (no exact solution)."""
    mesh = build_cylinder_shell_mesh(radii.R_in, radii.R_mid, radii.R_out, length, n_theta, n_z,
                                     n_r_inner, n_r_outer)
    m_R = lame_from_engineering(mats.E_R, mats.nu_R)
    m_S = lame_from_engineering(mats.E_S, mats.nu_S)
    assignment = dict(assignment or {"rubber": "U", "steel": "P"})

    def e_r(x):
        r = np.hypot(x[:, 0], x[:, 1])
        return np.column_stack([x[:, 0] / r, x[:, 1] / r, np.zeros_like(r)])

    if callable(p_in):
        pin_fn = p_in

        def inner(x):
            x = np.atleast_2d(x)
            return pin_fn(np.arctan2(x[:, 1], x[:, 0]))[:, None] * e_r(x)
    else:
        def inner(x):
            return p_in * e_r(np.atleast_2d(x))

    def outer(x):
        return -p_out * e_r(np.atleast_2d(x))

    axial = BoundaryCondition((2,), None, None)
    bc = BCSpec({"inner": BoundaryCondition.loaded(inner), "outer": BoundaryCondition.loaded(outer),
                 "bottom": axial, "top": axial}, tuple(_pin_vertices(mesh, radii.R_in)))
    exact = None
    measures: tuple[str, ...] = ()
    info = {"m_R": m_R, "m_S": m_S, "radii": radii, "p_out": p_out}
    if not callable(p_in):
        k = hose_constants_general(m_R, m_S, radii, p_in, p_out)
        exact = hose_exact(k, radii, m_R, m_S)
        measures = ("stress_L2",)
        info["constants"] = k
    # geometric mean of the moduli balances the compliance of both layers in the test norm
    scales = Scales(length=radii.R_out, stress=math.sqrt(mats.E_S * mats.E_R))
    return Benchmark(name, mesh, assignment, {"rubber": m_R, "steel": m_S}, bc, None, exact,
                     measures, scales, assignment_label(assignment), info)


# ------------------------------------------------------------------- studies


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{float(v) + 0.0:.10g}"  # no negative zero


def observed_rate(e_prev: float, e_cur: float) -> float:
    return math.log(e_prev / e_cur) / math.log(2.0)


@dataclass
class LevelResult:
    p: int
    level: int
    n_elements: int
    n_dof: int
    errors: dict
    residual: float
    gradient_max: float
    report: dict
    solution: Solution | None = None
    solver: dict = field(default_factory=dict)


@dataclass
class StudyResult:
    benchmark: Benchmark
    dp: int
    levels: list[LevelResult]

    def rows(self) -> list[dict]:
        out = []
        prev: dict = {}
        for lv in self.levels:
            for m in self.benchmark.measures:
                e = lv.errors[m]
                key = (lv.p, m)
                rate = observed_rate(prev[key], e) if key in prev and prev[key] > 0 and e > 0 else None
                prev[key] = e
                out.append(dict(zip(CSV_COLUMNS, (
                    self.benchmark.name, self.benchmark.formulation_config, lv.p, self.dp, lv.level,
                    lv.n_elements, lv.n_dof, m, e, rate))))
        return out

    def rate(self, p: int, measure: str, level: int | None = None) -> float:
        rows = [r for r in self.rows() if r["p"] == p and r["error_measure"] == measure]
        if level is not None:
            rows = [r for r in rows if r["level"] == level]
        return rows[-1]["rate"]

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows():
            w.writerow([fmt(r[c]) for c in CSV_COLUMNS])
        return buf.getvalue()

    def residual_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("benchmark", "formulation_config", "p", "dp", "level", "n_elements", "n_dof",
                    "total_residual", "gradient_max"))
        for lv in self.levels:
            w.writerow([self.benchmark.name, self.benchmark.formulation_config, lv.p, self.dp, lv.level,
                        lv.n_elements, lv.n_dof, fmt(lv.residual), fmt(lv.gradient_max)])
        return buf.getvalue()

    def dof_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = ("displacement_trace", "flux", "element_local", "total", "constrained", "solved",
                "matrix_nnz_upper")
        w.writerow(("p", "level", "n_elements") + keys)
        for lv in self.levels:
            w.writerow([lv.p, lv.level, lv.n_elements] + [lv.report.get(k, "") for k in keys])
        return buf.getvalue()


def convergence_study(bench: Benchmark, p_values: Sequence[int], refinements: int, dp: int = 1,
                      solver_opts: SolverOptions = SolverOptions(), keep_solutions: bool = False,
                      on_level: Callable[[LevelResult], None] | None = None) -> StudyResult:
    """Solve on levels 0..refinements for every p and record errors and residuals."""
    meshes = [bench.mesh]
    for _ in range(refinements):
        meshes.append(refine_uniform(meshes[-1]))
    levels = []
    for p in p_values:
        for level, mesh in enumerate(meshes):
            sol = assemble_and_solve(mesh, bench.assignment, bench.materials, bench.bc, bench.body_force,
                                     p, dp, solver_opts, bench.scales)
            errors = {m: compute_error(sol, bench.exact, m) for m in bench.measures}
            lv = LevelResult(p, level, mesh.n_elements, sol.n_dof, errors, sol.total_residual,
                             sol.gradient_max, sol.report, sol if keep_solutions else None, sol.solver_info)
            log.info("%s p=%d level=%d ndof=%d errors=%s residual=%.4e", bench.name, p, level,
                     sol.n_dof, errors, sol.total_residual)
            levels.append(lv)
            if on_level is not None:
                on_level(lv)
    return StudyResult(bench, dp, levels)


# ------------------------------------------------------- interface samples


def interface_samples(solution: Solution, n_per_face: int = 3) -> list[dict]:
    """sigma_tt sampled on both sides of the rubber/steel interface (physical units)."""
    mesh = solution.mesh
    L = solution.scales.length
    st = (np.arange(n_per_face) + 0.5) / n_per_face
    S, T = np.meshgrid(st, st, indexing="ij")
    st2 = np.column_stack([S.ravel(), T.ravel()])
    rows = []
    for fid, tag in enumerate(mesh.face_tag):
        if tag != "interface":
            continue
        sides = {}
        for e, lf in ((mesh.face_owner[fid], mesh.face_owner_local[fid]),
                      (mesh.face_neighbor[fid], mesh.face_neighbor_local[fid])):
            xi = face_point_to_reference(lf, st2)
            x, J, detJ = geometry_eval(mesh, e, xi)
            volume = element_geometry(mesh, e, solution.p, solution.dp).volume
            geo = ElementGeometry(x, J, detJ, np.zeros(len(xi)), xi, volume)
            sides[mesh.subdomain_of(e)] = (x * L, field_values(solution, e, "stress", geo))
        x, s_r = sides["rubber"]
        _, s_s = _match(x, sides["steel"])
        theta = np.arctan2(x[:, 1], x[:, 0])
        et = np.column_stack([-np.sin(theta), np.cos(theta), np.zeros_like(theta)])
        tt_r = np.einsum("qi,qij,qj->q", et, s_r, et)
        tt_s = np.einsum("qi,qij,qj->q", et, s_s, et)
        for q in range(len(theta)):
            rows.append({"theta": float(theta[q]), "z": float(x[q, 2]),
                         "sigma_tt_rubber": float(tt_r[q]), "sigma_tt_steel": float(tt_s[q]),
                         "jump": float(tt_s[q] - tt_r[q])})
    rows.sort(key=lambda r: (round(r["z"], 9), round(r["theta"], 9)))
    return rows


def _match(x_ref: np.ndarray, other) -> tuple[np.ndarray, np.ndarray]:
    x, vals = other
    d = np.linalg.norm(x_ref[:, None, :] - x[None, :, :], axis=2)
    idx = d.argmin(axis=1)
    return x[idx], vals[idx]


def samples_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ("theta", "z", "sigma_tt_rubber", "sigma_tt_steel", "jump")
    w.writerow(cols)
    for r in rows:
        w.writerow([fmt(r[c]) for c in cols])
    return buf.getvalue()
