"""Acceptance criteria, one test per criterion, each printing a pass/fail line.

The heavy studies are shared between criteria through module fixtures.
Levels whose direct factorization does not fit in memory are reported with
the reason instead of a number.
"""
import os
import subprocess
import sys
import textwrap
from pathlib import Path

import numpy as np
import pytest
from scipy import sparse

from coupled_dpg.bench import (HoseMaterials, StudyResult, compute_error, convergence_study, cube_benchmark,
                               hose_benchmark, hose_constants, hose_radial, interface_samples)
from coupled_dpg.dpg import cholesky_checked, condense, condense_with_l2_shortcut, local_residual
from coupled_dpg.forms import Formulation, gram_blocks, local_gram_matrix, local_load_vector, local_operator_matrix
from coupled_dpg.material import IsotropicMaterial
from coupled_dpg.mesh import build_box_mesh, refine_uniform
from coupled_dpg.system import (BCSpec, BoundaryCondition, ResourceLimitError, SolverError, SolverOptions,
                                assemble_and_solve)

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

ALL = list(Formulation)
CUBE_OPTS = SolverOptions(method="auto")
# Jacobi CG stalls on the hose (moduli four orders of magnitude apart), so a
# factorization that does not fit is reported instead of attempted iteratively.
HOSE_OPTS = SolverOptions(method="direct")


class Run:
    """Levels of one study for one p, and the failure that stopped it, if any."""

    def __init__(self, bench, p, refinements, opts):
        self.bench, self.p = bench, p
        self.levels, self.failure = [], None
        try:
            convergence_study(bench, [p], refinements, solver_opts=opts, on_level=self.levels.append)
        except (ResourceLimitError, SolverError, MemoryError) as exc:
            self.failure = f"level {len(self.levels)}: {type(exc).__name__}: {exc}"

    @property
    def result(self) -> StudyResult:
        return StudyResult(self.bench, 1, self.levels)

    def last_rate(self, measure):
        rows = [r for r in self.result.rows() if r["error_measure"] == measure]
        return rows[-1]["rate"] if rows else None

    def describe(self, measure):
        errs = ", ".join(f"{lv.errors[measure]:.4g}" for lv in self.levels)
        methods = ",".join(lv.solver.get("method", "?") for lv in self.levels)
        return f"errors [{errs}] solvers [{methods}]"


@pytest.fixture(scope="module")
def cube_runs():
    return {p: Run(cube_benchmark(), p, 3, CUBE_OPTS) for p in (1, 2, 3)}


@pytest.fixture(scope="module")
def single_runs():
    return {f: Run(cube_benchmark(single=f), 2, 2, CUBE_OPTS) for f in ALL}


@pytest.fixture(scope="module")
def hose_runs():
    return {p: Run(hose_benchmark(), p, 3, HOSE_OPTS) for p in (2, 3)}


def test_criterion_1_cube_coupled_rates(cube_runs, criterion):
    notes, ok = [], True
    for p, run in cube_runs.items():
        rate = run.last_rate("displacement_L2")
        good = run.failure is None and len(run.levels) == 4 and rate is not None and rate >= p - 0.2
        ok &= good
        rate_s = "n/a" if rate is None else f"{rate:.3f}"
        notes.append(f"p={p} last rate {rate_s} (need >= {p - 0.2:.1f}) {run.describe('displacement_L2')}"
                     + (f" stopped at {run.failure}" if run.failure else ""))
    for p in (4, 5):
        smoke = Run(cube_benchmark(), p, 1, CUBE_OPTS)
        errs = [lv.errors["displacement_L2"] for lv in smoke.levels]
        good = smoke.failure is None and len(errs) == 2 and errs[1] < errs[0]
        ok &= good
        notes.append(f"p={p} smoke errors {[f'{e:.4g}' for e in errs]}"
                     + (f" stopped at {smoke.failure}" if smoke.failure else ""))
    criterion(1, ok, "; ".join(notes))
    assert ok


def test_criterion_2_single_formulations(single_runs, criterion):
    notes, ok = [], True
    for f, run in single_runs.items():
        rate = run.last_rate("displacement_L2")
        good = run.failure is None and rate is not None and rate >= 1.8
        ok &= good
        notes.append(f"{f.value}: {'n/a' if rate is None else f'{rate:.3f}'}")
    criterion(2, ok, "p=2 last rates " + ", ".join(notes) + " (need >= 1.8)")
    assert ok


def test_criterion_3_hose_rates(hose_runs, criterion):
    notes, ok = [], True
    for p, run in hose_runs.items():
        rate = run.last_rate("stress_L2")
        complete = run.failure is None and len(run.levels) == 4
        good = complete and rate is not None and rate >= p - 0.3
        ok &= good
        rate_s = "n/a" if rate is None else f"{rate:.3f}"
        label = "last rate" if complete else "rate of last completed interval"
        notes.append(f"p={p} {label} {rate_s} (need >= {p - 0.3:.1f} over levels 2-3) {run.describe('stress_L2')}"
                     + (f" stopped at {run.failure}" if run.failure else ""))
    criterion(3, ok, "; ".join(notes))
    assert ok


def test_criterion_4_incompressibility_robustness(criterion):
    mesh = refine_uniform(hose_benchmark().mesh)
    errors = {}
    for nu in (0.499, 0.5):
        b = hose_benchmark(mats=HoseMaterials(nu_R=nu))
        sol = assemble_and_solve(mesh, b.assignment, b.materials, b.bc, None, 2, 1, HOSE_OPTS, b.scales)
        errors[nu] = compute_error(sol, b.exact, "stress_L2")
    factor = max(errors.values()) / min(errors.values())
    ok = factor <= 2.0
    criterion(4, ok, f"stress errors nu=0.499: {errors[0.499]:.4g}, nu=0.5: {errors[0.5]:.4g}, "
                     f"factor {factor:.3f} (need <= 2)")
    assert ok


def _dense_minimiser(sol, f, body_force):
    mesh, p, dp = sol.mesh, sol.p, sol.dp
    m = sol.materials["domain"]
    B = local_operator_matrix(mesh, 0, f, m, p, dp)
    ell = local_load_vector(mesh, 0, f, body_force, p, dp)
    G = local_gram_matrix(mesh, 0, f, p, dp)
    # whitening by the symmetric inverse square root, no shared factorization code
    lam, V = np.linalg.eigh(G)
    R = (V / np.sqrt(lam)) @ V.T
    W, r = R @ B, R @ ell
    free_global = sol.system["free"]
    ed = sol.dofmap.elements[0]
    fixed = np.array([g >= 0 and not free_global[g] for g in ed.gmap])
    u = np.zeros(B.shape[1])
    u[fixed] = sol.coefficients[0][fixed]
    u[~fixed] = np.linalg.lstsq(W[:, ~fixed], r - W[:, fixed] @ u[fixed], rcond=None)[0]
    return u


def test_criterion_5_dense_oracle(criterion):
    sides = ("x0", "x1", "y0", "y1", "z0", "z1")

    def g(x):
        return np.column_stack([np.sin(x[:, 0] + x[:, 1]), x[:, 2] ** 2, np.cos(x[:, 0]) * x[:, 1]])

    def force(x):
        return np.column_stack([x[:, 0] * x[:, 1], np.exp(x[:, 2]), 1 + 0 * x[:, 0]])

    def traction(x):
        return np.column_stack([x[:, 1], 0 * x[:, 0] + 1, x[:, 2] * x[:, 0]])

    worst, ok, cases = 0.0, True, 0
    for extents in ((1.0, 1.0, 1.0), (2.0, 0.5, 1.0), (0.1, 1.0, 3.0)):
        mesh = build_box_mesh(extents, (1, 1, 1))
        for bc_kind in ("clamped", "mixed"):
            faces = {t: BoundaryCondition.clamped(g) for t in sides}
            if bc_kind == "mixed":
                faces.update({t: BoundaryCondition.loaded(traction) for t in ("x1", "y1", "z1")})
            for f in ALL:
                mat = IsotropicMaterial(mu=1.0, lam=1.0)
                sol = assemble_and_solve(mesh, {"domain": f}, {"domain": mat}, BCSpec(faces), force, 1, 1,
                                         keep_system=True)
                u = _dense_minimiser(sol, f, force)
                rel = np.linalg.norm(sol.coefficients[0] - u) / np.linalg.norm(u)
                worst = max(worst, rel)
                ok &= rel <= 1e-10
                cases += 1
    criterion(5, ok, f"{cases} single-element cases, worst relative difference {worst:.2e} (need <= 1e-10)")
    assert ok


def test_criterion_6_linear_algebra_identities(criterion):
    rng = np.random.default_rng(7)
    worst = {"condense": 0.0, "residual": 0.0, "shortcut": 0.0}
    for trial in range(20):
        n_test = int(rng.integers(2, 201))
        n_trial = int(rng.integers(1, min(80, n_test) + 1))
        B = rng.standard_normal((n_test, n_trial))
        ell = rng.standard_normal(n_test)
        M = rng.standard_normal((n_test, n_test))
        G = M @ M.T / n_test + np.eye(n_test)
        sys_ = condense(B, ell, G)
        Ginv = np.linalg.inv(G)
        K_ref = B.T @ Ginv @ B
        worst["condense"] = max(worst["condense"], np.linalg.norm(sys_.stiffness - K_ref) / np.linalg.norm(K_ref))
        u = rng.standard_normal(n_trial)
        d = B @ u - ell
        q = d @ Ginv @ d
        worst["residual"] = max(worst["residual"], abs(local_residual(sys_, u) - q) / q)
        k = int(rng.integers(1, n_test + 1))
        G2 = G.copy()
        G2[:k, :] = 0.0
        G2[:, :k] = 0.0
        G2[:k, :k] = np.diag(rng.random(k) + 0.5)
        full = condense(B, ell, G2)
        short = condense_with_l2_shortcut(B, ell, G2, range(k))
        worst["shortcut"] = max(worst["shortcut"],
                                np.linalg.norm(short.stiffness - full.stiffness) / np.linalg.norm(full.stiffness))
    ok = worst["condense"] <= 1e-11 and worst["residual"] <= 1e-11 and worst["shortcut"] <= 1e-12
    criterion(6, ok, "20 random systems: condense {condense:.1e} (<= 1e-11), residual {residual:.1e} (<= 1e-11), "
                     "L2 shortcut {shortcut:.1e} (<= 1e-12)".format(**worst))
    assert ok


def test_criterion_7_structural_invariants(cube_runs, single_runs, hose_runs, criterion):
    notes, ok = [], True
    # Gram matrices on every element of the level 0-2 meshes, every formulation
    n_checked = 0
    gram_ok = True
    for mesh in (cube_benchmark().mesh, hose_benchmark().mesh):
        for level in range(3):
            for e in range(mesh.n_elements):
                for f in ALL:
                    for blk in gram_blocks(mesh, e, f, 2, 1):
                        np.testing.assert_array_equal(blk.G, blk.G.T)
                        try:
                            cholesky_checked(blk.G)
                        except np.linalg.LinAlgError:
                            gram_ok = False
                n_checked += 1
            mesh = refine_uniform(mesh)
    ok &= gram_ok
    notes.append(f"Gram SPD on {n_checked} elements x 5 formulations: {gram_ok}")

    # symmetry of the assembled matrices
    sym_ok = True
    for b in (cube_benchmark(), hose_benchmark()):
        mesh = refine_uniform(b.mesh)
        sol = assemble_and_solve(mesh, b.assignment, b.materials, b.bc, b.body_force, 2, 1, HOSE_OPTS, b.scales,
                                 keep_system=True)
        A = sol.system["A"]
        full = (A + A.T - sparse.diags(A.diagonal())).tocsr()
        sym_ok &= abs(full - full.T).max() == 0
    ok &= sym_ok
    notes.append(f"global matrix symmetric: {sym_ok}")

    # residual monotonicity and normal-equations gradient across every study
    bad_res, worst_grad = [], 0.0
    studies = [(f"cube p={p}", r) for p, r in cube_runs.items()]
    studies += [(f"cube all={f.value}", r) for f, r in single_runs.items()]
    studies += [(f"hose p={p}", r) for p, r in hose_runs.items()]
    for name, run in studies:
        res = [lv.residual for lv in run.levels]
        for k in range(1, len(res)):
            if not res[k] < res[k - 1]:
                bad_res.append(f"{name} level {k - 1}->{k}: {res[k - 1]:.4g} -> {res[k]:.4g}")
        for lv in run.levels:
            worst_grad = max(worst_grad, lv.gradient_max)
    ok &= not bad_res and worst_grad <= 1e-9
    notes.append("residual strictly decreasing: " + ("yes" if not bad_res else "no, " + "; ".join(bad_res)))
    notes.append(f"max gradient {worst_grad:.2e} (need <= 1e-9)")
    criterion(7, ok, "; ".join(notes))
    assert ok


def test_criterion_8_hose_exact_and_demo(criterion):
    notes, ok = [], True
    b = hose_benchmark()
    m_R, m_S = b.info["m_R"], b.info["m_S"]
    radii = b.info["radii"]
    rng = np.random.default_rng(3)
    worst = 0.0
    for p_in, p_out in ((1e6, 0.0), (1e6, 0.4e6), (0.0, 1e6)):
        k = hose_constants(m_R, m_S, radii, p_in, p_out)
        scale = max(p_in, p_out)
        r = rng.random(100)
        for side, lo, hi, mat, bb in (("rubber", radii.R_in, radii.R_mid, m_R, k.A),
                                      ("steel", radii.R_mid, radii.R_out, m_S, k.C)):
            rr = lo + r * (hi - lo)
            _, _, srr, stt, _ = hose_radial(k, radii, m_R, m_S, rr, side)
            ode = np.abs(4 * mat.mu * bb / rr ** 3 + (srr - stt) / rr) * rr / scale
            worst = max(worst, ode.max())
        a = hose_radial(k, radii, m_R, m_S, radii.R_mid, "rubber")
        c = hose_radial(k, radii, m_R, m_S, radii.R_mid, "steel")
        worst = max(worst, abs(a[0] - c[0]) / abs(a[0]), abs(a[2] - c[2]) / scale,
                    abs(hose_radial(k, radii, m_R, m_S, radii.R_in)[2] + p_in) / scale,
                    abs(hose_radial(k, radii, m_R, m_S, radii.R_out)[2] + p_out) / scale)
    ok &= worst <= 1e-10
    notes.append(f"ODE, continuity and pressure conditions worst relative residual {worst:.2e} (need <= 1e-10)")

    k = b.info["constants"]
    exact_jump = hose_radial(k, radii, m_R, m_S, radii.R_mid, "steel")[3] - \
        hose_radial(k, radii, m_R, m_S, radii.R_mid, "rubber")[3]
    ok &= exact_jump != 0
    demo = hose_benchmark("hose_cos2", p_in=lambda th: 1e6 * np.cos(th) ** 2)
    study = convergence_study(demo, [2], 2, solver_opts=HOSE_OPTS, keep_solutions=True)
    rows = interface_samples(study.levels[-1].solution, 3)
    jumps = np.array([r["jump"] for r in rows])
    same = np.sign(jumps) == np.sign(exact_jump)
    ok &= bool(same.all())
    notes.append(f"exact sigma_tt jump {exact_jump:.4g} Pa; cos^2 demo jumps in [{jumps.min():.4g}, {jumps.max():.4g}] Pa, "
                 f"{int(same.sum())}/{len(jumps)} samples with the exact sign")
    criterion(8, ok, "; ".join(notes))
    assert ok


DETERMINISM_RUNS = {
    # (benchmark, p, refinements): levels whose factorization fits in memory
    "cube_p12": ("cube", [1, 2], 3),
    "cube_p3": ("cube", [3], 2),
    "hose_p2": ("hose_uniform", [2], 3),
    "hose_p3": ("hose_uniform", [3], 2),
}


def _run_cli(tmp: Path, name: str, bench: str, p: list, refinements: int, threads: int) -> bytes:
    out = tmp / f"{name}_t{threads}"
    cfg = tmp / f"{name}_t{threads}.yaml"
    cfg.write_text(textwrap.dedent(f"""\
        benchmark: {bench}
        p: {p}
        refinements: {refinements}
        solver: {{method: direct}}
        output: {out}
        """))
    env = dict(os.environ, COUPLED_DPG_THREADS=str(threads))
    proc = subprocess.run([sys.executable, "-m", "coupled_dpg", "run", str(cfg)], env=env,
                          capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(f"{name} with {threads} threads exited {proc.returncode}: {proc.stderr[-2000:]}")
    return (out / "convergence.csv").read_bytes()


def _expected_csv(runs: dict, p_values: list, refinements: int) -> bytes:
    levels = []
    bench = None
    for p in p_values:
        run = runs[p]
        bench = run.bench
        levels += [lv for lv in run.levels if lv.level <= refinements]
    return StudyResult(bench, 1, levels).csv().encode()


def test_criterion_9_determinism(cube_runs, hose_runs, tmp_path, criterion):
    notes, ok = [], True
    for name, (bench, p, refinements) in DETERMINISM_RUNS.items():
        try:
            one = _run_cli(tmp_path, name, bench, p, refinements, 1)
            two = _run_cli(tmp_path, name, bench, p, refinements, 2)
        except RuntimeError as exc:
            ok = False
            notes.append(f"{name}: {exc}")
            continue
        runs = cube_runs if bench == "cube" else hose_runs
        in_process = _expected_csv(runs, p, refinements)
        same = one == two
        matches = one == in_process
        ok &= same and matches
        notes.append(f"{name} levels 0-{refinements}: 1 vs 2 threads identical={same}, "
                     f"matches acceptance run={matches}")
    notes.append("cube p=3 level 3 is solved by CG and hose p=3 level 3 does not fit a factorization, "
                 "so neither is part of this direct-solver comparison")
    criterion(9, ok, "; ".join(notes))
    assert ok
