"""Iteration counts of Jacobi CG on the coupled cube systems, level by level.

Used to size the iterative fallback when a factorization does not fit:

    python3 scripts/cg_scaling.py [p] [levels]
"""
import sys
import time

from coupled_dpg.bench import cube_benchmark
from coupled_dpg.mesh import refine_uniform
from coupled_dpg.system import SolverOptions, assemble_and_solve, solve_spd


def main(p: int = 3, levels: int = 3) -> None:
    b = cube_benchmark()
    mesh = b.mesh
    print("level  n  nnz_upper  iterations  seconds")
    for level in range(levels):
        sol = assemble_and_solve(mesh, b.assignment, b.materials, b.bc, b.body_force, p, 1,
                                 SolverOptions(method="direct"), b.scales, keep_system=True)
        A, rhs = sol.system["A"], sol.system["rhs"]
        t = time.perf_counter()
        _, info = solve_spd(A, rhs, SolverOptions(method="cg"))
        print(level, A.shape[0], A.nnz, info["iterations"], f"{time.perf_counter() - t:.1f}", flush=True)
        mesh = refine_uniform(mesh)


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:3]))
