"""Global unknowns, boundary conditions, assembly and solution.

Global unknowns come in two classes:

* displacement nodes: every H1 node on the element boundaries of the H1
  displacement of S/D/P elements and of the trace ``u_hat`` of U/M
  elements.  One set of nodes serves all of them, which glues displacements
  across subdomains;
* flux nodes: ``p*p`` per face, carrying the normal traction.  They are the
  ``sigma_n`` unknowns of U/D/P elements and the face normal unknowns of the
  Hdiv stress of S/M elements.  Values refer to the face's canonical normal,
  which points from the lower to the higher element id (outward on the
  boundary); an element sees them with sign +1 or -1.

Everything else is element-local and eliminated by static condensation
before the global solve.  Boundary data is imposed by constraining global
unknowns.
"""
from __future__ import annotations

import glob
import logging
import math
import os
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import spaces
from .dpg import factor_blocks, static_condensation, whiten
from .forms import (Formulation, element_geometry, gram_blocks, local_load_vector, local_operator_matrix,
                    trial_layout)
from .material import IsotropicMaterial
from .mesh import Mesh

log = logging.getLogger(__name__)


class ResourceLimitError(RuntimeError):
    pass


class SolverError(RuntimeError):
    pass


# --------------------------------------------------------------------- dofs


@dataclass
class ElementDofs:
    formulation: Formulation
    gmap: np.ndarray  # local trial index -> global index, -1 for element-local
    sign: np.ndarray

    @property
    def exposed(self) -> np.ndarray:
        return np.flatnonzero(self.gmap >= 0)


@dataclass
class DofMap:
    p: int
    node_index: dict
    flux_index: dict
    flux_face: np.ndarray  # face id of every flux node
    face_sign: np.ndarray  # (n_faces, 2): sign seen by owner / neighbor
    elements: list[ElementDofs]

    @property
    def n_nodes(self) -> int:
        return len(self.node_index)

    @property
    def n_flux_nodes(self) -> int:
        return len(self.flux_index)

    @property
    def n_global(self) -> int:
        return 3 * (self.n_nodes + self.n_flux_nodes)

    def node_dof(self, node: int, c: int) -> int:
        return 3 * node + c

    def flux_dof(self, fnode: int, c: int) -> int:
        return 3 * (self.n_nodes + fnode) + c

    @property
    def n_local(self) -> int:
        return int(sum(int((ed.gmap < 0).sum()) for ed in self.elements))

    def report(self) -> dict:
        return {
            "displacement_trace": 3 * self.n_nodes,
            "flux": 3 * self.n_flux_nodes,
            "element_local": self.n_local,
            "total": self.n_global + self.n_local,
        }


def _element_sign(mesh: Mesh, e: int, fid: int) -> float:
    nb = mesh.face_neighbor[fid]
    if nb < 0:
        return 1.0
    return 1.0 if e == min(mesh.face_owner[fid], nb) else -1.0


def build_dof_map(mesh: Mesh, assignment: Mapping[str, Formulation], p: int,
                  flip_faces: Sequence[int] = ()) -> DofMap:
    """Number the global unknowns.

    ``flip_faces`` reverses the canonical normal of the listed faces; the
    assembled system is invariant under this choice.
    """
    missing = set(mesh.subdomain_names) - set(assignment)
    if missing:
        raise ValueError(f"subdomains without a formulation: {sorted(missing)}")
    face_sign = np.zeros((mesh.n_faces, 2))
    for fid in range(mesh.n_faces):
        face_sign[fid, 0] = _element_sign(mesh, mesh.face_owner[fid], fid)
        if mesh.face_neighbor[fid] >= 0:
            face_sign[fid, 1] = -face_sign[fid, 0]
    face_sign[list(flip_faces)] *= -1.0

    node_index: dict = {}
    flux_index: dict = {}
    flux_face: list[int] = []
    bnd = spaces.h1_boundary_dofs(p)
    lab = spaces.h1_labels(p)
    hd_axis, hd_lab, hd_face = spaces.hdiv_layout(p)
    n_h1, n_hd, n_fl = spaces.h1_count(p), spaces.hdiv_count(p), 6 * p * p
    raw = []
    for e in range(mesh.n_elements):
        form = Formulation(assignment[mesh.subdomain_of(e)])
        vids = mesh.elements[e]
        layout = trial_layout(form, p)
        gmap = np.full(layout.size, -1, dtype=np.int64)
        fidx = np.full(layout.size, -1, dtype=np.int64)
        sign = np.ones(layout.size)
        signs = [face_sign[fid, 0] if mesh.face_owner[fid] == e else face_sign[fid, 1]
                 for fid in mesh.element_faces[e]]

        def node(key):
            return node_index.setdefault(key, len(node_index))

        def flux(key, f):
            if key not in flux_index:
                flux_index[key] = len(flux_index)
                flux_face.append(int(mesh.element_faces[e, f]))
            return flux_index[key]

        for var, off in zip(layout.variables, layout.offsets):
            if var.name == "u" and var.space == "H1":
                for a in bnd:
                    n = node(spaces.point_key(vids, lab[a], p))
                    for c in range(3):
                        gmap[off + c * n_h1 + a] = 3 * n + c
            elif var.name == "u_hat":
                for b, a in enumerate(bnd):
                    n = node(spaces.point_key(vids, lab[a], p))
                    for c in range(3):
                        gmap[off + c * len(bnd) + b] = 3 * n + c
            elif var.space == "Hdiv":
                for a in np.flatnonzero(hd_face >= 0):
                    f = int(hd_face[a])
                    d = hd_axis[a]
                    fl = [2 * v + 1 for v in hd_lab[a]]
                    fl[d] = 2 * p if hd_lab[a][d] else 0
                    m = flux(spaces.point_key(vids, fl, 2 * p), f)
                    for r in range(3):
                        fidx[off + r * n_hd + a] = 3 * m + r
                        sign[off + r * n_hd + a] = signs[f]
            elif var.space == "TraceHdiv":
                for f in range(6):
                    for jk, key in enumerate(spaces.flux_node_keys(vids, p, f)):
                        m = flux(key, f)
                        for c in range(3):
                            idx = off + c * n_fl + f * p * p + jk
                            fidx[idx] = 3 * m + c
                            sign[idx] = signs[f]
        raw.append((form, gmap, fidx, sign))
    # flux unknowns follow the displacement nodes
    shift = 3 * len(node_index)
    out = [ElementDofs(form, np.where(fidx >= 0, fidx + shift, gmap), sign)
           for form, gmap, fidx, sign in raw]
    return DofMap(p, node_index, flux_index, np.array(flux_face, dtype=np.int64), face_sign, out)


# ---------------------------------------------------------- boundary data


def _zero_field(x):
    return np.zeros((np.atleast_2d(x).shape[0], 3))


@dataclass(frozen=True)
class BoundaryCondition:
    """Data on one boundary part.

    Cartesian components listed in ``displacement_components`` take their
    value from ``displacement``; the remaining ones from ``traction`` (per
    unit area, for the outward normal).  Missing callables mean zero data.
    """

    displacement_components: tuple[int, ...] = (0, 1, 2)
    displacement: Callable | None = None
    traction: Callable | None = None

    def __post_init__(self):
        comps = tuple(sorted(set(int(c) for c in self.displacement_components)))
        if any(c not in (0, 1, 2) for c in comps):
            raise ValueError("displacement components must lie in {0, 1, 2}")
        object.__setattr__(self, "displacement_components", comps)

    @property
    def traction_components(self) -> tuple[int, ...]:
        return tuple(c for c in range(3) if c not in self.displacement_components)

    @classmethod
    def clamped(cls, g: Callable | None = None) -> "BoundaryCondition":
        return cls((0, 1, 2), g, None)

    @classmethod
    def loaded(cls, t: Callable | None = None) -> "BoundaryCondition":
        return cls((), None, t)


@dataclass(frozen=True)
class PointConstraint:
    vertex: int
    component: int
    value: float = 0.0


@dataclass(frozen=True)
class BCSpec:
    faces: Mapping[str, BoundaryCondition]
    points: tuple[PointConstraint, ...] = ()


@dataclass
class Constraints:
    values: dict  # global dof -> prescribed value

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        idx = np.array(sorted(self.values), dtype=np.int64)
        return idx, np.array([self.values[i] for i in idx], dtype=float)


def _vertex_key(v: int, p: int) -> tuple:
    return ((int(v), p ** 3),)


def apply_boundary_conditions(dofmap: DofMap, mesh: Mesh, bc: BCSpec, p: int) -> Constraints:
    """Constrain displacement and flux unknowns on the tagged boundary parts.

    Every boundary face must belong to a part listed in ``bc``, and at least
    one displacement component must be prescribed somewhere.  Rigid motions
    left free by the data are not detected; pin them with point constraints.
    """
    if p != dofmap.p:
        raise ValueError("order mismatch between dof map and boundary data")
    boundary_tags = {mesh.face_tag[f] for f in range(mesh.n_faces) if mesh.is_boundary_face(f)}
    unknown = set(bc.faces) - set(mesh.tag_names)
    if unknown:
        raise ValueError(f"unknown boundary parts {sorted(unknown)}; mesh has {list(mesh.tag_names)}")
    uncovered = boundary_tags - set(bc.faces)
    if uncovered:
        raise ValueError(f"boundary parts without data: {sorted(uncovered)}")
    values: dict[int, float] = {}
    has_displacement = bool(bc.points)
    for tag in sorted(bc.faces):
        cond = bc.faces[tag]
        faces = mesh.faces_with_tag(tag)
        if cond.displacement_components and faces:
            has_displacement = True
            data = spaces.interpolate_boundary_data(mesh, cond.displacement or _zero_field, faces,
                                                    "TraceH1Face", p)
            for key, v in data.items():
                n = dofmap.node_index[key]
                for c in cond.displacement_components:
                    values.setdefault(dofmap.node_dof(n, c), float(v[c]))
        if cond.traction_components and faces:
            data = spaces.interpolate_boundary_data(mesh, cond.traction or _zero_field, faces,
                                                    "TraceHdivFace", p)
            for key, v in data.items():
                m = dofmap.flux_index[key]
                s = dofmap.face_sign[dofmap.flux_face[m], 0]
                for c in cond.traction_components:
                    values.setdefault(dofmap.flux_dof(m, c), s * float(v[c]))
    for pc in bc.points:
        key = _vertex_key(pc.vertex, p)
        if key not in dofmap.node_index:
            raise ValueError(f"vertex {pc.vertex} carries no displacement unknown")
        values[dofmap.node_dof(dofmap.node_index[key], pc.component)] = float(pc.value)
    if not has_displacement:
        raise ValueError("no displacement data anywhere: the problem is not well posed")
    return Constraints(values)


# ------------------------------------------------------------------- scales


@dataclass(frozen=True)
class Scales:
    """Reference length and stress used to nondimensionalize a run."""

    length: float = 1.0
    stress: float = 1.0

    def __post_init__(self):
        if not (self.length > 0 and self.stress > 0):
            raise ValueError("scales must be positive")

    def displacement_data(self, g: Callable | None) -> Callable | None:
        if g is None:
            return None
        L = self.length
        return lambda x: np.asarray(g(np.asarray(x) * L), dtype=float) / L

    def traction_data(self, t: Callable | None) -> Callable | None:
        if t is None:
            return None
        L, S = self.length, self.stress
        return lambda x: np.asarray(t(np.asarray(x) * L), dtype=float) / S

    def body_force(self, f: Callable | None) -> Callable | None:
        if f is None:
            return None
        L, S = self.length, self.stress
        return lambda x: np.asarray(f(np.asarray(x) * L), dtype=float) * (L / S)

    def bc(self, spec: BCSpec) -> BCSpec:
        faces = {k: BoundaryCondition(c.displacement_components, self.displacement_data(c.displacement),
                                      self.traction_data(c.traction)) for k, c in spec.faces.items()}
        points = tuple(PointConstraint(pc.vertex, pc.component, pc.value / self.length) for pc in spec.points)
        return BCSpec(faces, points)


# ------------------------------------------------------------------ solvers


@dataclass(frozen=True)
class SolverOptions:
    method: str = "auto"  # direct | cg | auto (direct, or cg when a factorization does not fit)
    cg_tol: float = 1e-12
    cg_maxiter_factor: float = 50.0
    memory_fraction: float = 0.8
    out_of_core: bool = True
    cache_bytes: int = 1 << 30

    def __post_init__(self):
        if self.method not in ("direct", "cg", "auto"):
            raise ValueError(f"unknown solver method {self.method!r}")


def available_memory() -> int:
    import psutil

    avail = psutil.virtual_memory().available
    for limit_file, usage_file in (("/sys/fs/cgroup/memory.max", "/sys/fs/cgroup/memory.current"),
                                   ("/sys/fs/cgroup/memory/memory.limit_in_bytes",
                                    "/sys/fs/cgroup/memory/memory.usage_in_bytes")):
        try:
            with open(limit_file) as fh:
                raw = fh.read().strip()
            with open(usage_file) as fh:
                used = int(fh.read().strip())
        except (OSError, ValueError):
            continue
        if raw.isdigit() and int(raw) < 1 << 60:
            avail = min(avail, int(raw) - used)
    return int(avail)


def _rss() -> int:
    import psutil

    return psutil.Process().memory_info().rss


def _release_memory() -> None:
    """Hand freed heap pages back to the OS so the memory guard sees them."""
    import ctypes
    import gc

    gc.collect()
    try:
        ctypes.CDLL("libc.so.6").malloc_trim(0)
    except (OSError, AttributeError):
        pass


def _pardiso():
    if "PYPARDISO_MKL_RT" not in os.environ:
        hits = sorted(glob.glob("/usr/local/lib/libmkl_rt.so*") + glob.glob("/usr/lib/*/libmkl_rt.so*"))
        if hits:
            os.environ["PYPARDISO_MKL_RT"] = hits[0]
    try:
        import pypardiso
        return pypardiso.PyPardisoSolver(mtype=2)
    except (ImportError, OSError):
        return None


# observed peak of the Pardiso reordering phase is about 30 bytes per stored entry
ANALYSIS_BYTES_PER_NNZ = 40


def _pardiso_setup(solver, out_of_core: bool) -> None:
    solver.set_iparm(1, 1)
    solver.set_iparm(2, 2)  # nested dissection
    solver.set_iparm(8, 2)  # iterative refinement steps
    solver.set_iparm(10, 8)
    solver.set_iparm(18, -1)
    solver.set_iparm(34, 1)  # reproducible results across thread counts
    solver.set_iparm(60, 2 if out_of_core else 0)


def _pardiso_free(solver) -> None:
    try:
        solver.free_memory(everything=True)
    except Exception:
        pass


def _pardiso_factor_solve(solver, A, rhs, out_of_core: bool):
    _pardiso_setup(solver, out_of_core)
    solver.set_phase(11)
    solver._call_pardiso(A, rhs)
    peak_kb = max(int(solver.get_iparm(15)), int(solver.get_iparm(16)) + int(solver.get_iparm(17)))
    return peak_kb


def _pardiso_solve(solver, A: sp.csr_matrix, b: np.ndarray, opts: SolverOptions) -> tuple[np.ndarray, str]:
    """In-core Cholesky when the predicted peak fits, else out-of-core."""
    solver._check_A(A)
    rhs = np.asfortranarray(b.reshape(-1, 1))
    limit = opts.memory_fraction * available_memory()
    analysis = ANALYSIS_BYTES_PER_NNZ * A.nnz
    if analysis > limit:
        raise ResourceLimitError(f"sparse factorization analysis needs about {analysis / 2**30:.2f} GB, "
                                 f"only {limit / 2**30:.2f} GB available (n={A.shape[0]}, nnz={A.nnz})")
    try:
        peak_kb = _pardiso_factor_solve(solver, A, rhs, False)
        log.info("direct solver: n=%d nnz=%d, predicted peak %.2f GB", A.shape[0], A.nnz, peak_kb / 2**20)
        if peak_kb * 1024 <= limit:
            solver.set_phase(23)
            return np.asarray(solver._call_pardiso(A, rhs)).reshape(-1), "pardiso"
    except Exception as exc:  # pypardiso raises its own error type
        raise SolverError(f"sparse Cholesky factorization failed: {exc}") from None
    finally:
        _pardiso_free(solver)
    msg = (f"sparse factorization needs about {peak_kb / 2**20:.2f} GB, "
           f"only {limit / 2**30:.2f} GB available (n={A.shape[0]}, nnz={A.nnz})")
    if not opts.out_of_core:
        raise ResourceLimitError(msg)
    # MKL writes its factor files into the working directory.
    core_mb = max(256, int(0.4 * limit / 2**20))
    saved = {k: os.environ.get(k) for k in ("MKL_PARDISO_OOC_MAX_CORE_SIZE", "MKL_PARDISO_OOC_KEEP_FILE")}
    cwd = os.getcwd()
    log.info("direct solver: out-of-core with %d MB in core", core_mb)
    try:
        with tempfile.TemporaryDirectory(prefix="coupled_dpg_ooc_") as tmp:
            os.environ["MKL_PARDISO_OOC_MAX_CORE_SIZE"] = str(core_mb)
            os.environ["MKL_PARDISO_OOC_KEEP_FILE"] = "0"
            os.chdir(tmp)
            try:
                _pardiso_factor_solve(solver, A, rhs, True)
                solver.set_phase(23)
                x = np.asarray(solver._call_pardiso(A, rhs)).reshape(-1)
            except Exception as exc:
                raise ResourceLimitError(f"{msg}; out-of-core factorization failed: {exc}") from None
            finally:
                _pardiso_free(solver)
                os.chdir(cwd)
    finally:
        for k, v in saved.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v
    return x, "pardiso-ooc"


def _sym_matvec(A_upper: sp.csr_matrix, x: np.ndarray) -> np.ndarray:
    """Product with the symmetric matrix stored as its upper triangle (no copy)."""
    return A_upper @ x + A_upper.T @ x - A_upper.diagonal() * x


def _direct(A_upper: sp.csr_matrix, b: np.ndarray, opts: SolverOptions) -> tuple[np.ndarray, dict]:
    solver = _pardiso()
    if solver is not None:
        x, method = _pardiso_solve(solver, A_upper, b, opts)
        return x, {"method": method}
    A = (A_upper + sp.triu(A_upper, 1).T).tocsc()
    try:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}") from None
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise SolverError("sparse factorization produced non-finite values")
    return x, {"method": "splu"}


def _cg(A_upper: sp.csr_matrix, b: np.ndarray, opts: SolverOptions) -> tuple[np.ndarray, dict]:
    """Jacobi-preconditioned conjugate gradients on the upper-triangle storage."""
    n = A_upper.shape[0]
    d = A_upper.diagonal()
    if np.any(d <= 0):
        raise SolverError("matrix has a non-positive diagonal entry")
    A = spla.LinearOperator((n, n), matvec=lambda v: _sym_matvec(A_upper, v), dtype=float)
    M = spla.LinearOperator((n, n), matvec=lambda v: v / d, dtype=float)
    maxiter = int(math.ceil(opts.cg_maxiter_factor * math.sqrt(n)))
    it = [0]

    def count(_):
        it[0] += 1
        if it[0] % 1000 == 0:
            log.info("cg: iteration %d of at most %d", it[0], maxiter)

    x, info = spla.cg(A, b, rtol=opts.cg_tol, atol=0.0, maxiter=maxiter, M=M, callback=count)
    rel = float(np.linalg.norm(_sym_matvec(A_upper, x) - b) / max(np.linalg.norm(b), 1e-300))
    if info != 0:
        raise SolverError(f"conjugate gradients did not converge in {maxiter} iterations "
                          f"(relative residual {rel:.3e})")
    log.info("cg: %d iterations, relative residual %.3e", it[0], rel)
    return x, {"method": "cg", "iterations": it[0], "relative_residual": rel}


def solve_spd(A_upper: sp.csr_matrix, b: np.ndarray, opts: SolverOptions = SolverOptions()) -> tuple[np.ndarray, dict]:
    """Solve with a symmetric positive definite matrix given by its upper triangle."""
    n = A_upper.shape[0]
    if n == 0:
        return np.zeros(0), {"method": "none"}
    if opts.method == "cg":
        return _cg(A_upper, b, opts)
    try:
        return _direct(A_upper, b, opts)
    except ResourceLimitError as exc:
        if opts.method == "direct":
            raise
        log.warning("%s; falling back to conjugate gradients", exc)
        _release_memory()
        return _cg(A_upper, b, opts)


# ----------------------------------------------------------------- assembly


@dataclass
class _ElementData:
    layout_size: int
    K: np.ndarray
    condensed: object
    factors: list
    W: np.ndarray | None
    nbytes: int


class _Cache:
    def __init__(self, budget: int):
        self.budget = budget
        self.data: OrderedDict = OrderedDict()
        self.used = 0

    def get(self, key):
        item = self.data.get(key)
        if item is not None:
            self.data.move_to_end(key)
        return item

    def put(self, key, item: _ElementData):
        if item.nbytes > self.budget:
            return
        self.data[key] = item
        self.used += item.nbytes
        while self.used > self.budget:
            _, old = self.data.popitem(last=False)
            self.used -= old.nbytes


def _element_data(mesh, e, form, mat, p, dp, interior, keep_W) -> _ElementData:
    geo = element_geometry(mesh, e, p, dp)
    label = f"element {e}, formulation {form.name}"
    B = local_operator_matrix(mesh, e, form, mat, p, dp, geo=geo)
    factors = factor_blocks(gram_blocks(mesh, e, form, p, dp, geo=geo), label)
    W = whiten(factors, B)
    K = W.T @ W
    K = 0.5 * (K + K.T)
    cond = static_condensation(K, interior, label)
    nbytes = K.nbytes + cond.S.nbytes + cond.K_ie.nbytes + (cond.chol_ii.nbytes if cond.chol_ii is not None else 0)
    if keep_W:
        nbytes += W.nbytes
    return _ElementData(B.shape[1], K, cond, factors, W if keep_W else None, nbytes)


@dataclass
class Solution:
    mesh: Mesh
    dofmap: DofMap
    assignment: dict
    materials: dict
    p: int
    dp: int
    scales: Scales
    coefficients: list  # per element local trial coefficients (nondimensional)
    element_residuals: np.ndarray
    gradient_max: float
    report: dict
    solver_info: dict = field(default_factory=dict)
    system: dict | None = None  # upper triangle "A", "rhs", "free" dof flags when kept

    @property
    def total_residual(self) -> float:
        return float(self.element_residuals.sum())

    @property
    def n_dof(self) -> int:
        return int(self.report["total"])


def _triu_coo(rows, cols, vals):
    keep = rows <= cols
    return rows[keep], cols[keep], vals[keep]


# float64 value and int32 column per entry of a sum of sparse matrices
ASSEMBLY_BYTES_PER_NNZ = 12


class _Accumulator:
    """Chunked COO -> CSR accumulation of the upper triangle."""

    def __init__(self, n: int, chunk: int = 20_000_000):
        self.n = n
        self.chunk = chunk
        self.parts: list = []
        self.count = 0
        self.A = sp.csr_matrix((n, n))

    def add(self, rows, cols, vals):
        self.parts.append((rows, cols, vals))
        self.count += rows.size
        if self.count >= self.chunk:
            self.flush()

    def flush(self):
        if not self.parts:
            return
        r = np.concatenate([p[0] for p in self.parts])
        c = np.concatenate([p[1] for p in self.parts])
        v = np.concatenate([p[2] for p in self.parts])
        self.parts, self.count = [], 0
        chunk = sp.csr_matrix((v, (r, c)), shape=(self.n, self.n))
        del r, c, v
        # the sum is a new matrix next to both operands
        need = ASSEMBLY_BYTES_PER_NNZ * (self.A.nnz + chunk.nnz)
        avail = available_memory()
        if need > avail:
            _release_memory()
            avail = available_memory()
        if need > avail:
            raise ResourceLimitError(f"assembly needs about {need / 2**30:.2f} GB more, only {avail / 2**30:.2f} GB "
                                     f"available (n={self.n}, {self.A.nnz + chunk.nnz} entries so far)")
        self.A = self.A + chunk

    def result(self) -> sp.csr_matrix:
        self.flush()
        A = self.A.tocsr()
        A.sum_duplicates()
        A.sort_indices()
        return A


def assemble_and_solve(mesh: Mesh, assignment: Mapping[str, Formulation | str],
                       materials: Mapping[str, IsotropicMaterial], bc: BCSpec,
                       body_force: Callable | None, p: int, dp: int = 1,
                       solver_opts: SolverOptions = SolverOptions(), scales: Scales = Scales(),
                       flip_faces: Sequence[int] = (), keep_system: bool = False) -> Solution:
    """Assemble and solve the coupled DPG system.

    Inputs are in physical units; ``scales`` sets the reference length and
    stress used internally.  Stored coefficients are nondimensional.
    ``keep_system`` keeps the condensed global matrix and load on the result.
    """
    if p < 1 or dp < 1:
        raise ValueError("p and dp must be at least 1")
    assignment = {k: Formulation.parse(v) if not isinstance(v, Formulation) else v
                  for k, v in assignment.items()}
    mesh_s = mesh.scaled(scales.length) if scales.length != 1.0 else mesh
    mats = {k: m.scaled(scales.stress) for k, m in materials.items()}
    for name in mesh.subdomain_names:
        if name not in mats:
            raise ValueError(f"no material for subdomain {name!r}")
    f_s = scales.body_force(body_force)
    bc_s = scales.bc(bc)

    dm = build_dof_map(mesh_s, assignment, p, flip_faces)
    cons = apply_boundary_conditions(dm, mesh_s, bc_s, p)
    n = dm.n_global
    cidx, cval = cons.arrays()
    fixed = np.zeros(n)
    fixed[cidx] = cval
    free_index = np.full(n, -1, dtype=np.int64)
    is_free = np.ones(n, bool)
    is_free[cidx] = False
    free_index[is_free] = np.arange(int(is_free.sum()))
    n_free = int(is_free.sum())
    log.info("dofs: %s, free global %d", dm.report(), n_free)

    cache = _Cache(solver_opts.cache_bytes)
    acc = _Accumulator(n_free)
    rhs = np.zeros(n_free)
    loads: list = [None] * mesh_s.n_elements
    rr = np.zeros(mesh_s.n_elements)
    keep_W = f_s is not None

    def data_for(e):
        ed = dm.elements[e]
        form = ed.formulation
        mat = mats[mesh_s.subdomain_of(e)]
        key = (form.value, mat, mesh_s.geometry_key(e), p, dp)
        d = cache.get(key)
        if d is None or (keep_W and d.W is None):
            d = _element_data(mesh_s, e, form, mat, p, dp, ed.gmap < 0, keep_W)
            cache.put(key, d)
        return d

    for e in range(mesh_s.n_elements):
        ed = dm.elements[e]
        d = data_for(e)
        cond = d.condensed
        if f_s is not None:
            geo = element_geometry(mesh_s, e, p, dp)
            ell = local_load_vector(mesh_s, e, ed.formulation, f_s, p, dp, geo=geo)
            r = whiten(d.factors, ell)
            F = d.W.T @ r
            rr[e] = r @ r
            loads[e] = F
            Fe = cond.reduce_load(F)
        else:
            Fe = np.zeros(cond.exposed.size)
        g = ed.gmap[cond.exposed]
        s = ed.sign[cond.exposed]
        S = cond.S * np.outer(s, s)
        Fe = Fe * s
        fr = free_index[g]
        fm = fr >= 0
        # move prescribed values to the right-hand side
        Fe = Fe - S[:, ~fm] @ fixed[g[~fm]]
        rhs_idx = fr[fm]
        np.add.at(rhs, rhs_idx, Fe[fm])
        Sff = S[np.ix_(fm, fm)]
        R = np.broadcast_to(rhs_idx[:, None], Sff.shape)
        C = np.broadcast_to(rhs_idx[None, :], Sff.shape)
        acc.add(*_triu_coo(R.ravel(), C.ravel(), Sff.ravel()))
    A = acc.result()
    del acc
    _release_memory()
    log.info("assembled: n=%d nnz=%d, rss %.2f GB", n_free, A.nnz, _rss() / 2**30)
    x, info = solve_spd(A, rhs, solver_opts)
    u = fixed.copy()
    u[is_free] = x

    # gradient of the condensed normal equations at the solution
    Ax = _sym_matvec(A, x)
    gradient = float(np.abs(Ax - rhs).max()) if n_free else 0.0

    coefficients = []
    residuals = np.zeros(mesh_s.n_elements)
    for e in range(mesh_s.n_elements):
        ed = dm.elements[e]
        d = data_for(e)
        cond = d.condensed
        F = loads[e] if loads[e] is not None else np.zeros(d.layout_size)
        ue = u[ed.gmap[cond.exposed]] * ed.sign[cond.exposed]
        ul = cond.recover(F, ue)
        coefficients.append(ul)
        Ku = d.K @ ul
        gi = Ku[cond.interior] - F[cond.interior]
        if gi.size:
            gradient = max(gradient, float(np.abs(gi).max()))
        if d.W is not None and f_s is not None:
            geo = element_geometry(mesh_s, e, p, dp)
            ell = local_load_vector(mesh_s, e, ed.formulation, f_s, p, dp, geo=geo)
            res = d.W @ ul - whiten(d.factors, ell)
            residuals[e] = float(res @ res)
        else:
            residuals[e] = max(float(ul @ Ku - 2.0 * ul @ F + rr[e]), 0.0)
    report = dm.report()
    report.update({"constrained": int(cidx.size), "solved": n_free, "elements": mesh_s.n_elements,
                   "matrix_nnz_upper": int(A.nnz)})
    system = {"A": A, "rhs": rhs, "free": is_free} if keep_system else None
    return Solution(mesh_s, dm, dict(assignment), mats, p, dp, scales, coefficients, residuals,
                    gradient, report, info, system)
