"""Element matrices of the five broken formulations of linear elasticity.

Trial variables use order ``p``, test variables the enriched order
``p + dp``.  Every variable's local coefficients are stored component-major
(all functions of component 0, then component 1, ...).  Symmetric and
antisymmetric L2 matrix fields are expanded in orthonormal bases of the
symmetric (6) and antisymmetric (3) matrices, so that coefficient inner
products equal the full 9-component contraction.

Interface pairings are evaluated on the reference faces: for Piola-mapped
Hdiv functions ``phi . n dS`` equals the reference normal component times
the reference area element, so the ``<u_hat, tau n>`` and ``<sigma_n, v>``
blocks do not depend on the element geometry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Callable

import numpy as np

from . import spaces
from .material import IsotropicMaterial, compliance_apply, stiffness_apply
from .mesh import (FACE_AXIS, FACE_SIDE, Mesh, face_point_to_reference, face_rule, geometry_eval,
                   quadrature_points_per_direction, volume_rule)


class Formulation(str, Enum):
    STRONG = "S"
    ULTRAWEAK = "U"
    DUAL_MIXED = "D"
    MIXED = "M"
    PRIMAL = "P"

    @property
    def uses_stiffness(self) -> bool:
        return self in (Formulation.STRONG, Formulation.DUAL_MIXED, Formulation.PRIMAL)

    @classmethod
    def parse(cls, s: str) -> "Formulation":
        s = str(s).strip()
        names = {f.name.lower(): f for f in cls}
        names.update({"dualmixed": cls.DUAL_MIXED, "dual-mixed": cls.DUAL_MIXED})
        if s.upper() in cls._value2member_map_:
            return cls(s.upper())
        try:
            return names[s.lower()]
        except KeyError:
            raise ValueError(f"unknown formulation {s!r}") from None


@dataclass(frozen=True)
class Variable:
    name: str
    space: str  # H1, Hdiv, L2, TraceH1, TraceHdiv
    shape: str  # vector, matrix, sym, skew

    @property
    def interface(self) -> bool:
        return self.space.startswith("Trace")

    @property
    def components(self) -> int:
        return {"vector": 3, "matrix": 3, "sym": 6, "skew": 3}[self.shape]


SIGMA_HDIV = Variable("sigma", "Hdiv", "matrix")
SIGMA_L2 = Variable("sigma", "L2", "sym")
U_H1 = Variable("u", "H1", "vector")
U_L2 = Variable("u", "L2", "vector")
OMEGA = Variable("omega", "L2", "skew")
U_HAT = Variable("u_hat", "TraceH1", "vector")
SIGMA_N = Variable("sigma_n", "TraceHdiv", "vector")

TAU_SYM = Variable("tau", "L2", "sym")
TAU_HDIV = Variable("tau", "Hdiv", "matrix")
V_L2 = Variable("v", "L2", "vector")
V_H1 = Variable("v", "H1", "vector")
W_SKEW = Variable("w", "L2", "skew")

TRIAL = {
    Formulation.STRONG: (SIGMA_HDIV, U_H1),
    Formulation.ULTRAWEAK: (SIGMA_L2, U_L2, OMEGA, U_HAT, SIGMA_N),
    Formulation.DUAL_MIXED: (SIGMA_L2, U_H1, SIGMA_N),
    Formulation.MIXED: (SIGMA_HDIV, U_L2, OMEGA, U_HAT),
    Formulation.PRIMAL: (U_H1, SIGMA_N),
}
TEST = {
    Formulation.STRONG: (TAU_SYM, V_L2, W_SKEW),
    Formulation.ULTRAWEAK: (TAU_HDIV, V_H1),
    Formulation.DUAL_MIXED: (TAU_SYM, V_H1),
    Formulation.MIXED: (TAU_HDIV, V_L2, W_SKEW),
    Formulation.PRIMAL: (V_H1,),
}


def _sym_basis() -> np.ndarray:
    E = np.zeros((6, 3, 3))
    for k, (i, j) in enumerate([(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)]):
        if i == j:
            E[k, i, i] = 1.0
        else:
            E[k, i, j] = E[k, j, i] = 1.0 / math.sqrt(2.0)
    return E


def _skew_basis() -> np.ndarray:
    A = np.zeros((3, 3, 3))
    for k, (i, j) in enumerate([(1, 2), (0, 2), (0, 1)]):
        A[k, i, j], A[k, j, i] = 1.0 / math.sqrt(2.0), -1.0 / math.sqrt(2.0)
    return A


SYM_BASIS = _sym_basis()
SKEW_BASIS = _skew_basis()


def scalar_count(var: Variable, q: int) -> int:
    if var.space == "H1":
        return spaces.h1_count(q)
    if var.space == "Hdiv":
        return spaces.hdiv_count(q)
    if var.space == "L2":
        return spaces.l2_count(q)
    if var.space == "TraceH1":
        return len(spaces.h1_boundary_dofs(q))
    if var.space == "TraceHdiv":
        return 6 * q * q
    raise ValueError(var.space)


def variable_size(var: Variable, q: int) -> int:
    return var.components * scalar_count(var, q)


@dataclass(frozen=True)
class Layout:
    variables: tuple[Variable, ...]
    order: int
    offsets: tuple[int, ...]
    size: int

    @classmethod
    def build(cls, variables, order) -> "Layout":
        offs, n = [], 0
        for v in variables:
            offs.append(n)
            n += variable_size(v, order)
        return cls(tuple(variables), order, tuple(offs), n)

    def slice(self, name: str) -> slice:
        for v, o in zip(self.variables, self.offsets):
            if v.name == name:
                return slice(o, o + variable_size(v, self.order))
        raise KeyError(name)

    def variable(self, name: str) -> Variable:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)


def trial_layout(f: Formulation, p: int) -> Layout:
    return Layout.build(TRIAL[f], p)


def test_layout(f: Formulation, p: int, dp: int) -> Layout:
    return Layout.build(TEST[f], p + dp)


# ------------------------------------------------------------ element data


@dataclass
class ElementGeometry:
    x: np.ndarray
    J: np.ndarray
    detJ: np.ndarray
    dV: np.ndarray
    xi: np.ndarray
    volume: float

    @property
    def l2_scale(self) -> float:
        """Scaling making L2 bases orthonormal on affine elements."""
        return 1.0 / math.sqrt(self.volume)


def element_geometry(mesh: Mesh, e: int, p: int, dp: int, extra: int = 0) -> ElementGeometry:
    n = quadrature_points_per_direction(p, dp, mesh.kind[e]) + extra
    xi, w = volume_rule(n)
    x, J, detJ = geometry_eval(mesh, e, xi)
    dV = w * detJ
    return ElementGeometry(x, J, detJ, dV, xi, float(dV.sum()))


def basis_arrays(var: Variable, q: int, geo: ElementGeometry):
    """(values, derivative) of every local function at the quadrature points.

    Vector fields give values (n, nq, 3); matrix fields (n, nq, 3, 3).  The
    derivative is the gradient (n, nq, 3, 3) for H1 vectors, the row-wise
    divergence (n, nq, 3) for Hdiv matrices, and None otherwise.
    """
    tab = spaces.tabulate_at(q, geo.xi)
    nq = geo.xi.shape[0]
    if var.space == "H1":
        N, gref = tab.h1
        _, grad = spaces.physical_pushforward("H1", geo.J, geo.detJ, N, gref)
        n = N.shape[0]
        vals = np.zeros((3, n, nq, 3))
        grads = np.zeros((3, n, nq, 3, 3))
        for c in range(3):
            vals[c, :, :, c] = N
            grads[c, :, :, c, :] = grad
        return vals.reshape(3 * n, nq, 3), grads.reshape(3 * n, nq, 3, 3)
    if var.space == "Hdiv":
        phi, div = spaces.physical_pushforward("Hdiv", geo.J, geo.detJ, *tab.hdiv)
        n = phi.shape[0]
        vals = np.zeros((3, n, nq, 3, 3))
        divs = np.zeros((3, n, nq, 3))
        for r in range(3):
            vals[r, :, :, r, :] = phi
            divs[r, :, :, r] = div
        return vals.reshape(3 * n, nq, 3, 3), divs.reshape(3 * n, nq, 3)
    if var.space == "L2":
        psi = tab.l2 * geo.l2_scale
        n = psi.shape[0]
        if var.shape == "vector":
            vals = np.zeros((3, n, nq, 3))
            for c in range(3):
                vals[c, :, :, c] = psi
            return vals.reshape(3 * n, nq, 3), None
        basis = SYM_BASIS if var.shape == "sym" else SKEW_BASIS
        vals = psi[None, :, :, None, None] * basis[:, None, None, :, :]
        return vals.reshape(len(basis) * n, nq, 3, 3), None
    raise ValueError(f"no volume basis for {var.space}")


def _inner(test: np.ndarray, trial: np.ndarray, dV: np.ndarray) -> np.ndarray:
    nt, nu = test.shape[0], trial.shape[0]
    nq = dV.shape[0]
    tw = trial.reshape(nu, nq, -1) * dV[None, :, None]
    return test.reshape(nt, -1) @ tw.reshape(nu, -1).T


# ------------------------------------------------------- interface blocks


@lru_cache(maxsize=None)
def hdiv_trace_pairing(p: int, q: int) -> np.ndarray:
    """S[a, b] = sum_faces int phi_a . n H1_b dS_ref (Hdiv order q, H1 order p boundary functions)."""
    bnd = spaces.h1_boundary_dofs(p)
    out = np.zeros((spaces.hdiv_count(q), len(bnd)))
    st, w = face_rule(q + p + 2)
    for f in range(6):
        xi = face_point_to_reference(f, st)
        phi, _ = spaces.shape_values_hdiv(q, xi)
        n = np.zeros(3)
        n[FACE_AXIS[f]] = 1.0 if FACE_SIDE[f] else -1.0
        N, _ = spaces.shape_values_h1(p, xi)
        out += ((phi @ n) * w) @ N[bnd].T
    return out


@lru_cache(maxsize=None)
def h1_flux_pairing(p: int, q: int) -> np.ndarray:
    """S[a, (f, j)] = int_face_f N_a m_j dS_ref (H1 order q, flux order p)."""
    out = np.zeros((spaces.h1_count(q), 6 * p * p))
    st, w = face_rule(q + p + 2)
    g = spaces.face_flux_values(p, st)
    for f in range(6):
        N, _ = spaces.shape_values_h1(q, face_point_to_reference(f, st))
        out[:, f * p * p:(f + 1) * p * p] = (N * w) @ g.T
    return out


def _component_block(S: np.ndarray) -> np.ndarray:
    """Block-diagonal with three copies of S (component-major pairing)."""
    return np.kron(np.eye(3), S)


# ---------------------------------------------------------------- B and G


def _check_material(f: Formulation, m: IsotropicMaterial):
    if f.uses_stiffness and m.incompressible:
        raise ValueError(
            f"formulation {f.name} uses the stiffness tensor, which is unbounded for an "
            "incompressible material; use ULTRAWEAK or MIXED there")


def local_operator_matrix(mesh: Mesh, e: int, f: Formulation, m: IsotropicMaterial, p: int, dp: int,
                          geo: ElementGeometry | None = None) -> np.ndarray:
    """Matrix of b(trial_j, test_i) with the interface columns last."""
    _check_material(f, m)
    q = p + dp
    geo = geo or element_geometry(mesh, e, p, dp)
    trial, test = trial_layout(f, p), test_layout(f, p, dp)
    B = np.zeros((test.size, trial.size))
    dV = geo.dV
    tv = {v.name: basis_arrays(v, q, geo) for v in test.variables}
    uv = {v.name: basis_arrays(v, p, geo) for v in trial.variables if not v.interface}

    def put(test_name, trial_name, block):
        B[test.slice(test_name), trial.slice(trial_name)] += block

    if f in (Formulation.STRONG, Formulation.DUAL_MIXED):
        tau = tv["tau"][0]
        sigma = uv["sigma"][0]
        put("tau", "sigma", _inner(tau, sigma, dV))
        put("tau", "u", -_inner(tau, stiffness_apply(m, uv["u"][1]), dV))
    if f is Formulation.STRONG:
        put("v", "sigma", -_inner(tv["v"][0], uv["sigma"][1], dV))
        put("w", "sigma", _inner(tv["w"][0], uv["sigma"][0], dV))
    if f in (Formulation.ULTRAWEAK, Formulation.MIXED):
        tau, div_tau = tv["tau"]
        put("tau", "sigma", _inner(tau, compliance_apply(m, uv["sigma"][0]), dV))
        put("tau", "omega", _inner(tau, uv["omega"][0], dV))
        put("tau", "u", _inner(div_tau, uv["u"][0], dV))
        put("tau", "u_hat", -_component_block(hdiv_trace_pairing(p, q)))
    if f is Formulation.ULTRAWEAK:
        put("v", "sigma", _inner(tv["v"][1], uv["sigma"][0], dV))
    if f is Formulation.DUAL_MIXED:
        put("v", "sigma", _inner(tv["v"][1], uv["sigma"][0], dV))
    if f is Formulation.MIXED:
        put("v", "sigma", -_inner(tv["v"][0], uv["sigma"][1], dV))
        put("w", "sigma", _inner(tv["w"][0], uv["sigma"][0], dV))
    if f is Formulation.PRIMAL:
        put("v", "u", _inner(tv["v"][1], stiffness_apply(m, uv["u"][1]), dV))
    if f in (Formulation.ULTRAWEAK, Formulation.DUAL_MIXED, Formulation.PRIMAL):
        put("v", "sigma_n", -_component_block(h1_flux_pairing(p, q)))
    return B


@dataclass(frozen=True)
class GramBlock:
    """``reps`` consecutive copies of the scalar Gram matrix ``G`` starting at ``offset``."""

    offset: int
    G: np.ndarray
    reps: int
    l2: bool

    @property
    def size(self) -> int:
        return self.G.shape[0] * self.reps


def gram_blocks(mesh: Mesh, e: int, f: Formulation, p: int, dp: int,
                geo: ElementGeometry | None = None) -> list[GramBlock]:
    """Standard broken test norms, one scalar block per test variable."""
    q = p + dp
    geo = geo or element_geometry(mesh, e, p, dp)
    tab = spaces.tabulate_at(q, geo.xi)
    test = test_layout(f, p, dp)
    out = []
    for var, off in zip(test.variables, test.offsets):
        if var.space == "H1":
            N, gref = tab.h1
            _, g = spaces.physical_pushforward("H1", geo.J, geo.detJ, N, gref)
            G = (N * geo.dV) @ N.T + _inner(g, g, geo.dV)
        elif var.space == "Hdiv":
            phi, div = spaces.physical_pushforward("Hdiv", geo.J, geo.detJ, *tab.hdiv)
            G = _inner(phi, phi, geo.dV) + (div * geo.dV) @ div.T
        else:
            psi = tab.l2 * geo.l2_scale
            G = (psi * geo.dV) @ psi.T
        G = 0.5 * (G + G.T)
        out.append(GramBlock(off, G, var.components, var.space == "L2"))
    return out


def assemble_gram(blocks: list[GramBlock]) -> np.ndarray:
    n = sum(b.size for b in blocks)
    G = np.zeros((n, n))
    for b in blocks:
        m = b.G.shape[0]
        for r in range(b.reps):
            s = b.offset + r * m
            G[s:s + m, s:s + m] = b.G
    return G


def local_gram_matrix(mesh: Mesh, e: int, f: Formulation, p: int, dp: int) -> np.ndarray:
    return assemble_gram(gram_blocks(mesh, e, f, p, dp))


def local_load_vector(mesh: Mesh, e: int, f: Formulation, body_force: Callable | None, p: int, dp: int,
                      lift: np.ndarray | None = None, B: np.ndarray | None = None,
                      geo: ElementGeometry | None = None) -> np.ndarray:
    """(f, v) over the enriched test space.

    Boundary data is imposed through constrained trial coefficients; passing
    ``lift`` (trial coefficients, zero except at constrained positions) and
    ``B`` subtracts ``B @ lift``.
    """
    test = test_layout(f, p, dp)
    ell = np.zeros(test.size)
    if body_force is not None:
        geo = geo or element_geometry(mesh, e, p, dp)
        fx = np.asarray(body_force(geo.x), dtype=float)
        v = test.variable("v")
        vals, _ = basis_arrays(v, p + dp, geo)
        ell[test.slice("v")] = np.einsum("nqc,qc,q->n", vals, fx, geo.dV)
    if lift is not None:
        if B is None:
            raise ValueError("lifting needs the operator matrix")
        ell -= B @ lift
    return ell
