"""Discrete exact-sequence spaces on the reference hexahedron.

Order ``q`` means

* H1: tensor Lagrange basis of degree q on Gauss-Lobatto nodes, (q+1)^3
  functions, local index ``i + (q+1) j + (q+1)^2 k``;
* Hdiv: three blocks, block d = e_d * l_i(xi_d) m_j m_k with l the degree-q
  Lobatto Lagrange basis along the normal axis and m the degree-(q-1)
  Lagrange basis on Gauss points along the two other axes; (q+1) q^2
  functions per block;
* L2: orthonormal tensor Legendre polynomials of degree < q, q^3 functions.

Global identification uses nodes instead of hierarchical orientation tables.
A node is named by the integer weights it puts on the element's 8 vertex ids
(products of per-axis node labels), which is the same from both sides of a
face whatever the relative face orientation, because the node sets are
symmetric under reflection.  Face Hdiv functions are signed so that their
normal component on the face, measured with the outward normal, equals
``m_j(s) m_k(t)``; flux degrees of freedom are therefore densities per unit
reference area (Piola maps preserve ``phi . n dS``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable

import numpy as np

from .mesh import (FACE_AXIS, FACE_CORNERS, FACE_SIDE, FACE_TANGENTS, Mesh, face_point_to_reference,
                   face_quadrature, face_rule, gauss_legendre, geometry_eval)

# ------------------------------------------------------------------ 1D bases


@lru_cache(maxsize=None)
def lobatto_nodes(q: int) -> np.ndarray:
    """q+1 Gauss-Lobatto points on [0, 1]."""
    if q < 1:
        raise ValueError("order must be at least 1")
    interior = np.polynomial.legendre.Legendre.basis(q).deriv().roots() if q > 1 else np.empty(0)
    x = np.concatenate([[-1.0], np.sort(interior.real), [1.0]])
    x = 0.5 * (x + 1.0)
    return 0.5 * (x + (1.0 - x[::-1]))  # exact reflection symmetry


@lru_cache(maxsize=None)
def gauss_nodes(n: int) -> np.ndarray:
    x = gauss_legendre(n)[0]
    return 0.5 * (x + (1.0 - x[::-1]))


def lagrange(nodes: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives, shape (len(nodes), len(x))."""
    x = np.asarray(x, dtype=float)
    n = len(nodes)
    vals = np.ones((n, x.size))
    ders = np.zeros((n, x.size))
    for i in range(n):
        others = [j for j in range(n) if j != i]
        denom = np.prod([nodes[i] - nodes[j] for j in others]) if others else 1.0
        for j in others:
            vals[i] *= x - nodes[j]
        for k in others:
            term = np.ones(x.size)
            for j in others:
                if j != k:
                    term *= x - nodes[j]
            ders[i] += term
        vals[i] /= denom
        ders[i] /= denom
    return vals, ders


def legendre_orthonormal(n: int, x: np.ndarray) -> np.ndarray:
    """sqrt(2k+1) P_k(2x-1) for k < n, orthonormal on [0, 1]."""
    x = np.asarray(x, dtype=float)
    out = np.empty((n, x.size))
    for k in range(n):
        c = np.zeros(k + 1)
        c[k] = 1.0
        out[k] = math.sqrt(2 * k + 1) * np.polynomial.legendre.legval(2 * x - 1, c)
    return out


# ------------------------------------------------------------ index helpers


def h1_count(q: int) -> int:
    return (q + 1) ** 3


def hdiv_count(q: int) -> int:
    return 3 * (q + 1) * q * q


def l2_count(q: int) -> int:
    return q ** 3


@lru_cache(maxsize=None)
def h1_labels(q: int) -> np.ndarray:
    """(n, 3) per-axis node indices of every H1 function."""
    r = np.arange(q + 1)
    K, J, I = np.meshgrid(r, r, r, indexing="ij")
    return np.column_stack([I.ravel(), J.ravel(), K.ravel()])


@lru_cache(maxsize=None)
def h1_classification(q: int) -> tuple[str, ...]:
    out = []
    for lab in h1_labels(q):
        n_end = sum(1 for v in lab if v in (0, q))
        out.append({3: "vertex", 2: "edge", 1: "face", 0: "interior"}[n_end])
    return tuple(out)


@lru_cache(maxsize=None)
def h1_face_dofs(q: int, f: int) -> np.ndarray:
    lab = h1_labels(q)
    return np.flatnonzero(lab[:, FACE_AXIS[f]] == (q if FACE_SIDE[f] else 0))


@lru_cache(maxsize=None)
def h1_boundary_dofs(q: int) -> np.ndarray:
    lab = h1_labels(q)
    return np.flatnonzero(np.any((lab == 0) | (lab == q), axis=1))


@lru_cache(maxsize=None)
def hdiv_layout(q: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per function: block axis, (n, 3) per-axis indices, and owning face (-1 interior)."""
    axis, labels, face = [], [], []
    for d in range(3):
        sizes = [q] * 3
        sizes[d] = q + 1
        for i2 in range(sizes[2]):
            for i1 in range(sizes[1]):
                for i0 in range(sizes[0]):
                    lab = (i0, i1, i2)
                    axis.append(d)
                    labels.append(lab)
                    if lab[d] == 0:
                        face.append(2 * d)
                    elif lab[d] == q:
                        face.append(2 * d + 1)
                    else:
                        face.append(-1)
    return np.array(axis), np.array(labels), np.array(face)


@lru_cache(maxsize=None)
def hdiv_face_dofs(q: int, f: int) -> np.ndarray:
    """Hdiv functions owned by face f, ordered with the face s coordinate fastest."""
    return np.flatnonzero(hdiv_layout(q)[2] == f)


@lru_cache(maxsize=None)
def hdiv_classification(q: int) -> tuple[str, ...]:
    return tuple("face" if f >= 0 else "interior" for f in hdiv_layout(q)[2])


# -------------------------------------------------------------- node keys


def point_key(vertex_ids: np.ndarray, labels, total: int) -> tuple:
    """Vertex-weight name of a lattice point of an element (see module doc)."""
    weights = []
    for a in range(8):
        w = 1
        for d in range(3):
            w *= labels[d] if (a >> d) & 1 else total - labels[d]
        if w:
            weights.append((int(vertex_ids[a]), w))
    weights.sort()
    return tuple(weights)


def h1_node_keys(vertex_ids: np.ndarray, q: int, dofs: Iterable[int]) -> list[tuple]:
    lab = h1_labels(q)
    return [point_key(vertex_ids, lab[a], q) for a in dofs]


@lru_cache(maxsize=None)
def _flux_labels(q: int, f: int) -> np.ndarray:
    """Labels (total 2q) of the q*q flux nodes of face f, s fastest."""
    out = []
    for k in range(q):
        for j in range(q):
            lab = [0, 0, 0]
            lab[FACE_AXIS[f]] = 2 * q if FACE_SIDE[f] else 0
            lab[FACE_TANGENTS[f][0]] = 2 * j + 1
            lab[FACE_TANGENTS[f][1]] = 2 * k + 1
            out.append(lab)
    return np.array(out)


def flux_node_keys(vertex_ids: np.ndarray, q: int, f: int) -> list[tuple]:
    return [point_key(vertex_ids, lab, 2 * q) for lab in _flux_labels(q, f)]


# ------------------------------------------------------------ 3D evaluation


def _axes(xi):
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    return xi[:, 0], xi[:, 1], xi[:, 2]


def shape_values_h1(p: int, xi) -> tuple[np.ndarray, np.ndarray]:
    """Values (n, npts) and reference gradients (n, npts, 3)."""
    x1, x2, x3 = _axes(xi)
    nodes = lobatto_nodes(p)
    (v1, d1), (v2, d2), (v3, d3) = (lagrange(nodes, x) for x in (x1, x2, x3))
    lab = h1_labels(p)
    i, j, k = lab[:, 0], lab[:, 1], lab[:, 2]
    vals = v1[i] * v2[j] * v3[k]
    grads = np.stack([d1[i] * v2[j] * v3[k], v1[i] * d2[j] * v3[k], v1[i] * v2[j] * d3[k]], axis=-1)
    return vals, grads


def shape_values_hdiv(p: int, xi) -> tuple[np.ndarray, np.ndarray]:
    """Reference vector values (n, npts, 3) and divergences (n, npts)."""
    xs = _axes(xi)
    lob, gau = lobatto_nodes(p), gauss_nodes(p)
    L = [lagrange(lob, x) for x in xs]
    G = [lagrange(gau, x)[0] for x in xs]
    axis, labels, face = hdiv_layout(p)
    npts = xs[0].size
    vals = np.zeros((len(axis), npts, 3))
    div = np.empty((len(axis), npts))
    for n, (d, lab, f) in enumerate(zip(axis, labels, face)):
        sign = -1.0 if (f >= 0 and FACE_SIDE[f] == 0) else 1.0
        val, der = sign * L[d][0][lab[d]], sign * L[d][1][lab[d]]
        other = 1.0
        for a in range(3):
            if a != d:
                other = other * G[a][lab[a]]
        vals[n, :, d] = val * other
        div[n] = der * other
    return vals, div


def shape_values_l2(p: int, xi) -> np.ndarray:
    """Orthonormal Legendre tensor basis of degree < p, shape (p^3, npts)."""
    x1, x2, x3 = _axes(xi)
    P1, P2, P3 = (legendre_orthonormal(p, x) for x in (x1, x2, x3))
    r = np.arange(p)
    K, J, I = np.meshgrid(r, r, r, indexing="ij")
    return P1[I.ravel()] * P2[J.ravel()] * P3[K.ravel()]


def face_flux_values(p: int, st) -> np.ndarray:
    """Flux trace basis m_j(s) m_k(t) on a face, shape (p^2, npts)."""
    st = np.atleast_2d(st)
    g = gauss_nodes(p)
    ms, mt = lagrange(g, st[:, 0])[0], lagrange(g, st[:, 1])[0]
    r = np.arange(p)
    K, J = np.meshgrid(r, r, indexing="ij")
    return ms[J.ravel()] * mt[K.ravel()]


def physical_pushforward(space_kind: str, J: np.ndarray, detJ: np.ndarray, values: np.ndarray,
                         derivatives: np.ndarray | None = None):
    """Map reference basis data to an element.

    * ``"H1"``: values unchanged, gradients (n, q, 3) by J^{-T};
    * ``"Hdiv"``: vectors (n, q, 3) by J / detJ, divergences by 1 / detJ;
    * ``"L2"``: values unchanged (the Jacobian lives in the quadrature weights).
    """
    if space_kind == "H1":
        if derivatives is None:
            return values, None
        Jinv = np.linalg.inv(J)
        return values, np.einsum("nqk,qkj->nqj", derivatives, Jinv)
    if space_kind == "Hdiv":
        vec = np.einsum("qij,nqj->nqi", J, values) / detJ[None, :, None]
        div = None if derivatives is None else derivatives / detJ[None, :]
        return vec, div
    if space_kind == "L2":
        return values, None
    raise ValueError(f"unknown space kind {space_kind!r}")


# --------------------------------------------------------- boundary lifts


@dataclass(frozen=True)
class _FaceData:
    element: int
    local_face: int


def _owner(mesh: Mesh, fid: int) -> _FaceData:
    return _FaceData(int(mesh.face_owner[fid]), int(mesh.face_owner_local[fid]))


def interpolate_h1_trace(mesh: Mesh, faces: Iterable[int], g: Callable, p: int) -> dict:
    """Lift of displacement data into the continuous degree-p trace space.

    Vertex values are collocated; edge and then face interior values are the
    L2 projections (in reference face measure) of what remains.  Returns
    ``{node_key: value(3,)}`` over all nodes on the given faces.
    """
    nodes = lobatto_nodes(p)
    lab = h1_labels(p)
    out: dict[tuple, np.ndarray] = {}
    nq = p + 3
    xq, wq = gauss_legendre(nq)
    l_q = lagrange(nodes, xq)[0]  # (p+1, nq)
    M1 = (l_q[1:p] * wq) @ l_q[1:p].T
    for fid in faces:
        fd = _owner(mesh, fid)
        e, f = fd.element, fd.local_face
        vids = mesh.elements[e]
        dofs = h1_face_dofs(p, f)
        ta, tb = FACE_TANGENTS[f]
        ab = lab[dofs][:, [ta, tb]]
        keys = [point_key(vids, lab[a], p) for a in dofs]
        grid = {tuple(v): k for v, k in zip(ab, keys)}
        # vertices
        for (a, b), key in grid.items():
            if a in (0, p) and b in (0, p) and key not in out:
                x, _, _ = geometry_eval(mesh, e, face_point_to_reference(f, [[a / p, b / p]]))
                out[key] = np.asarray(g(x), dtype=float).reshape(3)
        # edges: s-edges at fixed t in {0, 1}, t-edges at fixed s
        for fixed_axis, fixed in ((1, 0), (1, p), (0, 0), (0, p)):
            line = [(i, fixed) if fixed_axis == 1 else (fixed, i) for i in range(p + 1)]
            inner = [grid[ij] for ij in line[1:p]]
            if p < 2 or all(k in out for k in inner):
                continue
            st = np.column_stack([xq, np.full(nq, nodes[fixed])]) if fixed_axis == 1 else \
                np.column_stack([np.full(nq, nodes[fixed]), xq])
            x, _, _ = geometry_eval(mesh, e, face_point_to_reference(f, st))
            r = np.asarray(g(x), dtype=float) - np.outer(l_q[0], out[grid[line[0]]]) \
                - np.outer(l_q[p], out[grid[line[p]]])
            c = np.linalg.solve(M1, (l_q[1:p] * wq) @ r)
            for k, val in zip(inner, c):
                out[k] = val
        if p < 2:
            continue
        interior = [(a, b) for (a, b) in grid if 0 < a < p and 0 < b < p]
        st, w2 = face_rule(nq)
        x, _, _ = geometry_eval(mesh, e, face_point_to_reference(f, st))
        ls, lt = lagrange(nodes, st[:, 0])[0], lagrange(nodes, st[:, 1])[0]
        r = np.asarray(g(x), dtype=float).copy()
        for (a, b), key in grid.items():
            if not (0 < a < p and 0 < b < p):
                r -= np.outer(ls[a] * lt[b], out[key])
        phi = np.array([ls[a] * lt[b] for a, b in interior])
        c = np.linalg.solve((phi * w2) @ phi.T, (phi * w2) @ r)
        for (a, b), val in zip(interior, c):
            out[grid[(a, b)]] = val
    return out


def interpolate_flux_trace(mesh: Mesh, faces: Iterable[int], g: Callable, p: int) -> dict:
    """Per-face L2 projection of traction data into the flux trace space.

    ``g`` is the traction per unit physical area for the outward normal of
    the face's owner element; the result holds densities per unit reference
    area, ``{flux_key: value(3,)}``.
    """
    out: dict[tuple, np.ndarray] = {}
    for fid in faces:
        fd = _owner(mesh, fid)
        e, f = fd.element, fd.local_face
        fq = face_quadrature(mesh, e, f, p + 3)
        density = np.asarray(g(fq.x), dtype=float) * (fq.weight / fq.ref_weight)[:, None]
        phi = face_flux_values(p, fq.st)
        c = np.linalg.solve((phi * fq.ref_weight) @ phi.T, (phi * fq.ref_weight) @ density)
        for key, val in zip(flux_node_keys(mesh.elements[e], p, f), c):
            out[key] = val
    return out


def interpolate_boundary_data(mesh: Mesh, g: Callable, faces: Iterable[int], target: str, p: int) -> dict:
    if target == "TraceH1Face":
        return interpolate_h1_trace(mesh, faces, g, p)
    if target == "TraceHdivFace":
        return interpolate_flux_trace(mesh, faces, g, p)
    raise ValueError(f"unknown trace space {target!r}")


# ------------------------------------------------------------- tabulation


@dataclass(frozen=True)
class Tabulation:
    """Reference basis data at a fixed volume rule."""

    h1: tuple[np.ndarray, np.ndarray]
    hdiv: tuple[np.ndarray, np.ndarray]
    l2: np.ndarray


@lru_cache(maxsize=None)
def tabulate(q: int, xi_bytes: bytes, npts: int) -> Tabulation:
    xi = np.frombuffer(xi_bytes).reshape(npts, 3)
    return Tabulation(shape_values_h1(q, xi), shape_values_hdiv(q, xi), shape_values_l2(q, xi))


def tabulate_at(q: int, xi: np.ndarray) -> Tabulation:
    xi = np.ascontiguousarray(xi, dtype=float)
    return tabulate(q, xi.tobytes(), xi.shape[0])
