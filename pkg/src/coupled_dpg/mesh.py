"""Conforming hexahedral meshes on the reference cube [0, 1]^3.

Local vertex ``a`` of an element sits at reference point
``(a & 1, (a >> 1) & 1, (a >> 2) & 1)``.  Local faces are numbered
0: xi1=0, 1: xi1=1, 2: xi2=0, 3: xi2=1, 4: xi3=0, 5: xi3=1, and each face is
parameterized by ``(s, t)`` = the two remaining reference coordinates in
increasing axis order.

Two geometry maps exist: trilinear interpolation of the 8 vertices, and an
exact cylindrical patch ``(r, theta, z) -> (r cos theta, r sin theta, z)``
with r, theta, z affine in xi1, xi2, xi3.

For an interior face the neighbor's face parameters are obtained from the
owner's by one of the 8 symmetries of the unit square (see
:func:`apply_orientation`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

AFFINE = 0
CYLINDER = 1

FACE_AXIS = (0, 0, 1, 1, 2, 2)
FACE_SIDE = (0, 1, 0, 1, 0, 1)
FACE_TANGENTS = ((1, 2), (1, 2), (0, 2), (0, 2), (0, 1), (0, 1))

INTERIOR = "interior"
INTERFACE = "interface"


def _face_corners(f: int) -> tuple[int, ...]:
    a, side = FACE_AXIS[f], FACE_SIDE[f]
    ta, tb = FACE_TANGENTS[f]
    corners = []
    for t in (0, 1):
        for s in (0, 1):
            bits = [0, 0, 0]
            bits[a], bits[ta], bits[tb] = side, s, t
            corners.append(bits[0] + 2 * bits[1] + 4 * bits[2])
    return tuple(corners)


# corner order c00, c10, c01, c11 in face coordinates
FACE_CORNERS = tuple(_face_corners(f) for f in range(6))


def face_point_to_reference(f: int, st: np.ndarray) -> np.ndarray:
    st = np.atleast_2d(st)
    xi = np.empty((st.shape[0], 3))
    xi[:, FACE_AXIS[f]] = FACE_SIDE[f]
    xi[:, FACE_TANGENTS[f][0]] = st[:, 0]
    xi[:, FACE_TANGENTS[f][1]] = st[:, 1]
    return xi


def apply_orientation(code: int, st: np.ndarray) -> np.ndarray:
    """Map owner face coordinates to neighbor face coordinates.

    Codes 0-3 flip s and/or t (bit 0 flips s, bit 1 flips t); codes 4-7 first
    swap s and t and then apply the flips of ``code - 4``.
    """
    st = np.atleast_2d(np.asarray(st, dtype=float))
    s, t = st[:, 0], st[:, 1]
    if code >= 4:
        s, t = t, s
    if code & 1:
        s = 1.0 - s
    if code & 2:
        t = 1.0 - t
    return np.column_stack([s, t])


def _orientation_between(owner_corners, neighbor_corners) -> int:
    unit = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    for code in range(8):
        mapped = apply_orientation(code, unit)
        idx = (mapped[:, 0] + 2 * mapped[:, 1]).round().astype(int)
        if all(owner_corners[c] == neighbor_corners[idx[c]] for c in range(4)):
            return code
    raise ValueError("faces do not share the same four vertices")


# ---------------------------------------------------------------- quadrature


@lru_cache(maxsize=None)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """n-point Gauss-Legendre rule on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def volume_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss rule on [0,1]^3, first coordinate fastest."""
    x, w = gauss_legendre(n)
    X3, X2, X1 = np.meshgrid(x, x, x, indexing="ij")
    W3, W2, W1 = np.meshgrid(w, w, w, indexing="ij")
    pts = np.column_stack([X1.ravel(), X2.ravel(), X3.ravel()])
    return pts, (W1 * W2 * W3).ravel()


@lru_cache(maxsize=None)
def face_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss rule on the unit square, s fastest."""
    x, w = gauss_legendre(n)
    T, S = np.meshgrid(x, x, indexing="ij")
    WT, WS = np.meshgrid(w, w, indexing="ij")
    return np.column_stack([S.ravel(), T.ravel()]), (WS * WT).ravel()


def quadrature_points_per_direction(p: int, dp: int, kind: int) -> int:
    return p + dp + 2 + (2 if kind == CYLINDER else 0)


# ---------------------------------------------------------------------- mesh


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (nv, 3)
    elements: np.ndarray  # (ne, 8) vertex ids
    subdomain: np.ndarray  # (ne,) index into subdomain_names
    subdomain_names: tuple[str, ...]
    kind: np.ndarray  # (ne,) AFFINE or CYLINDER
    cylinder: np.ndarray  # (ne, 6) r0, r1, t0, t1, z0, z1 (nan for affine)
    boundary_tag: np.ndarray  # (ne, 6) index into tag_names, -1 if interior
    tag_names: tuple[str, ...]
    # derived face table
    element_faces: np.ndarray = field(repr=False)  # (ne, 6) face id
    face_owner: np.ndarray = field(repr=False)
    face_owner_local: np.ndarray = field(repr=False)
    face_neighbor: np.ndarray = field(repr=False)  # -1 on the boundary
    face_neighbor_local: np.ndarray = field(repr=False)
    face_orientation: np.ndarray = field(repr=False)  # -1 on the boundary
    face_tag: tuple[str, ...] = field(repr=False)

    @classmethod
    def create(cls, vertices, elements, subdomain, subdomain_names, kind, cylinder,
               boundary_tag, tag_names) -> "Mesh":
        elements = np.asarray(elements, dtype=np.int64)
        ne = elements.shape[0]
        subdomain = np.asarray(subdomain, dtype=np.int64)
        boundary_tag = np.asarray(boundary_tag, dtype=np.int64)
        table: dict[tuple[int, ...], list[tuple[int, int]]] = {}
        for e in range(ne):
            for f in range(6):
                key = tuple(sorted(elements[e, list(FACE_CORNERS[f])]))
                table.setdefault(key, []).append((e, f))
        n_faces = len(table)
        owner = np.empty(n_faces, dtype=np.int64)
        owner_local = np.empty(n_faces, dtype=np.int64)
        neighbor = np.full(n_faces, -1, dtype=np.int64)
        neighbor_local = np.full(n_faces, -1, dtype=np.int64)
        orientation = np.full(n_faces, -1, dtype=np.int64)
        element_faces = np.empty((ne, 6), dtype=np.int64)
        tags = []
        # faces are numbered in order of first appearance (element-major)
        for fid, sides in enumerate(table.values()):
            if len(sides) > 2:
                raise ValueError("non-manifold face shared by more than two elements")
            e0, f0 = sides[0]
            owner[fid], owner_local[fid] = e0, f0
            element_faces[e0, f0] = fid
            if len(sides) == 2:
                e1, f1 = sides[1]
                if boundary_tag[e0, f0] >= 0 or boundary_tag[e1, f1] >= 0:
                    raise ValueError(f"interior face {fid} carries a boundary tag")
                neighbor[fid], neighbor_local[fid] = e1, f1
                element_faces[e1, f1] = fid
                orientation[fid] = _orientation_between(
                    elements[e0, list(FACE_CORNERS[f0])], elements[e1, list(FACE_CORNERS[f1])])
                tags.append(INTERFACE if subdomain[e0] != subdomain[e1] else INTERIOR)
            else:
                t = boundary_tag[e0, f0]
                if t < 0:
                    raise ValueError(f"boundary face ({e0}, {f0}) has no tag")
                tags.append(tag_names[t])
        return cls(np.asarray(vertices, dtype=float), elements, subdomain,
                   tuple(subdomain_names), np.asarray(kind, dtype=np.int64),
                   np.asarray(cylinder, dtype=float), boundary_tag, tuple(tag_names),
                   element_faces, owner, owner_local, neighbor, neighbor_local,
                   orientation, tuple(tags))

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_faces(self) -> int:
        return self.face_owner.shape[0]

    def is_boundary_face(self, fid: int) -> bool:
        return self.face_neighbor[fid] < 0

    def subdomain_of(self, e: int) -> str:
        return self.subdomain_names[self.subdomain[e]]

    def faces_with_tag(self, tag: str) -> list[int]:
        return [f for f, t in enumerate(self.face_tag) if t == tag]

    def geometry_key(self, e: int, length_scale: float = 1.0) -> tuple:
        """Key identifying an element's geometry up to translation."""
        if self.kind[e] == CYLINDER:
            r0, r1, t0, t1, z0, z1 = self.cylinder[e]
            vals = np.array([r0, r1, t0, t1, z1 - z0]) / np.array([length_scale] * 2 + [1, 1, length_scale])
            return ("cyl",) + tuple(np.round(vals, 12))
        X = self.vertices[self.elements[e]]
        rel = (X - X[0]) / length_scale
        return ("aff",) + tuple(np.round(rel.ravel(), 12))

    def scaled(self, length_scale: float) -> "Mesh":
        cyl = self.cylinder.copy()
        cyl[:, [0, 1, 4, 5]] /= length_scale
        return Mesh(self.vertices / length_scale, self.elements, self.subdomain,
                    self.subdomain_names, self.kind, cyl, self.boundary_tag, self.tag_names,
                    self.element_faces, self.face_owner, self.face_owner_local,
                    self.face_neighbor, self.face_neighbor_local, self.face_orientation,
                    self.face_tag)

    def dump(self, path) -> None:
        """Plain-text dump: one record per line, for external viewers."""
        with open(path, "w") as fh:
            fh.write("# coupled_dpg hexahedral mesh\n")
            fh.write(f"vertices {len(self.vertices)}\n")
            for x in self.vertices:
                fh.write("v {:.17g} {:.17g} {:.17g}\n".format(*x))
            fh.write(f"elements {self.n_elements}\n")
            for e in range(self.n_elements):
                vs = " ".join(str(v) for v in self.elements[e])
                fh.write(f"e {vs} {self.subdomain_of(e)}\n")
            fh.write(f"faces {self.n_faces}\n")
            for f in range(self.n_faces):
                fh.write(f"f {self.face_owner[f]} {self.face_owner_local[f]} "
                         f"{self.face_neighbor[f]} {self.face_neighbor_local[f]} "
                         f"{self.face_orientation[f]} {self.face_tag[f]}\n")


# ------------------------------------------------------------------ geometry


def _trilinear(xi: np.ndarray):
    N = np.empty((xi.shape[0], 8))
    dN = np.empty((xi.shape[0], 8, 3))
    for a in range(8):
        b = (a & 1, (a >> 1) & 1, (a >> 2) & 1)
        f = [xi[:, d] if b[d] else 1.0 - xi[:, d] for d in range(3)]
        df = [1.0 if b[d] else -1.0 for d in range(3)]
        N[:, a] = f[0] * f[1] * f[2]
        dN[:, a, 0] = df[0] * f[1] * f[2]
        dN[:, a, 1] = f[0] * df[1] * f[2]
        dN[:, a, 2] = f[0] * f[1] * df[2]
    return N, dN


def geometry_eval(mesh: Mesh, e: int, xi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Physical points, Jacobians ``dx/dxi`` and their determinants."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    if mesh.kind[e] == CYLINDER:
        r0, r1, t0, t1, z0, z1 = mesh.cylinder[e]
        r = r0 + xi[:, 0] * (r1 - r0)
        th = t0 + xi[:, 1] * (t1 - t0)
        c, s = np.cos(th), np.sin(th)
        x = np.column_stack([r * c, r * s, z0 + xi[:, 2] * (z1 - z0)])
        J = np.zeros((xi.shape[0], 3, 3))
        J[:, 0, 0], J[:, 1, 0] = (r1 - r0) * c, (r1 - r0) * s
        J[:, 0, 1], J[:, 1, 1] = -(t1 - t0) * r * s, (t1 - t0) * r * c
        J[:, 2, 2] = z1 - z0
        detJ = (r1 - r0) * (t1 - t0) * (z1 - z0) * r
    else:
        X = mesh.vertices[mesh.elements[e]]
        N, dN = _trilinear(xi)
        x = N @ X
        J = np.einsum("ai,qaj->qij", X, dN)
        detJ = np.linalg.det(J)
    if np.any(detJ <= 0):
        raise RuntimeError(f"element {e} has a non-positive Jacobian determinant")
    return x, J, detJ


@dataclass(frozen=True)
class FaceQuadrature:
    st: np.ndarray  # (n, 2) face coordinates
    xi: np.ndarray  # (n, 3) reference points
    x: np.ndarray  # (n, 3) physical points
    normal: np.ndarray  # (n, 3) unit outward normal
    weight: np.ndarray  # (n,) physical surface weights
    ref_weight: np.ndarray  # (n,) weights on the unit square


def face_quadrature(mesh: Mesh, e: int, local_face: int, order: int) -> FaceQuadrature:
    if not 0 <= local_face < 6:
        raise ValueError(f"local face id must be in 0..5, got {local_face}")
    st, w = face_rule(order)
    xi = face_point_to_reference(local_face, st)
    x, J, detJ = geometry_eval(mesh, e, xi)
    nref = np.zeros(3)
    nref[FACE_AXIS[local_face]] = 1.0 if FACE_SIDE[local_face] else -1.0
    # Nanson: n dS = detJ J^{-T} n_ref dS_ref
    nvec = detJ[:, None] * np.linalg.solve(np.swapaxes(J, 1, 2), np.broadcast_to(nref, x.shape)[..., None])[..., 0]
    area = np.linalg.norm(nvec, axis=1)
    return FaceQuadrature(st, xi, x, nvec / area[:, None], w * area, w)


def element_volume(mesh: Mesh, e: int, n: int = 6) -> float:
    xi, w = volume_rule(n)
    _, _, detJ = geometry_eval(mesh, e, xi)
    return float(w @ detJ)


# ------------------------------------------------------------- construction


def _side_tag_rule(ijk, divisions, f) -> str:
    return ("x0", "x1", "y0", "y1", "z0", "z1")[f]


def build_box_mesh(extents: Sequence[float], divisions: Sequence[int],
                   subdomain_rule: Callable[[int, int, int], str] | None = None,
                   boundary_rule: Callable | None = None,
                   origin: Sequence[float] = (0.0, 0.0, 0.0)) -> Mesh:
    """Structured grid of affine hexahedra.

    ``subdomain_rule(i, j, k)`` names the subdomain of element (i, j, k) and
    ``boundary_rule((i, j, k), divisions, local_face)`` names the boundary part
    of a boundary face (default: the side names x0, x1, ..., z1).
    """
    extents = [float(v) for v in extents]
    divisions = [int(n) for n in divisions]
    if len(extents) != 3 or len(divisions) != 3:
        raise ValueError("extents and divisions need three entries")
    if min(extents) <= 0 or min(divisions) < 1:
        raise ValueError("extents must be positive and divisions at least 1")
    subdomain_rule = subdomain_rule or (lambda i, j, k: "domain")
    boundary_rule = boundary_rule or _side_tag_rule
    nx, ny, nz = divisions
    axes = [origin[d] + np.linspace(0.0, extents[d], divisions[d] + 1) for d in range(3)]

    def vid(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    Z, Y, X = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    elements, sub, btag = [], [], []
    sub_names: list[str] = []
    tag_names: list[str] = []
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                elements.append([vid(i + (a & 1), j + ((a >> 1) & 1), k + ((a >> 2) & 1)) for a in range(8)])
                name = subdomain_rule(i, j, k)
                if name not in sub_names:
                    sub_names.append(name)
                sub.append(sub_names.index(name))
                row = []
                ijk = (i, j, k)
                for f in range(6):
                    d, side = FACE_AXIS[f], FACE_SIDE[f]
                    on_boundary = ijk[d] == (divisions[d] - 1 if side else 0)
                    if on_boundary:
                        tag = boundary_rule(ijk, divisions, f)
                        if tag not in tag_names:
                            tag_names.append(tag)
                        row.append(tag_names.index(tag))
                    else:
                        row.append(-1)
                btag.append(row)
    ne = len(elements)
    return Mesh.create(vertices, elements, sub, sub_names, np.full(ne, AFFINE),
                       np.full((ne, 6), np.nan), btag, tag_names)


def octant_rule(divisions: Sequence[int]) -> Callable[[int, int, int], str]:
    """Subdomain rule splitting a box grid into its 8 octants ``octant_ijk``."""
    half = [n / 2 for n in divisions]

    def rule(i, j, k):
        return "octant_{}{}{}".format(int(i >= half[0]), int(j >= half[1]), int(k >= half[2]))

    return rule


def build_cylinder_shell_mesh(R_in: float, R_mid: float, R_out: float, length: float = 1.0,
                              n_theta: int = 4, n_z: int = 1, n_r_inner: int = 1,
                              n_r_outer: int = 1) -> Mesh:
    """Full two-layer annulus with exact cylindrical element maps.

    Inner layer elements belong to subdomain "rubber", outer ones to "steel".
    Boundary parts: "inner" (r = R_in), "outer" (r = R_out), "bottom" (z = 0)
    and "top" (z = length).
    """
    if not 0 < R_in < R_mid < R_out:
        raise ValueError("radii must satisfy 0 < R_in < R_mid < R_out")
    if length <= 0:
        raise ValueError("length must be positive")
    if n_theta < 4:
        raise ValueError("n_theta must be at least 4")
    if min(n_z, n_r_inner, n_r_outer) < 1:
        raise ValueError("element counts must be at least 1")
    radii = np.concatenate([np.linspace(R_in, R_mid, n_r_inner + 1),
                            np.linspace(R_mid, R_out, n_r_outer + 1)[1:]])
    thetas = np.linspace(0.0, 2 * math.pi, n_theta + 1)
    zs = np.linspace(0.0, length, n_z + 1)
    nr = len(radii)

    def vid(ir, it, iz):
        return ir + nr * ((it % n_theta) + n_theta * iz)

    vertices = np.empty((nr * n_theta * (n_z + 1), 3))
    for iz in range(n_z + 1):
        for it in range(n_theta):
            for ir in range(nr):
                vertices[vid(ir, it, iz)] = (radii[ir] * math.cos(thetas[it]),
                                             radii[ir] * math.sin(thetas[it]), zs[iz])
    tag_names = ("inner", "outer", "bottom", "top")
    elements, sub, cyl, btag = [], [], [], []
    n_rad = nr - 1
    for iz in range(n_z):
        for it in range(n_theta):
            for ir in range(n_rad):
                elements.append([vid(ir + (a & 1), it + ((a >> 1) & 1), iz + ((a >> 2) & 1))
                                 for a in range(8)])
                sub.append(0 if ir < n_r_inner else 1)
                cyl.append([radii[ir], radii[ir + 1], thetas[it], thetas[it + 1], zs[iz], zs[iz + 1]])
                btag.append([0 if ir == 0 else -1, 1 if ir == n_rad - 1 else -1, -1, -1,
                             2 if iz == 0 else -1, 3 if iz == n_z - 1 else -1])
    ne = len(elements)
    return Mesh.create(vertices, elements, sub, ("rubber", "steel"), np.full(ne, CYLINDER),
                       cyl, btag, tag_names)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every hexahedron into 8 children (new mesh; input untouched)."""
    new_vertices = [v for v in mesh.vertices]
    index: dict[tuple, int] = {(( int(v), 8),): int(v) for v in range(len(mesh.vertices))}
    labels = [(a, b, c) for c in range(3) for b in range(3) for a in range(3)]
    xi_pts = np.array(labels, dtype=float) / 2.0
    elements, sub, kind, cyl, btag = [], [], [], [], []
    for e in range(mesh.n_elements):
        ids = mesh.elements[e]
        x, _, _ = geometry_eval(mesh, e, xi_pts)
        local = {}
        for n, lab in enumerate(labels):
            weights = {}
            for a in range(8):
                w = 1
                for d in range(3):
                    w *= lab[d] if (a >> d) & 1 else 2 - lab[d]
                if w:
                    weights[int(ids[a])] = weights.get(int(ids[a]), 0) + w
            key = tuple(sorted(weights.items()))
            if key not in index:
                index[key] = len(new_vertices)
                new_vertices.append(x[n])
            local[lab] = index[key]
        for ck in (0, 1):
            for cj in (0, 1):
                for ci in (0, 1):
                    c = (ci, cj, ck)
                    elements.append([local[(ci + (a & 1), cj + ((a >> 1) & 1), ck + ((a >> 2) & 1))]
                                     for a in range(8)])
                    sub.append(mesh.subdomain[e])
                    kind.append(mesh.kind[e])
                    if mesh.kind[e] == CYLINDER:
                        r0, r1, t0, t1, z0, z1 = mesh.cylinder[e]
                        rm, tm, zm = 0.5 * (r0 + r1), 0.5 * (t0 + t1), 0.5 * (z0 + z1)
                        cyl.append([(r0, rm)[ci], (rm, r1)[ci], (t0, tm)[cj], (tm, t1)[cj],
                                    (z0, zm)[ck], (zm, z1)[ck]])
                    else:
                        cyl.append([np.nan] * 6)
                    btag.append([mesh.boundary_tag[e, f] if c[FACE_AXIS[f]] == FACE_SIDE[f] else -1
                                 for f in range(6)])
    return Mesh.create(np.array(new_vertices), elements, sub, mesh.subdomain_names, kind, cyl,
                       btag, mesh.tag_names)
