import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coupled_dpg.mesh import (FACE_AXIS, FACE_SIDE, INTERFACE, INTERIOR, apply_orientation,
                              build_box_mesh, build_cylinder_shell_mesh, element_volume, face_point_to_reference,
                              face_quadrature, face_rule, geometry_eval, octant_rule, refine_uniform)


def hose(**kw):
    args = dict(R_in=0.5, R_mid=0.99, R_out=1.0, length=1.0, n_theta=4, n_z=1, n_r_inner=1, n_r_outer=1)
    args.update(kw)
    return build_cylinder_shell_mesh(**args)


def n_interior(m):
    return int((m.face_neighbor >= 0).sum())


def test_box_counts():
    m = build_box_mesh((2, 2, 2), (2, 2, 2))
    assert (m.n_elements, len(m.vertices), m.n_faces) == (8, 27, 36)
    assert m.n_faces - n_interior(m) == 24


def test_single_element_box():
    m = build_box_mesh((1, 1, 1), (1, 1, 1))
    assert m.n_elements == 1 and m.n_faces == 6 and n_interior(m) == 0


def test_octants_interface_faces():
    m = build_box_mesh((2, 2, 2), (2, 2, 2), octant_rule((2, 2, 2)))
    assert len(m.subdomain_names) == 8
    interior = [m.face_tag[f] for f in range(m.n_faces) if m.face_neighbor[f] >= 0]
    assert len(interior) == 12 and all(t == INTERFACE for t in interior)


def test_single_subdomain_interior_tags():
    m = build_box_mesh((2, 2, 2), (2, 2, 2))
    assert all(m.face_tag[f] == INTERIOR for f in range(m.n_faces) if m.face_neighbor[f] >= 0)


@pytest.mark.parametrize("ext,div", [((0, 1, 1), (1, 1, 1)), ((1, 1, 1), (0, 1, 1)), ((-1, 1, 1), (1, 1, 1))])
def test_box_rejects_degenerate(ext, div):
    with pytest.raises(ValueError):
        build_box_mesh(ext, div)


def test_hose_counts():
    m = hose()
    names = [m.subdomain_of(e) for e in range(m.n_elements)]
    assert m.n_elements == 8 and names.count("rubber") == 4 and names.count("steel") == 4
    assert m.face_tag.count(INTERFACE) == 4
    assert set(m.tag_names) == {"inner", "outer", "bottom", "top"}


@pytest.mark.parametrize("kw", [dict(R_mid=1.0), dict(R_in=1.0), dict(n_theta=3), dict(length=0.0)])
def test_hose_rejects(kw):
    with pytest.raises(ValueError):
        hose(**kw)


def annulus_volume(m):
    return sum(element_volume(m, e, 8) for e in range(m.n_elements))


@pytest.mark.parametrize("levels", [0, 1, 2])
def test_hose_volume(levels):
    m = hose()
    for _ in range(levels):
        m = refine_uniform(m)
    assert annulus_volume(m) == pytest.approx(math.pi * (1.0 - 0.25), rel=1e-13)


@given(st.floats(0.1, 1.0), st.floats(0.05, 0.5), st.floats(0.05, 0.5), st.floats(0.2, 3.0),
       st.integers(4, 7), st.integers(1, 2))
def test_hose_volume_property(R_in, t1, t2, L, n_theta, n_z):
    m = build_cylinder_shell_mesh(R_in, R_in + t1, R_in + t1 + t2, L, n_theta, n_z)
    R_out = R_in + t1 + t2
    assert annulus_volume(m) == pytest.approx(math.pi * (R_out ** 2 - R_in ** 2) * L, rel=1e-12)


def test_refinement_counts_and_inheritance():
    m = build_box_mesh((2, 2, 2), (2, 2, 2), octant_rule((2, 2, 2)))
    r = refine_uniform(m)
    assert r.n_elements == 64
    assert sorted(r.subdomain_names) == sorted(m.subdomain_names)
    assert sum(element_volume(r, e) for e in range(r.n_elements)) == pytest.approx(8.0, rel=1e-14)
    for tag in m.tag_names:
        assert len(r.faces_with_tag(tag)) == 4 * len(m.faces_with_tag(tag))


def test_refinement_bisects_cylinder_parameters():
    m = hose()
    r = refine_uniform(m)
    r0, r1, t0, t1, z0, z1 = m.cylinder[0]
    kids = r.cylinder[:8]
    thetas = sorted({(a, b) for a, b in kids[:, 2:4]})
    tm = 0.5 * (t0 + t1)
    assert thetas == [(t0, tm), (tm, t1)]


def test_affine_unit_cube_geometry():
    m = build_box_mesh((1, 1, 1), (1, 1, 1))
    xi = np.random.default_rng(1).random((7, 3))
    x, J, detJ = geometry_eval(m, 0, xi)
    np.testing.assert_allclose(x, xi, atol=1e-15)
    np.testing.assert_allclose(J, np.broadcast_to(np.eye(3), J.shape), atol=1e-15)
    np.testing.assert_allclose(detJ, 1.0, atol=1e-15)


def test_scaled_element_determinant():
    h = 0.3
    m = build_box_mesh((h, h, h), (1, 1, 1))
    _, _, detJ = geometry_eval(m, 0, np.random.default_rng(2).random((5, 3)))
    np.testing.assert_allclose(detJ, h ** 3, rtol=1e-14)


def test_cylinder_determinant():
    m = hose()
    xi = np.random.default_rng(3).random((9, 3))
    r0, r1, t0, t1, z0, z1 = m.cylinder[0]
    _, _, detJ = geometry_eval(m, 0, xi)
    r = r0 + xi[:, 0] * (r1 - r0)
    np.testing.assert_allclose(detJ, (r1 - r0) * (t1 - t0) * (z1 - z0) * r, rtol=1e-14)


def test_face_quadrature_unit_cube_bottom():
    m = build_box_mesh((1, 1, 1), (1, 1, 1))
    fq = face_quadrature(m, 0, 4, 3)
    np.testing.assert_allclose(fq.normal, np.broadcast_to([0, 0, -1.0], fq.normal.shape), atol=1e-15)
    assert fq.weight.sum() == pytest.approx(1.0, rel=1e-15)


def test_face_quadrature_inner_cylinder_normal():
    m = hose()
    e = next(e for e in range(m.n_elements) if m.subdomain_of(e) == "rubber")
    fq = face_quadrature(m, e, 0, 4)
    th = np.arctan2(fq.x[:, 1], fq.x[:, 0])
    np.testing.assert_allclose(fq.normal, -np.column_stack([np.cos(th), np.sin(th), 0 * th]), atol=1e-14)


def test_face_quadrature_rejects_bad_face():
    m = build_box_mesh((1, 1, 1), (1, 1, 1))
    with pytest.raises(ValueError):
        face_quadrature(m, 0, 6, 2)


def _shared_face_points(m, fid):
    st, _ = face_rule(3)
    e0, f0 = m.face_owner[fid], m.face_owner_local[fid]
    e1, f1 = m.face_neighbor[fid], m.face_neighbor_local[fid]
    x0, _, _ = geometry_eval(m, e0, face_point_to_reference(f0, st))
    st1 = apply_orientation(int(m.face_orientation[fid]), st)
    x1, _, _ = geometry_eval(m, e1, face_point_to_reference(f1, st1))
    return x0, x1, e0, f0, e1, f1, st, st1


@pytest.mark.parametrize("builder", [lambda: refine_uniform(build_box_mesh((2, 1, 1), (2, 1, 1))),
                                     lambda: refine_uniform(hose())])
def test_interior_faces_match_and_normals_oppose(builder):
    m = builder()
    for fid in range(m.n_faces):
        if m.face_neighbor[fid] < 0:
            continue
        x0, x1, e0, f0, e1, f1, st, st1 = _shared_face_points(m, fid)
        assert np.abs(x0 - x1).max() <= 1e-12 * (1 + np.abs(x0).max())
        n0 = face_quadrature(m, e0, f0, 3).normal
        fq1 = face_quadrature(m, e1, f1, 3)
        # neighbor normals at the owner's points
        x1q = geometry_eval(m, e1, face_point_to_reference(f1, st1))[0]
        order = [int(np.argmin(np.linalg.norm(fq1.x - p, axis=1))) for p in x1q]
        np.testing.assert_allclose(n0, -fq1.normal[order], atol=1e-12)


@pytest.mark.parametrize("builder", [lambda: build_box_mesh((1, 2, 3), (1, 1, 1)),
                                     lambda: hose()])
def test_divergence_theorem(builder):
    m = builder()

    def v(x):
        return np.column_stack([x[:, 0] ** 2 * x[:, 1], x[:, 1] * x[:, 2], x[:, 2] ** 3 + x[:, 0]])

    def div_v(x):
        return 2 * x[:, 0] * x[:, 1] + x[:, 2] + 3 * x[:, 2] ** 2

    from coupled_dpg.mesh import volume_rule
    for e in range(m.n_elements):
        xi, w = volume_rule(10)
        x, _, detJ = geometry_eval(m, e, xi)
        vol = float(np.sum(w * detJ * div_v(x)))
        surf = 0.0
        for f in range(6):
            fq = face_quadrature(m, e, f, 10)
            surf += float(np.sum(fq.weight * np.einsum("qi,qi->q", v(fq.x), fq.normal)))
        assert vol == pytest.approx(surf, rel=1e-12, abs=1e-12)


def test_boundary_tags_cover_boundary():
    m = hose()
    for f in range(m.n_faces):
        if m.face_neighbor[f] < 0:
            assert m.face_tag[f] in m.tag_names


def test_dump(tmp_path):
    m = build_box_mesh((1, 1, 1), (1, 1, 2))
    path = tmp_path / "mesh.txt"
    m.dump(path)
    lines = path.read_text().splitlines()
    assert sum(1 for ln in lines if ln.startswith("e ")) == 2
    assert sum(1 for ln in lines if ln.startswith("v ")) == 12
