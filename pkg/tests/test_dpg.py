import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coupled_dpg.dpg import (GramBreakdownError, cholesky_checked, condense, condense_blocks,
                             condense_with_l2_shortcut, local_residual, static_condensation)
from coupled_dpg.forms import Formulation, GramBlock, gram_blocks, local_load_vector, local_operator_matrix
from coupled_dpg.material import IsotropicMaterial
from coupled_dpg.mesh import build_box_mesh


def random_problem(seed, n_test=12, n_trial=5):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n_test, n_test))
    G = M @ M.T + n_test * np.eye(n_test)
    return rng.standard_normal((n_test, n_trial)), rng.standard_normal(n_test), G


@given(st.integers(0, 10 ** 6))
def test_condense_matches_definition(seed):
    B, ell, G = random_problem(seed)
    sys = condense(B, ell, G)
    Ginv = np.linalg.inv(G)
    np.testing.assert_allclose(sys.stiffness, B.T @ Ginv @ B, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(sys.load, B.T @ Ginv @ ell, rtol=1e-10, atol=1e-12)
    np.testing.assert_array_equal(sys.stiffness, sys.stiffness.T)
    np.testing.assert_allclose(sys.G, G, rtol=1e-12)


@given(st.integers(0, 10 ** 6), st.integers(0, 10 ** 6))
def test_residual_is_dual_norm(seed, useed):
    B, ell, G = random_problem(seed)
    u = np.random.default_rng(useed).standard_normal(B.shape[1])
    sys = condense(B, ell, G)
    d = B @ u - ell
    assert local_residual(sys, u) == pytest.approx(d @ np.linalg.solve(G, d), rel=1e-9)


@given(st.integers(0, 10 ** 6))
def test_minimiser_is_orthogonal(seed):
    """The least-squares minimiser makes the residual orthogonal to the range of B."""
    B, ell, G = random_problem(seed)
    sys = condense(B, ell, G)
    u = np.linalg.solve(sys.stiffness, sys.load)
    np.testing.assert_allclose(sys.W.T @ (sys.W @ u - sys.r), 0.0, atol=1e-9)


@given(st.integers(0, 10 ** 6))
def test_l2_shortcut_agrees(seed):
    rng = np.random.default_rng(seed)
    B, ell, G = random_problem(seed)
    d = rng.random(4) + 0.5
    G[:4, :] = 0.0
    G[:, :4] = 0.0
    G[:4, :4] = np.diag(d)
    a = condense(B, ell, G)
    b = condense_with_l2_shortcut(B, ell, G, range(4))
    np.testing.assert_allclose(a.stiffness, b.stiffness, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(a.load, b.load, rtol=1e-10, atol=1e-12)


def test_l2_shortcut_rejects_coupled_block():
    B, ell, G = random_problem(0)
    with pytest.raises(ValueError):
        condense_with_l2_shortcut(B, ell, G, [0, 1])


@pytest.mark.parametrize("f", list(Formulation))
def test_block_condensation_agrees_with_dense(f):
    mesh = build_box_mesh((1.0, 0.6, 1.7), (1, 1, 1))
    m = IsotropicMaterial(mu=1.0, lam=2.0)
    B = local_operator_matrix(mesh, 0, f, m, 2, 1)
    ell = local_load_vector(mesh, 0, f, lambda x: np.column_stack([x[:, 1], x[:, 0] ** 2, 1 + 0 * x[:, 2]]), 2, 1)
    blocks = gram_blocks(mesh, 0, f, 2, 1)
    fast = condense_blocks(B, ell, blocks)
    dense = condense(B, ell, fast.G)
    np.testing.assert_allclose(fast.stiffness, dense.stiffness, rtol=1e-10, atol=1e-10 * np.abs(dense.stiffness).max())
    np.testing.assert_allclose(fast.load, dense.load, rtol=1e-10, atol=1e-12)


def test_cholesky_breakdown_reported():
    G = np.diag([1.0, 1e-17, 1.0])
    with pytest.raises(GramBreakdownError, match="pivot 1"):
        cholesky_checked(G, "element 7")
    with pytest.raises(GramBreakdownError):
        cholesky_checked(-np.eye(2))


def test_degenerate_l2_block_reported():
    blk = GramBlock(0, np.diag([1.0, 0.0]), 1, True)
    with pytest.raises(GramBreakdownError):
        condense_blocks(np.ones((2, 1)), np.ones(2), [blk])


@given(st.integers(0, 10 ** 6))
def test_static_condensation_exact(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((9, 9))
    K = A @ A.T + np.eye(9)
    F = rng.standard_normal(9)
    mask = np.zeros(9, bool)
    mask[[1, 4, 5, 8]] = True
    c = static_condensation(K, mask)
    ue = np.linalg.solve(c.S, c.reduce_load(F))
    np.testing.assert_allclose(c.recover(F, ue), np.linalg.solve(K, F), rtol=1e-8, atol=1e-10)


def test_static_condensation_without_interior():
    K = np.eye(3) * 2.0
    c = static_condensation(K, np.zeros(3, bool))
    np.testing.assert_array_equal(c.S, K)
    np.testing.assert_array_equal(c.reduce_load(np.ones(3)), np.ones(3))
