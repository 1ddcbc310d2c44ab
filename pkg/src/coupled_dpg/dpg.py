"""Element-local DPG condensation.

With ``G = L L^T`` the Cholesky factor of the test Gram matrix, the local
stiffness is ``(L^-1 B)^T (L^-1 B)`` and the load ``(L^-1 B)^T (L^-1 l)``.
The whitened operator ``W = L^-1 B`` and load ``r = L^-1 l`` are kept so the
element residual ``|W u - r|^2`` can be evaluated after the global solve.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg as sla

from .forms import GramBlock, assemble_gram

BREAKDOWN_TOL = 1e-14


class GramBreakdownError(np.linalg.LinAlgError):
    pass


def cholesky_checked(G: np.ndarray, label: str = "") -> np.ndarray:
    """Lower Cholesky factor; pivots below 1e-14 * max diag count as breakdown."""
    G = np.asarray(G, dtype=float)
    scale = float(np.max(np.abs(np.diag(G)))) if G.size else 0.0
    try:
        L = sla.cholesky(G, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise GramBreakdownError(f"Gram matrix not positive definite ({label}): {exc}") from None
    piv = np.diag(L) ** 2
    if G.size and piv.min() <= BREAKDOWN_TOL * scale:
        k = int(piv.argmin())
        raise GramBreakdownError(f"Gram factorization breakdown ({label}) at pivot {k}: "
                                 f"{piv[k]:.3e} <= {BREAKDOWN_TOL:g} * {scale:.3e}")
    return L


@dataclass
class LocalSystem:
    B: np.ndarray
    ell: np.ndarray
    W: np.ndarray
    r: np.ndarray
    stiffness: np.ndarray
    load: np.ndarray
    factors: list = field(default_factory=list)

    @property
    def cholesky_factor(self) -> np.ndarray:
        """Dense lower factor, in the test ordering of ``B``."""
        n = self.B.shape[0]
        L = np.zeros((n, n))
        for rows, Lb in self.factors:
            L[np.ix_(rows, rows)] = Lb
        return L

    @property
    def G(self) -> np.ndarray:
        L = self.cholesky_factor
        return L @ L.T


def _finish(B, ell, W, r, factors) -> LocalSystem:
    K = W.T @ W
    K = 0.5 * (K + K.T)
    return LocalSystem(B, ell, W, r, K, W.T @ r, factors)


def condense(B: np.ndarray, ell: np.ndarray, G: np.ndarray, label: str = "") -> LocalSystem:
    B = np.asarray(B, dtype=float)
    ell = np.asarray(ell, dtype=float)
    L = cholesky_checked(G, label)
    Wr = sla.solve_triangular(L, np.column_stack([B, ell]), lower=True)
    rows = np.arange(B.shape[0])
    return _finish(B, ell, Wr[:, :-1], Wr[:, -1], [(rows, L)])


def condense_with_l2_shortcut(B: np.ndarray, ell: np.ndarray, G: np.ndarray,
                              l2_index: Sequence[int], label: str = "") -> LocalSystem:
    """As ``condense`` with the rows in ``l2_index`` whitened by direct scaling.

    Those rows must carry a diagonal Gram block that does not couple to the
    remaining test functions.
    """
    B = np.asarray(B, dtype=float)
    ell = np.asarray(ell, dtype=float)
    G = np.asarray(G, dtype=float)
    n = B.shape[0]
    l2 = np.zeros(n, bool)
    l2[np.asarray(l2_index, dtype=int)] = True
    if not l2.any():
        return condense(B, ell, G, label)
    Gl = G[np.ix_(l2, l2)]
    d = np.diag(Gl)
    off = np.abs(Gl - np.diag(d)).max() if Gl.size else 0.0
    if (~l2).any():
        off = max(off, np.abs(G[np.ix_(l2, ~l2)]).max())
    if off > 1e-12 * d.max():
        raise ValueError("L2 shortcut requires a diagonal, uncoupled Gram block")
    if d.min() <= BREAKDOWN_TOL * d.max():
        raise GramBreakdownError(f"degenerate L2 Gram block ({label})")
    s = np.sqrt(d)
    W = np.empty_like(B)
    r = np.empty_like(ell)
    W[l2] = B[l2] / s[:, None]
    r[l2] = ell[l2] / s
    rows_l2 = np.flatnonzero(l2)
    factors = [(rows_l2, np.diag(s))]
    rest = np.flatnonzero(~l2)
    if rest.size:
        L = cholesky_checked(G[np.ix_(rest, rest)], label)
        Wr = sla.solve_triangular(L, np.column_stack([B[rest], ell[rest]]), lower=True)
        W[rest], r[rest] = Wr[:, :-1], Wr[:, -1]
        factors.append((rest, L))
    return _finish(B, ell, W, r, factors)


@dataclass
class BlockFactor:
    """Factor of one repeated scalar Gram block (or its diagonal if orthonormal)."""

    block: GramBlock
    L: np.ndarray | None
    diag: np.ndarray | None

    def whiten(self, X: np.ndarray) -> np.ndarray:
        """Apply the inverse factor to rows ``offset:offset+size`` of ``X`` (copy)."""
        b = self.block
        m = b.G.shape[0]
        Y = X[b.offset:b.offset + b.size]
        tail = Y.shape[1:]
        Y = Y.reshape((b.reps, m) + tail)
        if self.diag is not None:
            shape = (1, m) + (1,) * len(tail)
            return (Y / self.diag.reshape(shape)).reshape((b.size,) + tail)
        Z = np.moveaxis(Y, 1, 0).reshape(m, -1)
        Z = sla.solve_triangular(self.L, Z, lower=True)
        Z = np.moveaxis(Z.reshape((m, b.reps) + tail), 0, 1)
        return Z.reshape((b.size,) + tail)


def factor_blocks(blocks: Sequence[GramBlock], label: str = "") -> list[BlockFactor]:
    out = []
    for i, b in enumerate(blocks):
        lab = f"{label}, test block {i}"
        d = np.diag(b.G)
        if b.l2 and np.abs(b.G - np.diag(d)).max() <= 1e-13 * d.max():
            if d.min() <= BREAKDOWN_TOL * d.max():
                raise GramBreakdownError(f"degenerate L2 Gram block ({lab})")
            out.append(BlockFactor(b, None, np.sqrt(d)))
        else:
            out.append(BlockFactor(b, cholesky_checked(b.G, lab), None))
    return out


def whiten(factors: Sequence[BlockFactor], X: np.ndarray) -> np.ndarray:
    return np.concatenate([f.whiten(X) for f in factors], axis=0)


def condense_blocks(B: np.ndarray, ell: np.ndarray, blocks: Sequence[GramBlock],
                    label: str = "") -> LocalSystem:
    """Condensation exploiting the block-diagonal, repeated structure of the Gram matrix."""
    factors = factor_blocks(blocks, label)
    W = whiten(factors, B)
    r = whiten(factors, ell)
    fl = []
    for f in factors:
        m = f.block.G.shape[0]
        Lb = np.diag(f.diag) if f.diag is not None else f.L
        for k in range(f.block.reps):
            fl.append((np.arange(f.block.offset + k * m, f.block.offset + (k + 1) * m), Lb))
    return _finish(B, ell, W, r, fl)


def local_residual(sys: LocalSystem, u_local: np.ndarray) -> float:
    """Squared dual-norm residual of the element, ``|L^-1 (B u - l)|^2``."""
    e = sys.W @ np.asarray(u_local, dtype=float) - sys.r
    return float(e @ e)


def gram_from_blocks(blocks: Sequence[GramBlock]) -> np.ndarray:
    return assemble_gram(list(blocks))


@dataclass
class Condensed:
    """Element-interior unknowns eliminated from a local stiffness matrix.

    ``S = K_ee - K_ei K_ii^-1 K_ie`` acts on the exposed unknowns; the
    interior ones follow from ``K_ii u_i = F_i - K_ie u_e``.
    """

    exposed: np.ndarray
    interior: np.ndarray
    S: np.ndarray
    chol_ii: np.ndarray | None
    K_ie: np.ndarray

    def reduce_load(self, F: np.ndarray) -> np.ndarray:
        Fe = F[self.exposed]
        if self.chol_ii is None:
            return Fe.copy()
        y = sla.cho_solve((self.chol_ii, True), F[self.interior])
        return Fe - self.K_ie.T @ y

    def recover(self, F: np.ndarray, u_exposed: np.ndarray) -> np.ndarray:
        u = np.zeros(F.shape[0])
        u[self.exposed] = u_exposed
        if self.chol_ii is not None:
            u[self.interior] = sla.cho_solve((self.chol_ii, True), F[self.interior] - self.K_ie @ u_exposed)
        return u


def static_condensation(K: np.ndarray, interior_mask: np.ndarray, label: str = "") -> Condensed:
    interior_mask = np.asarray(interior_mask, bool)
    ii = np.flatnonzero(interior_mask)
    ee = np.flatnonzero(~interior_mask)
    if ii.size == 0:
        return Condensed(ee, ii, K.copy(), None, np.zeros((0, ee.size)))
    Kii = K[np.ix_(ii, ii)]
    try:
        C = cholesky_checked(Kii, f"{label}, interior stiffness")
    except GramBreakdownError as exc:
        raise np.linalg.LinAlgError(f"element interior unknowns not determined: {exc}") from None
    Kie = K[np.ix_(ii, ee)]
    X = sla.solve_triangular(C, Kie, lower=True)
    S = K[np.ix_(ee, ee)] - X.T @ X
    S = 0.5 * (S + S.T)
    return Condensed(ee, ii, S, C, Kie)
