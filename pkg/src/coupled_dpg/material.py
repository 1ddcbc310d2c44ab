"""Isotropic linear elastic materials.

Tensors act on arrays of shape ``(..., 3, 3)``; both the stiffness and the
compliance are extended by zero to the antisymmetric matrices, so only the
symmetric part of the argument is ever seen.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class IsotropicMaterial:
    """Lame parameters, with ``incompressible`` standing for lambda = infinity."""

    mu: float
    lam: float = 0.0
    incompressible: bool = False

    def __post_init__(self):
        if not (self.mu > 0 and math.isfinite(self.mu)):
            raise ValueError(f"shear modulus must be positive and finite, got {self.mu}")
        if not self.incompressible:
            if not math.isfinite(self.lam):
                raise ValueError("lambda must be finite; use incompressible=True instead")
            if 3 * self.lam + 2 * self.mu <= 0:
                raise ValueError("bulk modulus 3*lambda + 2*mu must be positive")

    @property
    def compliance_trace_coefficient(self) -> float:
        if self.incompressible:
            return 1.0 / (6.0 * self.mu)
        return self.lam / (2.0 * self.mu * (3.0 * self.lam + 2.0 * self.mu))

    def scaled(self, stress_scale: float) -> "IsotropicMaterial":
        lam = self.lam if self.incompressible else self.lam / stress_scale
        return IsotropicMaterial(self.mu / stress_scale, lam, self.incompressible)


def lame_from_engineering(E: float, nu: float) -> IsotropicMaterial:
    """Convert Young's modulus and Poisson's ratio to Lame parameters.

    ``nu == 0.5`` gives the incompressible material with ``mu = E / 3``.
    """
    if not E > 0:
        raise ValueError(f"Young's modulus must be positive, got {E}")
    if not (-1.0 < nu <= 0.5):
        raise ValueError(f"Poisson ratio must lie in (-1, 0.5], got {nu}")
    mu = E / (2.0 * (1.0 + nu))
    if nu == 0.5:
        return IsotropicMaterial(mu=mu, incompressible=True)
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return IsotropicMaterial(mu=mu, lam=lam)


def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def skew(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M - np.swapaxes(M, -1, -2))


def _trace_identity(M: np.ndarray) -> np.ndarray:
    tr = np.trace(M, axis1=-2, axis2=-1)
    return tr[..., None, None] * np.eye(3)


def stiffness_apply(m: IsotropicMaterial, M: np.ndarray) -> np.ndarray:
    """lambda tr(M_sym) I + 2 mu M_sym."""
    if m.incompressible:
        raise ValueError("the stiffness tensor is unbounded for an incompressible material")
    Ms = sym(np.asarray(M, dtype=float))
    return m.lam * _trace_identity(Ms) + 2.0 * m.mu * Ms


def compliance_apply(m: IsotropicMaterial, M: np.ndarray) -> np.ndarray:
    """M_sym / (2 mu) - c tr(M_sym) I, with c -> 1/(6 mu) when incompressible."""
    Ms = sym(np.asarray(M, dtype=float))
    return Ms / (2.0 * m.mu) - m.compliance_trace_coefficient * _trace_identity(Ms)
