"""Plane-strain Voigt conventions and isotropic gradient-elastic tangents.

Strain-side vectors carry engineering shear, stress-side vectors carry plain
components, so energy products are ordinary dot products:

    e = [eps11, eps22, 2 eps12]          s = [sig11, sig22, sig12]
    h = [eta111, eta122, 2 eta112,       t = [tau111, tau122, tau112,
         eta211, eta222, 2 eta212]            tau211, tau222, tau212]

``eta[k, i, j]`` is the derivative of ``eps[i, j]`` along ``x_k``.

Units are GPa, mm and kN throughout (1 GPa = 1 kN/mm^2).
"""
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class IsotropicModuli:
    lam: float
    mu: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ParameterError(f"shear modulus must be positive, got {self.mu}")
        if not self.lam > -2.0 / 3.0 * self.mu:
            raise ParameterError(
                f"lambda={self.lam} violates lambda > -2/3 mu (mu={self.mu})")


@dataclass(frozen=True)
class GradientModuli(IsotropicModuli):
    """Lame pair plus the single internal length ``l`` (mm)."""
    l: float = 0.0

    def __post_init__(self):
        super().__post_init__()
        if not self.l >= 0:
            raise ParameterError(f"length scale must be non-negative, got {self.l}")

    @property
    def classical(self) -> IsotropicModuli:
        return IsotropicModuli(self.lam, self.mu)


def lame_from_engineering(E: float, nu: float) -> IsotropicModuli:
    """Convert Young's modulus and Poisson's ratio to the Lame pair."""
    if not E > 0:
        raise ParameterError(f"Young's modulus must be positive, got {E}")
    if not -1.0 < nu < 0.5:
        raise ParameterError(f"Poisson's ratio must lie in (-1, 0.5), got {nu}")
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    return IsotropicModuli(lam, mu)


def _c_entries(lam, mu):
    return np.array([[lam + 2 * mu, lam, 0.0],
                     [lam, lam + 2 * mu, 0.0],
                     [0.0, 0.0, mu]])


def isotropic_c(m: IsotropicModuli) -> np.ndarray:
    """3x3 plane-strain stiffness acting on engineering-shear strain vectors.

    Accepts any object with ``lam`` and ``mu`` attributes; the degenerate
    ``lam = mu = 0`` case (zero matrix) is reachable through
    :func:`isotropic_c_from` which skips validation.
    """
    return _c_entries(float(m.lam), float(m.mu))


def isotropic_c_from(lam: float, mu: float) -> np.ndarray:
    return _c_entries(float(lam), float(mu))


def gradient_d(m: GradientModuli) -> np.ndarray:
    """6x6 higher-order stiffness ``l^2 blockdiag(C, C)``."""
    return gradient_d_from(m.lam, m.mu, m.l)


def gradient_d_from(lam: float, mu: float, l: float) -> np.ndarray:
    c = _c_entries(float(lam), float(mu))
    d = np.zeros((6, 6))
    d[:3, :3] = c
    d[3:, 3:] = c
    return float(l) ** 2 * d


def blockdiag2(c: np.ndarray) -> np.ndarray:
    d = np.zeros((6, 6))
    d[:3, :3] = c
    d[3:, 3:] = c
    return d


# -- tensor <-> vector ------------------------------------------------------

def pack_strain(eps: np.ndarray) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    return np.array([eps[0, 0], eps[1, 1], 2.0 * eps[0, 1]])


def unpack_strain(e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    return np.array([[e[0], 0.5 * e[2]], [0.5 * e[2], e[1]]])


def pack_stress(sig: np.ndarray) -> np.ndarray:
    sig = np.asarray(sig, dtype=float)
    return np.array([sig[0, 0], sig[1, 1], sig[0, 1]])


def unpack_stress(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return np.array([[s[0], s[2]], [s[2], s[1]]])


def pack_strain_gradient(eta: np.ndarray) -> np.ndarray:
    """(2, 2, 2) array ``eta[k, i, j]`` -> Voigt 6-vector."""
    eta = np.asarray(eta, dtype=float)
    return np.concatenate([pack_strain(eta[0]), pack_strain(eta[1])])


def unpack_strain_gradient(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    return np.stack([unpack_strain(h[:3]), unpack_strain(h[3:])])


def pack_double_stress(tau: np.ndarray) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    return np.concatenate([pack_stress(tau[0]), pack_stress(tau[1])])


def unpack_double_stress(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return np.stack([unpack_stress(t[:3]), unpack_stress(t[3:])])
