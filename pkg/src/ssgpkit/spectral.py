"""Spectral factorization: from a kernel's inverse spectrum to SDE coefficients.

The pipeline is

1. expand q_c^2 / S(w) as a polynomial sum_i c_i (w^2)^i,
2. find the roots rho_k of that polynomial in u = w^2,
3. map each root to r_k = sqrt(-rho_k), choosing the branch with Re r_k > 0,
4. multiply out s(jw) = sqrt(c_m) * prod_k (r_k + jw) = sum_i a_i (jw)^i.

|s(jw)|^2 then reproduces the polynomial and 1/s(jw) is a stable transfer
function whose output has (approximately) the kernel's spectrum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import Family, KernelSpec, KernelValidationError


class ConditioningError(ArithmeticError):
    """A spectral root sits on the stability boundary."""


@dataclass(frozen=True)
class SpectralPolynomial:
    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        if c.ndim != 1 or c.size < 2:
            raise KernelValidationError("spectral polynomial needs order m >= 1")
        if c[-1] == 0:
            raise KernelValidationError("leading coefficient c_m must be nonzero")
        object.__setattr__(self, "c", c)

    @property
    def m(self) -> int:
        return self.c.size - 1

    def __call__(self, omega):
        u = np.asarray(omega, dtype=float) ** 2
        return np.polynomial.polynomial.polyval(u, self.c)


@dataclass(frozen=True)
class StableFactor:
    a: np.ndarray
    roots: np.ndarray

    @property
    def m(self) -> int:
        return self.a.size - 1

    def __call__(self, omega):
        """s(jw) evaluated at real frequencies."""
        jw = 1j * np.asarray(omega, dtype=float)
        return np.polynomial.polynomial.polyval(jw, self.a)


def taylor_inverse_spectrum(spec: KernelSpec, m: int | None = None) -> SpectralPolynomial:
    """Polynomial in w^2 approximating (RBF) or equal to (Matern) q_c^2 / S(w).

    The constant term is normalised to the kernel's natural scale (1 for RBF,
    lam^(2m) for Matern); the overall gain is fixed later by variance matching.
    """
    if spec.family is Family.PERIODIC:
        raise KernelValidationError("periodic kernels are realized by oscillator blocks, not a Taylor series")
    if spec.family is Family.MATERN:
        order = int(round(spec.nu + 0.5))
        if m is None:
            m = order
        if m != order:
            raise KernelValidationError(f"Matern nu={spec.nu} requires m = nu + 1/2 = {order}, got m={m}")
        lam2 = spec.lam**2
        c = [math.comb(m, i) * lam2 ** (m - i) for i in range(m + 1)]
        return SpectralPolynomial(np.array(c))
    if m is None or m < 1:
        raise KernelValidationError(f"RBF Taylor order must be >= 1, got {m}")
    inv_z2 = spec.z**-2
    c = [inv_z2**i / math.factorial(i) for i in range(m + 1)]
    return SpectralPolynomial(np.array(c))


def polynomial_roots(c: np.ndarray) -> np.ndarray:
    """Roots of sum_i c_i u^i as eigenvalues of the companion matrix."""
    c = np.asarray(c, dtype=float)
    n = c.size - 1
    comp = np.zeros((n, n))
    if n > 1:
        comp[1:, :-1] = np.eye(n - 1)
    comp[:, -1] = -c[:-1] / c[-1]
    return np.linalg.eigvals(comp)


def factor_spectrum(poly: SpectralPolynomial, tol: float = 1e-10) -> StableFactor:
    rho = polynomial_roots(poly.c).astype(complex)
    r = np.sqrt(-rho)
    r = np.where(r.real < 0, -r, r)
    scale = max(1.0, float(np.max(np.abs(r))))
    if np.any(np.abs(r.real) < tol * scale):
        raise ConditioningError(
            "spectral root on the imaginary axis; try a different order m or hyperparameters"
        )
    # prod (r_k + s) built by repeated convolution with [r_k, 1]
    coeffs = np.array([1.0 + 0j])
    for rk in r:
        coeffs = np.convolve(coeffs, np.array([rk, 1.0]))
    coeffs *= math.sqrt(poly.c[-1])
    if np.max(np.abs(coeffs.imag)) > 1e-8 * np.max(np.abs(coeffs)):
        raise ConditioningError("defactorized coefficients are not real; roots lost conjugate symmetry")
    return StableFactor(a=coeffs.real.copy(), roots=r)


def verify_factorization(factor: StableFactor, poly: SpectralPolynomial, grid) -> float:
    """max | |s(jw)|^2 - P(w^2) | / (1 + P(w^2)) over the grid."""
    w = np.asarray(grid, dtype=float)
    if w.size == 0:
        raise ValueError("grid must be nonempty")
    target = poly(w)
    got = np.abs(factor(w)) ** 2
    return float(np.max(np.abs(got - target) / (1.0 + target)))
