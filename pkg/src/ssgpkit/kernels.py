"""Stationary kernel families, their spectral densities and Gram matrices.

Conventions (per family, kept deliberately as the formulas are usually written
for state-space conversion):

* RBF:       k(d) = sigma2 * exp(-z**2 d**2 / 4), z an inverse length scale;
             the inverse spectrum is exp((w / z)**2) up to scale, so the
             Taylor series in w**2 has coefficients z**(-2i) / i!.
* Matern:    half-integer nu only, lam = sqrt(2 nu) / z, closed
             polynomial-times-exponential form.
* Periodic:  k(d) = sigma2 * exp(-2 z**2 sin(omega0 d / 2)**2).

Spectral densities use angular frequency, S(w) = int k(d) exp(-i w d) dd.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Any, Sequence

import numpy as np


class KernelValidationError(ValueError):
    """Raised when kernel or noise hyperparameters violate their bounds."""


class Family(str, enum.Enum):
    RBF = "rbf"
    MATERN = "matern"
    PERIODIC = "periodic"


def _is_half_integer(nu: float) -> bool:
    twice = 2.0 * nu
    return nu > 0 and abs(twice - round(twice)) < 1e-12 and int(round(twice)) % 2 == 1


@dataclass(frozen=True)
class KernelSpec:
    family: Family
    z: float
    sigma2: float = 1.0
    nu: float | None = None
    omega0: float | None = None
    qc: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not (np.isfinite(self.z) and self.z > 0):
            raise KernelValidationError(f"z must be > 0, got {self.z}")
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise KernelValidationError(f"sigma2 must be > 0, got {self.sigma2}")
        if self.family is Family.MATERN:
            if self.nu is None or not _is_half_integer(self.nu):
                raise KernelValidationError(
                    f"Matern nu must be a positive half-integer (1/2, 3/2, 5/2, ...), got {self.nu}"
                )
        if self.family is Family.PERIODIC:
            if self.omega0 is None or not (np.isfinite(self.omega0) and self.omega0 > 0):
                raise KernelValidationError(f"Periodic omega0 must be > 0, got {self.omega0}")
        if self.qc is not None and not (np.isfinite(self.qc) and self.qc > 0):
            raise KernelValidationError(f"qc must be > 0 when given, got {self.qc}")

    @property
    def lam(self) -> float:
        """Matern rate sqrt(2 nu) / z."""
        return math.sqrt(2.0 * self.nu) / self.z

    def with_params(self, **kwargs) -> "KernelSpec":
        return replace(self, **kwargs)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"family": self.family.value, "z": self.z, "sigma2": self.sigma2}
        for key in ("nu", "omega0", "qc"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "KernelSpec":
        try:
            family = Family(str(d["family"]).lower())
        except (KeyError, ValueError) as exc:
            raise KernelValidationError(f"unknown or missing kernel family: {d.get('family')!r}") from exc
        if "z" not in d:
            raise KernelValidationError("kernel spec requires 'z'")
        return cls(
            family=family,
            z=float(d["z"]),
            sigma2=float(d.get("sigma2", 1.0)),
            nu=None if d.get("nu") is None else float(d["nu"]),
            omega0=None if d.get("omega0") is None else float(d["omega0"]),
            qc=None if d.get("qc") is None else float(d["qc"]),
        )


@dataclass(frozen=True)
class NoiseSpec:
    sigma_noise2: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.sigma_noise2) and self.sigma_noise2 >= 0):
            raise KernelValidationError(f"sigma_noise2 must be >= 0, got {self.sigma_noise2}")


def spec_to_json_obj(spec: KernelSpec | Sequence[KernelSpec], noise: NoiseSpec) -> dict[str, Any]:
    """JSON object for one kernel (flat) or several (one per input, under ``inputs``)."""
    if isinstance(spec, KernelSpec):
        out = spec.to_dict()
    else:
        out = {"inputs": [s.to_dict() for s in spec]}
    out["sigma_noise2"] = noise.sigma_noise2
    return out


def spec_from_json_obj(obj: dict[str, Any]) -> tuple[KernelSpec | list[KernelSpec], NoiseSpec]:
    noise = NoiseSpec(float(obj.get("sigma_noise2", 0.0)))
    if "inputs" in obj:
        return [KernelSpec.from_dict(d) for d in obj["inputs"]], noise
    return KernelSpec.from_dict(obj), noise


def _matern_half_integer(r: np.ndarray, sigma2: float, nu: float, lam: float) -> np.ndarray:
    p = int(round(nu - 0.5))
    x = lam * r
    poly = np.zeros_like(x)
    for i in range(p + 1):
        coef = math.factorial(p + i) / (math.factorial(i) * math.factorial(p - i))
        poly += coef * (2.0 * x) ** (p - i)
    return sigma2 * math.factorial(p) / math.factorial(2 * p) * poly * np.exp(-x)


def eval_kernel(spec: KernelSpec, delta):
    """Evaluate k(delta); scalar in, scalar out, array in, array out."""
    d = np.asarray(delta, dtype=float)
    r = np.abs(d)
    if spec.family is Family.RBF:
        out = spec.sigma2 * np.exp(-0.25 * (spec.z * r) ** 2)
    elif spec.family is Family.MATERN:
        out = _matern_half_integer(r, spec.sigma2, spec.nu, spec.lam)
    else:
        s = np.sin(0.5 * spec.omega0 * r)
        out = spec.sigma2 * np.exp(-2.0 * spec.z**2 * s * s)
    return float(out) if out.ndim == 0 else out


def periodic_weights(spec: KernelSpec, J: int, n_grid: int | None = None) -> np.ndarray:
    """Cosine-series weights q_j^2, j = 0..J, by least squares over one period.

    The periodic kernel's spectrum is an impulse train at multiples of omega0;
    these weights are the impulse magnitudes.
    """
    if spec.family is not Family.PERIODIC:
        raise KernelValidationError("periodic_weights needs a periodic kernel")
    if J < 0:
        raise KernelValidationError(f"J must be >= 0, got {J}")
    n_grid = n_grid or max(16 * (J + 1), 256)
    period = 2.0 * math.pi / spec.omega0
    d = np.linspace(0.0, period, n_grid, endpoint=False)
    basis = np.cos(np.outer(d, np.arange(J + 1)) * spec.omega0)
    q2, *_ = np.linalg.lstsq(basis, eval_kernel(spec, d), rcond=None)
    return q2


def eval_spectral_density(spec: KernelSpec, omega, harmonics: int = 8):
    """Spectral density S(omega) (angular frequency).

    For the periodic family the spectrum is an impulse train; the return value
    is then the array of impulse weights ``periodic_weights(spec, harmonics)``
    and ``omega`` is ignored.
    """
    if spec.family is Family.PERIODIC:
        return periodic_weights(spec, harmonics)
    w = np.asarray(omega, dtype=float)
    if spec.family is Family.RBF:
        out = spec.sigma2 * 2.0 * math.sqrt(math.pi) / spec.z * np.exp(-((w / spec.z) ** 2))
    else:
        nu, lam = spec.nu, spec.lam
        scale = 2.0 * math.sqrt(math.pi) * math.gamma(nu + 0.5) / math.gamma(nu) * lam ** (2 * nu)
        out = spec.sigma2 * scale / (lam * lam + w * w) ** (nu + 0.5)
    return float(out) if out.ndim == 0 else out


def _as_2d(xs) -> np.ndarray:
    x = np.asarray(xs, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("inputs must be a nonempty vector or n x d matrix")
    return x


def _per_input_specs(spec, d: int) -> list[KernelSpec]:
    if isinstance(spec, KernelSpec):
        return [spec] * d
    specs = list(spec)
    if len(specs) != d:
        raise ValueError(f"{len(specs)} kernel specs given for {d} input dimensions")
    return specs


def cross_covariance(spec, xa, xb) -> np.ndarray:
    """k(xa_i, xb_j); for d > 1 the kernel is additive over input columns."""
    a, b = _as_2d(xa), _as_2d(xb)
    if a.shape[1] != b.shape[1]:
        raise ValueError("input dimension mismatch")
    specs = _per_input_specs(spec, a.shape[1])
    K = np.zeros((a.shape[0], b.shape[0]))
    for j, s in enumerate(specs):
        K += eval_kernel(s, a[:, j][:, None] - b[:, j][None, :])
    return K


def prior_variance(spec) -> float:
    if isinstance(spec, KernelSpec):
        return spec.sigma2
    return float(sum(s.sigma2 for s in spec))


def gram_matrix(spec, xs, noise: NoiseSpec | None = None) -> np.ndarray:
    """K[i, j] = k(x_i - x_j) + sigma_noise2 [i == j]."""
    x = _as_2d(xs)
    K = cross_covariance(spec, x, x)
    if noise is not None and noise.sigma_noise2:
        K[np.diag_indices_from(K)] += noise.sigma_noise2
    return K
