"""Continuous-time state-space realizations of stationary kernels.

A realization is the linear SDE

    df/dx = A f + L w(x),    y = H f + eps,    E[w w'] = qc2 * delta,

with stationary state covariance Pinf (A Pinf + Pinf A^T + L qc2 L^T = 0).
Multiple-input models are additive: one block per input column, stacked
block-diagonally, each block driven by its own white noise (so ``L`` has one
column per block and ``qc2`` one entry per block).
"""
from __future__ import annotations

import json
import threading
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import _accel
from .kernels import Family, KernelSpec, KernelValidationError, eval_kernel, periodic_weights
from .spectral import StableFactor, factor_spectrum, taylor_inverse_spectrum

MAX_STATE_DIM = 64
MODEL_FORMAT_VERSION = 1

DEFAULT_RBF_ORDER = 6
DEFAULT_PERIODIC_BLOCKS = 8
PERIODIC_TOLERANCE = 1e-3


class StateDimensionError(ValueError):
    pass


class Block(NamedTuple):
    offset: int
    size: int
    input_index: int


@dataclass(frozen=True, eq=False)
class Lssm:
    A: np.ndarray
    L: np.ndarray
    H: np.ndarray
    qc2: np.ndarray
    Pinf: np.ndarray
    blocks: tuple[Block, ...]
    meta: dict = field(default_factory=dict)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return max(b.input_index for b in self.blocks) + 1

    @property
    def prior_variance(self) -> float:
        return float(self.H[0] @ self.Pinf @ self.H[0])

    def block_slices(self):
        return [slice(b.offset, b.offset + b.size) for b in self.blocks]

    def lyapunov_residual(self) -> float:
        Q = self.L @ np.diag(self.qc2) @ self.L.T
        R = self.A @ self.Pinf + self.Pinf @ self.A.T + Q
        return float(np.linalg.norm(R))

    def stability_margin(self) -> float:
        """Largest real part over the eigenvalues of A (negative means Hurwitz)."""
        return float(np.max(np.linalg.eigvals(self.A).real))


@dataclass(frozen=True)
class DiscreteStep:
    Phi: np.ndarray
    Qd: np.ndarray
    delta: float | np.ndarray


def _check_dim(s: int):
    if s > MAX_STATE_DIM:
        raise StateDimensionError(f"state dimension {s} exceeds the supported maximum {MAX_STATE_DIM}")


def solve_stationary_covariance(A, L, qc2) -> np.ndarray:
    """Solve A P + P A^T + L diag(qc2) L^T = 0 through the Kronecker identity."""
    A = np.asarray(A, dtype=float)
    L = np.asarray(L, dtype=float).reshape(A.shape[0], -1)
    qc2 = np.atleast_1d(np.asarray(qc2, dtype=float))
    eig = np.linalg.eigvals(A)
    if np.any(eig.real >= 0):
        raise ValueError("A is not Hurwitz; the stationary covariance must be supplied directly")
    s = A.shape[0]
    Q = L @ np.diag(qc2) @ L.T
    ident = np.eye(s)
    # vec(A P + P A^T) = (I kron A + A kron I) vec(P), column-major vec
    M = np.kron(ident, A) + np.kron(A, ident)
    vecP = np.linalg.solve(M, -Q.reshape(-1, order="F"))
    P = vecP.reshape(s, s, order="F")
    return 0.5 * (P + P.T)


def _companion(a_monic: np.ndarray) -> np.ndarray:
    m = a_monic.size - 1
    A = np.zeros((m, m))
    if m > 1:
        A[:-1, 1:] = np.eye(m - 1)
    A[-1, :] = -a_monic[:-1]
    return A


def companion_realize(factor: StableFactor, spec: KernelSpec) -> Lssm:
    """Companion-form realization of 1/s(jw), with qc2 chosen by variance matching.

    When ``spec.qc`` is set it is used as-is and the prior variance follows
    from it; otherwise qc2 = sigma2 / v where v is the output variance at qc2 = 1.
    """
    a = np.asarray(factor.a, dtype=float)
    if a[-1] == 0:
        raise KernelValidationError("leading SDE coefficient a_m is zero; cannot normalise to monic form")
    a_monic = a / a[-1]
    m = a_monic.size - 1
    _check_dim(m)
    A = _companion(a_monic)
    L = np.zeros((m, 1))
    L[-1, 0] = 1.0
    H = np.zeros((1, m))
    H[0, 0] = 1.0
    P1 = solve_stationary_covariance(A, L, [1.0])
    if spec.qc is None:
        qc2 = spec.sigma2 / P1[0, 0]
    else:
        qc2 = spec.qc**2
    Pinf = qc2 * P1
    return Lssm(A=A, L=L, H=H, qc2=np.array([qc2]), Pinf=Pinf, blocks=(Block(0, m, 0),))


def periodic_realize(spec: KernelSpec, J: int = DEFAULT_PERIODIC_BLOCKS) -> Lssm:
    """Oscillator-bank realization: a 1x1 constant block plus J rotation blocks."""
    if spec.family is not Family.PERIODIC:
        raise KernelValidationError("periodic_realize needs a periodic kernel")
    if J < 1:
        raise KernelValidationError(f"J must be >= 1, got {J}")
    q2 = periodic_weights(spec, J)
    q2 = np.clip(q2, 0.0, None)
    s = 1 + 2 * J
    _check_dim(s)
    A = np.zeros((s, s))
    L = np.zeros((s, 1))
    H = np.zeros((1, s))
    Pinf = np.zeros((s, s))
    H[0, 0] = 1.0
    Pinf[0, 0] = q2[0]
    for j in range(1, J + 1):
        o = 2 * j - 1
        w = j * spec.omega0
        A[o, o + 1] = -w
        A[o + 1, o] = w
        L[o + 1, 0] = 1.0
        H[0, o] = 1.0
        Pinf[o, o] = Pinf[o + 1, o + 1] = q2[j]
    period = 2.0 * np.pi / spec.omega0
    grid = np.linspace(0.0, period, 512)
    recon = np.cos(np.outer(grid, np.arange(J + 1)) * spec.omega0) @ q2
    err = float(np.max(np.abs(recon - eval_kernel(spec, grid))))
    meta = {"weights": q2.tolist(), "reconstruction_error": err}
    if err > PERIODIC_TOLERANCE * spec.sigma2:
        meta["warning"] = f"J={J} reconstructs the kernel only to {err:.3g}; increase J"
    return Lssm(A=A, L=L, H=H, qc2=np.array([0.0]), Pinf=Pinf, blocks=(Block(0, s, 0),), meta=meta)


def stack_miso(models: Sequence[Lssm]) -> Lssm:
    """Block-diagonal stack of single-input models; model i reads input column i."""
    models = list(models)
    if not models:
        raise ValueError("stack_miso needs at least one model")
    if len(models) == 1:
        return models[0]
    s = sum(mdl.state_dim for mdl in models)
    _check_dim(s)
    A = np.zeros((s, s))
    Pinf = np.zeros((s, s))
    n_noise = sum(mdl.L.shape[1] for mdl in models)
    L = np.zeros((s, n_noise))
    H = np.zeros((1, s))
    qc2 = []
    blocks = []
    o = 0
    col = 0
    for i, mdl in enumerate(models):
        n = mdl.state_dim
        A[o : o + n, o : o + n] = mdl.A
        Pinf[o : o + n, o : o + n] = mdl.Pinf
        L[o : o + n, col : col + mdl.L.shape[1]] = mdl.L
        H[0, o : o + n] = mdl.H[0]
        qc2.extend(np.atleast_1d(mdl.qc2).tolist())
        for b in mdl.blocks:
            blocks.append(Block(o + b.offset, b.size, i))
        o += n
        col += mdl.L.shape[1]
    return Lssm(A=A, L=L, H=H, qc2=np.array(qc2), Pinf=Pinf, blocks=tuple(blocks))


def convert(spec: KernelSpec, order: int | None = None) -> Lssm:
    """Kernel -> state-space model with the default orders (RBF 6, Matern nu+1/2, Periodic J=8).

    For the periodic family ``order`` is the number of oscillator blocks J.
    """
    if spec.family is Family.PERIODIC:
        return periodic_realize(spec, DEFAULT_PERIODIC_BLOCKS if order is None else order)
    if spec.family is Family.RBF and order is None:
        order = DEFAULT_RBF_ORDER
    poly = taylor_inverse_spectrum(spec, order)
    _check_dim(poly.m)
    return companion_realize(factor_spectrum(poly), spec)


def convert_miso(specs: Sequence[KernelSpec], order: int | None = None) -> Lssm:
    return stack_miso([convert(s, order) for s in specs])


# ---------------------------------------------------------------------------
# discretization


def discretize(model: Lssm, delta) -> DiscreteStep:
    """Transition over a step delta (scalar, or one value per block).

    Phi = expm(A delta) per block, Qd = Pinf - Phi Pinf Phi^T.
    """
    d = np.atleast_1d(np.asarray(delta, dtype=float))
    if d.size == 1:
        d = np.full(len(model.blocks), d[0])
    if d.size != len(model.blocks):
        raise ValueError(f"expected {len(model.blocks)} step sizes, got {d.size}")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("discretization step must be finite and >= 0")
    s = model.state_dim
    Phi = np.zeros((s, s))
    for i, sl in enumerate(model.block_slices()):
        Phi[sl, sl] = _accel.expm_batch(model.A[sl, sl][None] * d[i])[0]
    Qd = model.Pinf - Phi @ model.Pinf @ Phi.T
    Qd = 0.5 * (Qd + Qd.T)
    return DiscreteStep(Phi=Phi, Qd=Qd, delta=float(d[0]) if len(model.blocks) == 1 else d)


class StepCache:
    """Per-model memo of (Phi, Qd) keyed by step size quantised to ``quantum``.

    Thread-safe; one cache is tied to one model's block structure.
    """

    def __init__(self, quantum: float = 1e-12):
        self.quantum = quantum
        self._lock = threading.Lock()
        self._store: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._store)

    def lookup(self, model: Lssm, b: int, deltas: np.ndarray):
        keys = np.rint(deltas / self.quantum).astype(np.int64)
        uniq, inverse = np.unique(keys, return_inverse=True)
        n = model.blocks[b].size
        Phi_u = np.empty((uniq.size, n, n))
        Qd_u = np.empty((uniq.size, n, n))
        with self._lock:
            missing = []
            for i, key in enumerate(uniq.tolist()):
                hit = self._store.get((b, key))
                if hit is None:
                    missing.append(i)
                else:
                    Phi_u[i], Qd_u[i] = hit
            self.hits += uniq.size - len(missing)
            self.misses += len(missing)
        if missing:
            idx = np.array(missing)
            P, Q = _discretize_block(model, b, uniq[idx] * self.quantum)
            Phi_u[idx], Qd_u[idx] = P, Q
            with self._lock:
                for j, i in enumerate(missing):
                    self._store[(b, int(uniq[i]))] = (P[j], Q[j])
        return Phi_u[inverse], Qd_u[inverse]


def _discretize_block(model: Lssm, b: int, deltas: np.ndarray):
    blk = model.blocks[b]
    sl = slice(blk.offset, blk.offset + blk.size)
    Ab = model.A[sl, sl]
    Pb = model.Pinf[sl, sl]
    Phi = _accel.expm_batch(Ab[None, :, :] * deltas[:, None, None])
    Qd = Pb[None] - Phi @ Pb[None] @ np.swapaxes(Phi, 1, 2)
    Qd = 0.5 * (Qd + np.swapaxes(Qd, 1, 2))
    return Phi, Qd


def discretize_sequence(model: Lssm, deltas: np.ndarray, cache: StepCache | None = None):
    """Packed per-step, per-block transitions for a sweep.

    ``deltas`` has shape (N, B). Returns ``Phi_b, Qd_b`` of shape
    (N, B, smax, smax), zero-padded for blocks smaller than smax.
    """
    deltas = np.asarray(deltas, dtype=float)
    N, B = deltas.shape
    smax = max(b.size for b in model.blocks)
    Phi_b = np.zeros((N, B, smax, smax))
    Qd_b = np.zeros((N, B, smax, smax))
    for b, blk in enumerate(model.blocks):
        d = deltas[:, b]
        if cache is not None:
            P, Q = cache.lookup(model, b, d)
        else:
            uniq, inverse = np.unique(d, return_inverse=True)
            P, Q = _discretize_block(model, b, uniq)
            P, Q = P[inverse], Q[inverse]
        Phi_b[:, b, : blk.size, : blk.size] = P
        Qd_b[:, b, : blk.size, : blk.size] = Q
    return Phi_b, Qd_b


# ---------------------------------------------------------------------------
# model files


def model_to_json_obj(model: Lssm, noise: float = 0.0, defaults: dict | None = None) -> dict:
    qc2 = model.qc2.tolist()
    obj = {
        "version": MODEL_FORMAT_VERSION,
        "A": model.A.tolist(),
        "L": model.L.tolist(),
        "H": model.H[0].tolist(),
        "qc2": qc2[0] if len(qc2) == 1 else qc2,
        "Pinf": model.Pinf.tolist(),
        "blocks": [{"offset": b.offset, "size": b.size, "input": b.input_index} for b in model.blocks],
        "noise": float(noise),
    }
    if defaults:
        obj["defaults"] = defaults
    return obj


def model_from_json_obj(obj: dict) -> tuple[Lssm, float]:
    if obj.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model file version {obj.get('version')!r}")
    A = np.array(obj["A"], dtype=float)
    s = A.shape[0]
    L = np.array(obj["L"], dtype=float).reshape(s, -1)
    H = np.array(obj["H"], dtype=float).reshape(1, s)
    qc2 = np.atleast_1d(np.array(obj["qc2"], dtype=float))
    Pinf = np.array(obj["Pinf"], dtype=float)
    blocks = tuple(Block(int(b["offset"]), int(b["size"]), int(b["input"])) for b in obj["blocks"])
    if sum(b.size for b in blocks) != s:
        raise ValueError("block sizes do not cover the state dimension")
    return Lssm(A=A, L=L, H=H, qc2=qc2, Pinf=Pinf, blocks=blocks), float(obj.get("noise", 0.0))


def save_model(path, model: Lssm, noise: float = 0.0, defaults: dict | None = None):
    with open(path, "w") as fh:
        json.dump(model_to_json_obj(model, noise, defaults), fh, indent=1)


def load_model(path) -> tuple[Lssm, float]:
    with open(path) as fh:
        return model_from_json_obj(json.load(fh))


def warn_if_inexact(model: Lssm):
    if "warning" in model.meta:
        warnings.warn(model.meta["warning"], RuntimeWarning, stacklevel=2)
