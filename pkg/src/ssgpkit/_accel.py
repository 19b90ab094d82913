"""Hot numeric kernels: batched matrix exponential, Kalman filter, RTS smoother.

Each kernel has two implementations with identical semantics:

* a numba ``@njit`` version (explicit loops, compiled, cached on disk);
* a pure-numpy version (batched/vectorised where the algorithm allows).

The numba path is used when numba imports and ``SSGPKIT_DISABLE_NUMBA`` is not
set to a truthy value. ``BACKEND`` records the choice; both implementations
stay importable (``*_numba`` / ``*_numpy``) for benchmarking and cross-checks.

Block layout used by the filter/smoother: a state of dimension s is split into
B diagonal blocks; ``offs[b]`` and ``sizes[b]`` locate block b, and per-step
transition data is packed as ``Phi_b[k, b, :sizes[b], :sizes[b]]``.
"""
from __future__ import annotations

import math
import os

import numpy as np

_FLAG = os.environ.get("SSGPKIT_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG in ("1", "true", "yes", "on")

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

BACKEND = "numba" if (HAS_NUMBA and not _DISABLED) else "numpy"

# status codes returned by the filter/smoother kernels
OK = 0
DIVERGED = 1
CONFLICT = 2

_PADE13 = np.array(
    [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ]
)
_THETA13 = 5.371920351148152


# ---------------------------------------------------------------------------
# numpy implementations


def expm_batch_numpy(A: np.ndarray) -> np.ndarray:
    """exp of each matrix in a (N, s, s) stack, Pade-13 with scaling and squaring."""
    A = np.asarray(A, dtype=float)
    N, s, _ = A.shape
    if N == 0:
        return A.copy()
    norms = np.abs(A).sum(axis=1).max(axis=1)
    with np.errstate(divide="ignore"):
        sq = np.ceil(np.log2(norms / _THETA13))
    sq = np.where(np.isfinite(sq) & (sq > 0), sq, 0).astype(int)
    As = A / (2.0 ** sq)[:, None, None]
    b = _PADE13
    ident = np.broadcast_to(np.eye(s), A.shape)
    A2 = As @ As
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = As @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2) + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
    V = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident
    X = np.linalg.solve(V - U, V + U)
    for r in range(int(sq.max(initial=0))):
        sel = sq > r
        X[sel] = X[sel] @ X[sel]
    return X


def _assemble(blocks: np.ndarray, offs, sizes, s: int) -> np.ndarray:
    out = np.zeros((s, s))
    for b in range(len(offs)):
        o, n = offs[b], sizes[b]
        out[o : o + n, o : o + n] = blocks[b, :n, :n]
    return out


def kalman_filter_numpy(Phi_b, Qd_b, offs, sizes, H, y, obs, R, m0, P0, store):
    N = y.shape[0]
    s = H.shape[0]
    m = m0.copy()
    P = P0.copy()
    scale = float(H @ P0 @ H)
    ms = np.zeros((N, s)) if store else np.zeros((1, s))
    Ps = np.zeros((N, s, s)) if store else np.zeros((1, s, s))
    pred_mean = np.zeros(N)
    pred_var = np.zeros(N)
    filt_mean = np.zeros(N)
    filt_var = np.zeros(N)
    loglik = 0.0
    eye = np.eye(s)
    for k in range(N):
        Phi = _assemble(Phi_b[k], offs, sizes, s)
        Qd = _assemble(Qd_b[k], offs, sizes, s)
        m = Phi @ m
        P = Phi @ P @ Phi.T + Qd
        P = 0.5 * (P + P.T)
        PH = P @ H
        hm = float(H @ m)
        hph = float(H @ PH)
        pred_mean[k] = hm
        pred_var[k] = hph
        if obs[k]:
            S = hph + R
            v = y[k] - hm
            if not np.isfinite(S) or not np.isfinite(v):
                return ms, Ps, pred_mean, pred_var, filt_mean, filt_var, loglik, DIVERGED, k
            if S <= 1e-12 * scale:
                if abs(v) > 1e-6 * math.sqrt(scale):
                    return ms, Ps, pred_mean, pred_var, filt_mean, filt_var, loglik, CONFLICT, k
            else:
                K = PH / S
                m = m + K * v
                IKH = eye - np.outer(K, H)
                P = IKH @ P @ IKH.T + R * np.outer(K, K)
                P = 0.5 * (P + P.T)
                loglik -= 0.5 * (math.log(2.0 * math.pi * S) + v * v / S)
        filt_mean[k] = float(H @ m)
        filt_var[k] = float(H @ P @ H)
        if store:
            ms[k] = m
            Ps[k] = P
    return ms, Ps, pred_mean, pred_var, filt_mean, filt_var, loglik, OK, -1


def rts_smoother_numpy(Phi_b, Qd_b, offs, sizes, H, ms, Ps):
    N, s = ms.shape
    m_s = np.zeros((N, s))
    mean = np.zeros(N)
    var = np.zeros(N)
    m_s[N - 1] = ms[N - 1]
    Psm = Ps[N - 1].copy()
    mean[N - 1] = H @ ms[N - 1]
    var[N - 1] = H @ Psm @ H
    for k in range(N - 2, -1, -1):
        Phi = _assemble(Phi_b[k + 1], offs, sizes, s)
        Qd = _assemble(Qd_b[k + 1], offs, sizes, s)
        Pk = Ps[k]
        Pp = Phi @ Pk @ Phi.T + Qd
        Pp = 0.5 * (Pp + Pp.T)
        C = Phi @ Pk
        try:
            G = np.linalg.solve(Pp, C).T
        except np.linalg.LinAlgError:
            G = np.linalg.lstsq(Pp, C, rcond=None)[0].T
        m_s[k] = ms[k] + G @ (m_s[k + 1] - Phi @ ms[k])
        Psm = Pk + G @ (Psm - Pp) @ G.T
        Psm = 0.5 * (Psm + Psm.T)
        mean[k] = H @ m_s[k]
        var[k] = H @ Psm @ H
    return m_s, mean, var


# ---------------------------------------------------------------------------
# numba implementations

if HAS_NUMBA:
    _njit = numba.njit(cache=True, fastmath=False)

    @_njit
    def _expm_one(A, b):
        s = A.shape[0]
        norm = 0.0
        for j in range(s):
            col = 0.0
            for i in range(s):
                col += abs(A[i, j])
            if col > norm:
                norm = col
        sq = 0
        if norm > _THETA13:
            sq = int(math.ceil(math.log2(norm / _THETA13)))
        As = A / (2.0**sq)
        ident = np.eye(s)
        A2 = As @ As
        A4 = A2 @ A2
        A6 = A4 @ A2
        U = As @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2) + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
        V = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident
        X = np.ascontiguousarray(np.linalg.solve(V - U, V + U))
        for _ in range(sq):
            X = X @ X
        return X

    @_njit
    def expm_batch_numba(A):
        N = A.shape[0]
        out = np.empty_like(A)
        b = _PADE13
        Ak = np.empty(A.shape[1:])
        for k in range(N):
            Ak[:, :] = A[k]
            out[k] = _expm_one(Ak, b)
        return out

    @_njit
    def _assemble_nb(blocks, offs, sizes, out):
        out[:, :] = 0.0
        for b in range(offs.shape[0]):
            o = offs[b]
            n = sizes[b]
            for i in range(n):
                for j in range(n):
                    out[o + i, o + j] = blocks[b, i, j]

    @_njit
    def kalman_filter_numba(Phi_b, Qd_b, offs, sizes, H, y, obs, R, m0, P0, store):
        N = y.shape[0]
        s = H.shape[0]
        m = m0.copy()
        P = P0.copy()
        scale = H @ (P0 @ H)
        if store:
            ms = np.zeros((N, s))
            Ps = np.zeros((N, s, s))
        else:
            ms = np.zeros((1, s))
            Ps = np.zeros((1, s, s))
        pred_mean = np.zeros(N)
        pred_var = np.zeros(N)
        filt_mean = np.zeros(N)
        filt_var = np.zeros(N)
        loglik = 0.0
        eye = np.eye(s)
        Phi = np.zeros((s, s))
        Qd = np.zeros((s, s))
        for k in range(N):
            _assemble_nb(Phi_b[k], offs, sizes, Phi)
            _assemble_nb(Qd_b[k], offs, sizes, Qd)
            m = Phi @ m
            P = Phi @ P @ Phi.T + Qd
            P = 0.5 * (P + P.T)
            PH = P @ H
            hm = H @ m
            hph = H @ PH
            pred_mean[k] = hm
            pred_var[k] = hph
            if obs[k]:
                S = hph + R
                v = y[k] - hm
                if not np.isfinite(S) or not np.isfinite(v):
                    return ms, Ps, pred_mean, pred_var, filt_mean, filt_var, loglik, DIVERGED, k
                if S <= 1e-12 * scale:
                    if abs(v) > 1e-6 * math.sqrt(scale):
                        return ms, Ps, pred_mean, pred_var, filt_mean, filt_var, loglik, CONFLICT, k
                else:
                    K = PH / S
                    m = m + K * v
                    IKH = eye - np.outer(K, H)
                    P = IKH @ P @ IKH.T + R * np.outer(K, K)
                    P = 0.5 * (P + P.T)
                    loglik -= 0.5 * (math.log(2.0 * math.pi * S) + v * v / S)
            filt_mean[k] = H @ m
            filt_var[k] = H @ (P @ H)
            if store:
                ms[k] = m
                Ps[k] = P
        return ms, Ps, pred_mean, pred_var, filt_mean, filt_var, loglik, OK, -1

    @_njit
    def rts_smoother_numba(Phi_b, Qd_b, offs, sizes, H, ms, Ps):
        N, s = ms.shape
        m_s = np.zeros((N, s))
        mean = np.zeros(N)
        var = np.zeros(N)
        m_s[N - 1] = ms[N - 1]
        Psm = Ps[N - 1].copy()
        mean[N - 1] = H @ ms[N - 1]
        var[N - 1] = H @ (Psm @ H)
        Phi = np.zeros((s, s))
        Qd = np.zeros((s, s))
        for k in range(N - 2, -1, -1):
            _assemble_nb(Phi_b[k + 1], offs, sizes, Phi)
            _assemble_nb(Qd_b[k + 1], offs, sizes, Qd)
            Pk = np.ascontiguousarray(Ps[k])
            Pp = Phi @ Pk @ Phi.T + Qd
            Pp = 0.5 * (Pp + Pp.T)
            C = Phi @ Pk
            try:
                G = np.linalg.solve(Pp, C).T.copy()
            except Exception:
                G = np.linalg.lstsq(Pp, C)[0].T.copy()
            m_s[k] = ms[k] + G @ (m_s[k + 1] - Phi @ ms[k])
            Psm = Pk + G @ (Psm - Pp) @ G.T
            Psm = 0.5 * (Psm + Psm.T)
            mean[k] = H @ m_s[k]
            var[k] = H @ (Psm @ H)
        return m_s, mean, var


# ---------------------------------------------------------------------------
# dispatch

if BACKEND == "numba":
    _expm = expm_batch_numba
    _filter = kalman_filter_numba
    _smoother = rts_smoother_numba
else:
    _expm = expm_batch_numpy
    _filter = kalman_filter_numpy
    _smoother = rts_smoother_numpy


def expm_batch(A: np.ndarray) -> np.ndarray:
    return _expm(np.ascontiguousarray(A, dtype=float))


def kalman_filter(Phi_b, Qd_b, offs, sizes, H, y, obs, R, m0, P0, store=True):
    return _filter(
        np.ascontiguousarray(Phi_b),
        np.ascontiguousarray(Qd_b),
        np.ascontiguousarray(offs, dtype=np.int64),
        np.ascontiguousarray(sizes, dtype=np.int64),
        np.ascontiguousarray(H, dtype=float),
        np.ascontiguousarray(y, dtype=float),
        np.ascontiguousarray(obs, dtype=np.bool_),
        float(R),
        np.ascontiguousarray(m0, dtype=float),
        np.ascontiguousarray(P0, dtype=float),
        bool(store),
    )


def rts_smoother(Phi_b, Qd_b, offs, sizes, H, ms, Ps):
    return _smoother(
        np.ascontiguousarray(Phi_b),
        np.ascontiguousarray(Qd_b),
        np.ascontiguousarray(offs, dtype=np.int64),
        np.ascontiguousarray(sizes, dtype=np.int64),
        np.ascontiguousarray(H, dtype=float),
        np.ascontiguousarray(ms),
        np.ascontiguousarray(Ps),
    )
