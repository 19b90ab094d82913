"""Reference O(n^3) Gaussian-process regression (Cholesky based)."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .kernels import NoiseSpec, cross_covariance, gram_matrix, prior_variance

log = logging.getLogger(__name__)

JITTERS = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8)


class FactorizationError(np.linalg.LinAlgError):
    pass


@dataclass
class ExactPosterior:
    mean: np.ndarray
    var: np.ndarray
    loglik: float
    chol: tuple
    jitter: float = 0.0


def _factor(K: np.ndarray, scale: float):
    for rel in JITTERS:
        try:
            Kj = K if rel == 0 else K + rel * scale * np.eye(K.shape[0])
            c = cho_factor(Kj, lower=True, check_finite=False)
            if not np.all(np.isfinite(c[0])):
                raise np.linalg.LinAlgError("non-finite factor")
            if rel:
                log.info("gram matrix needed jitter %.1e relative", rel)
            return c, rel
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError("covariance matrix not positive definite even with 1e-8 relative jitter")


def _loglik_from_factor(c, y) -> float:
    Lc = c[0]
    alpha = cho_solve(c, y, check_finite=False)
    n = y.size
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(Lc))) - 0.5 * n * math.log(2.0 * math.pi))


def exact_loglik(spec, noise: NoiseSpec, X, y) -> float:
    """log N(y | 0, K + sigma_noise2 I)."""
    y = np.asarray(y, dtype=float)
    K = gram_matrix(spec, X, noise)
    c, _ = _factor(K, prior_variance(spec))
    return _loglik_from_factor(c, y)


def exact_posterior(spec, noise: NoiseSpec, X, y, queries) -> ExactPosterior:
    y = np.asarray(y, dtype=float)
    K = gram_matrix(spec, X, noise)
    c, jitter = _factor(K, prior_variance(spec))
    Ks = cross_covariance(spec, X, queries)
    alpha = cho_solve(c, y, check_finite=False)
    mean = Ks.T @ alpha
    V = solve_triangular(c[0], Ks, lower=True, check_finite=False)
    var = prior_variance(spec) - np.einsum("ij,ij->j", V, V)
    return ExactPosterior(mean=mean, var=var, loglik=_loglik_from_factor(c, y), chol=c, jitter=jitter)
