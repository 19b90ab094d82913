import math

import numpy as np
import pytest

from ssgpkit.exact import FactorizationError, _factor, exact_loglik, exact_posterior
from ssgpkit.kernels import KernelSpec, NoiseSpec, gram_matrix

OU = KernelSpec("matern", z=1.0, sigma2=1.0, nu=0.5)


def test_single_point():
    post = exact_posterior(OU, NoiseSpec(0.1), [0.0], [2.0], [0.0])
    assert post.mean[0] == pytest.approx(2 / 1.1, rel=1e-14)
    assert post.var[0] == pytest.approx(1 - 1 / 1.1, rel=1e-12)
    ref = -0.5 * math.log(1.1) - 0.5 * 4 / 1.1 - 0.5 * math.log(2 * math.pi)
    assert post.loglik == pytest.approx(ref, rel=1e-14)
    assert exact_loglik(OU, NoiseSpec(0.1), [0.0], [2.0]) == pytest.approx(ref, rel=1e-14)


def test_zero_targets():
    X = np.array([0.0, 0.5, 2.0])
    K = gram_matrix(OU, X, NoiseSpec(0.1))
    ref = -0.5 * np.linalg.slogdet(K)[1] - 1.5 * math.log(2 * math.pi)
    assert exact_loglik(OU, NoiseSpec(0.1), X, np.zeros(3)) == pytest.approx(ref, rel=1e-13)


def test_loglik_against_dense_formula(rng):
    for n in range(1, 9):
        X = rng.uniform(0, 5, n)
        y = rng.standard_normal(n)
        spec = KernelSpec("rbf", z=float(rng.uniform(0.5, 2)), sigma2=float(rng.uniform(0.5, 2)))
        K = gram_matrix(spec, X, NoiseSpec(0.2))
        ref = -0.5 * math.log(np.linalg.det(K)) - 0.5 * y @ np.linalg.solve(K, y) - 0.5 * n * math.log(2 * math.pi)
        assert exact_loglik(spec, NoiseSpec(0.2), X, y) == pytest.approx(ref, rel=1e-10)


def test_far_query_reverts_to_prior():
    post = exact_posterior(OU, NoiseSpec(0.1), [0.0, 1.0], [1.0, -1.0], [500.0])
    assert abs(post.mean[0]) < 1e-12
    assert post.var[0] == pytest.approx(1.0, abs=1e-12)


def test_symmetric_pair_midpoint():
    spec = KernelSpec("rbf", z=1.0)
    post = exact_posterior(spec, NoiseSpec(0.1), [-1.0, 1.0], [0.7, 0.7], [0.0])
    k = spec.sigma2 * math.exp(-0.25 * 1.0)
    K = gram_matrix(spec, [-1.0, 1.0], NoiseSpec(0.1))
    shrink = np.array([k, k]) @ np.linalg.solve(K, [0.7, 0.7])
    assert post.mean[0] == pytest.approx(shrink, rel=1e-12)


def test_interpolation_as_noise_vanishes():
    X = np.array([0.0, 0.7, 1.9])
    y = np.array([0.3, -0.2, 1.1])
    post = exact_posterior(KernelSpec("matern", z=1.0, nu=1.5), NoiseSpec(1e-12), X, y, X)
    np.testing.assert_allclose(post.mean, y, atol=1e-6)
    np.testing.assert_allclose(post.var, 0.0, atol=1e-6)


def test_variance_bounded_by_prior(rng):
    spec = KernelSpec("rbf", z=1.5, sigma2=2.0)
    X = rng.uniform(0, 10, 30)
    post = exact_posterior(spec, NoiseSpec(0.05), X, rng.standard_normal(30), np.linspace(-2, 12, 100))
    assert np.all(post.var <= 2.0 + 1e-10)
    assert np.all(post.var >= -1e-10)


def test_adding_point_never_increases_variance(rng):
    for _ in range(20):
        n = int(rng.integers(1, 30))
        spec = KernelSpec("matern", z=float(rng.uniform(0.3, 3)), nu=1.5, sigma2=float(rng.uniform(0.3, 3)))
        X = rng.uniform(0, 10, n + 1)
        y = rng.standard_normal(n + 1)
        q = rng.uniform(-1, 11, 15)
        v_small = exact_posterior(spec, NoiseSpec(0.1), X[:n], y[:n], q).var
        v_big = exact_posterior(spec, NoiseSpec(0.1), X, y, q).var
        assert np.all(v_big <= v_small + 1e-10)


def test_duplicate_inputs_need_jitter():
    spec = KernelSpec("rbf", z=1.0)
    post = exact_posterior(spec, NoiseSpec(0.0), [1.0, 1.0, 1.0], [0.5, 0.5, 0.5], [1.0])
    assert post.jitter > 0
    assert post.mean[0] == pytest.approx(0.5, abs=1e-4)


def test_factorization_failure():
    # an indefinite matrix cannot be rescued by jitter up to 1e-8
    with pytest.raises(FactorizationError):
        _factor(np.array([[1.0, 2.0], [2.0, 1.0]]), 1.0)
