import math

import numpy as np
import pytest
from scipy import linalg, special

from ssgpkit import _accel
from ssgpkit.kernels import KernelSpec, eval_kernel
from ssgpkit.ssm import (
    MAX_STATE_DIM,
    Lssm,
    StateDimensionError,
    StepCache,
    convert,
    convert_miso,
    discretize,
    discretize_sequence,
    load_model,
    model_from_json_obj,
    model_to_json_obj,
    periodic_realize,
    save_model,
    solve_stationary_covariance,
    stack_miso,
)


def _cov_track(model, spec, deltas):
    out = []
    for d in deltas:
        step = discretize(model, d)
        out.append(float(model.H[0] @ step.Phi @ model.Pinf @ model.H[0]))
    return np.array(out)


def test_expm_matches_scipy(rng):
    for s in (1, 2, 3, 6, 12):
        A = rng.standard_normal((8, s, s)) * rng.uniform(0.01, 20, size=(8, 1, 1))
        got = _accel.expm_batch(A)
        for a, g in zip(A, got):
            ref = linalg.expm(a)
            np.testing.assert_allclose(g, ref, rtol=1e-9, atol=1e-12 * max(1.0, np.abs(ref).max()))


def test_lyapunov_matches_scipy(rng):
    for _ in range(10):
        s = int(rng.integers(1, 7))
        M = rng.standard_normal((s, s))
        A = M - (np.max(np.linalg.eigvals(M).real) + rng.uniform(0.1, 2)) * np.eye(s)
        L = rng.standard_normal((s, 1))
        P = solve_stationary_covariance(A, L, [1.7])
        ref = linalg.solve_continuous_lyapunov(A, -1.7 * L @ L.T)
        np.testing.assert_allclose(P, ref, rtol=1e-8, atol=1e-12)


def test_lyapunov_rejects_unstable():
    with pytest.raises(ValueError, match="Hurwitz"):
        solve_stationary_covariance(np.array([[0.1]]), np.array([[1.0]]), [1.0])


def test_ou_closed_form():
    # Matern 1/2: dx = -lam x dt + dW, Phi = exp(-lam d), Qd = sigma2 (1 - exp(-2 lam d))
    spec = KernelSpec("matern", z=0.8, sigma2=1.9, nu=0.5)
    model = convert(spec)
    lam = 1 / 0.8
    assert model.state_dim == 1
    assert model.A[0, 0] == pytest.approx(-lam)
    assert model.qc2[0] == pytest.approx(2 * lam * 1.9)
    for d in (0.0, 0.1, 1.0, 5.0):
        st = discretize(model, d)
        assert st.Phi[0, 0] == pytest.approx(math.exp(-lam * d), rel=1e-13)
        assert st.Qd[0, 0] == pytest.approx(1.9 * (1 - math.exp(-2 * lam * d)), abs=1e-13)


@pytest.mark.parametrize("nu,dim", [(0.5, 1), (1.5, 2), (2.5, 3), (3.5, 4)])
def test_matern_dimension_and_exact_covariance(nu, dim):
    spec = KernelSpec("matern", z=1.3, sigma2=0.7, nu=nu)
    model = convert(spec)
    assert model.state_dim == dim
    d = np.linspace(0, 6, 31)
    np.testing.assert_allclose(_cov_track(model, spec, d), eval_kernel(spec, d), atol=1e-10)


def test_rbf_defaults_and_tracking():
    spec = KernelSpec("rbf", z=1.7, sigma2=2.2)
    model = convert(spec)
    assert model.state_dim == 6
    assert model.prior_variance == pytest.approx(2.2, rel=1e-10)
    d = np.linspace(0, 3 / 1.7, 40)
    err = np.abs(_cov_track(model, spec, d) - eval_kernel(spec, d)).max() / 2.2
    assert err <= 0.02


def test_user_qc_is_used_as_is():
    spec = KernelSpec("matern", z=1.0, nu=0.5, qc=2.0)
    model = convert(spec)
    assert model.qc2[0] == 4.0
    assert model.prior_variance == pytest.approx(4.0 / (2 * 1.0))


def test_lyapunov_residual_small():
    for spec in (KernelSpec("rbf", z=0.5), KernelSpec("matern", z=2.0, nu=2.5)):
        m = convert(spec)
        assert m.lyapunov_residual() <= 1e-9 * max(1.0, np.abs(m.Pinf).max())
        assert m.stability_margin() < 0


def test_semigroup():
    model = convert(KernelSpec("rbf", z=1.0))
    a, b = 0.37, 1.21
    Pa, Pb, Pab = (discretize(model, x).Phi for x in (a, b, a + b))
    np.testing.assert_allclose(Pa @ Pb, Pab, atol=1e-10)
    np.testing.assert_allclose(discretize(model, 0.0).Phi, np.eye(6), atol=1e-15)
    np.testing.assert_allclose(discretize(model, 0.0).Qd, 0.0, atol=1e-12)


def test_discretize_rejects_negative_step():
    model = convert(KernelSpec("matern", z=1.0, nu=1.5))
    with pytest.raises(ValueError):
        discretize(model, -0.1)


def test_large_step_reaches_prior():
    model = convert(KernelSpec("matern", z=1.0, nu=1.5))
    st = discretize(model, 200.0)
    np.testing.assert_allclose(st.Phi, 0.0, atol=1e-12)
    np.testing.assert_allclose(st.Qd, model.Pinf, atol=1e-12)


def test_periodic_bank_matches_bessel_and_is_exact():
    spec = KernelSpec("periodic", z=1.0, sigma2=1.3, omega0=2.5)
    model = periodic_realize(spec, 8)
    assert model.state_dim == 17
    j = np.arange(9)
    ref = 1.3 * np.where(j == 0, 1.0, 2.0) * special.ive(j, 1.0)
    np.testing.assert_allclose(model.meta["weights"], ref, atol=1e-10)
    assert model.meta["reconstruction_error"] <= 1e-3 * 1.3
    assert "warning" not in model.meta
    d = np.linspace(0, 3, 25)
    np.testing.assert_allclose(_cov_track(model, spec, d), eval_kernel(spec, d), atol=1e-3 * 1.3)
    # rotations are noise free
    np.testing.assert_allclose(discretize(model, 0.7).Qd, 0.0, atol=1e-12)


def test_periodic_warns_when_too_coarse():
    model = periodic_realize(KernelSpec("periodic", z=3.0, omega0=1.0), 2)
    assert "warning" in model.meta


def test_stack_identity_and_structure():
    m1 = convert(KernelSpec("rbf", z=1.0))
    assert stack_miso([m1]) is m1
    m5 = convert_miso([KernelSpec("rbf", z=1.0 + 0.1 * i, sigma2=0.2) for i in range(5)])
    assert m5.state_dim == 30
    assert m5.n_inputs == 5
    assert [b.input_index for b in m5.blocks] == [0, 1, 2, 3, 4]
    assert m5.L.shape == (30, 5)
    assert m5.qc2.shape == (5,)
    assert m5.prior_variance == pytest.approx(1.0)
    assert m5.lyapunov_residual() < 1e-9
    # off-diagonal blocks are zero
    mask = np.ones((30, 30), dtype=bool)
    for sl in m5.block_slices():
        mask[sl, sl] = False
    assert np.all(m5.A[mask] == 0) and np.all(m5.Pinf[mask] == 0)


def test_per_block_steps():
    mdl = convert_miso([KernelSpec("matern", z=1.0, nu=0.5), KernelSpec("matern", z=2.0, nu=0.5)])
    st = discretize(mdl, [0.5, 2.0])
    assert st.Phi[0, 0] == pytest.approx(math.exp(-0.5))
    assert st.Phi[1, 1] == pytest.approx(math.exp(-1.0))
    assert st.Phi[0, 1] == 0.0
    with pytest.raises(ValueError):
        discretize(mdl, [0.1, 0.2, 0.3])


def test_state_dimension_cap():
    with pytest.raises(StateDimensionError):
        convert(KernelSpec("rbf", z=1.0), MAX_STATE_DIM + 1)
    with pytest.raises(StateDimensionError):
        convert_miso([KernelSpec("rbf", z=1.0)] * 11, 6)


def test_sequence_and_cache(rng):
    mdl = convert_miso([KernelSpec("rbf", z=1.0), KernelSpec("matern", z=1.0, nu=1.5)])
    deltas = np.abs(rng.standard_normal((50, 2)))
    deltas[10:20] = deltas[0]
    Phi_b, Qd_b = discretize_sequence(mdl, deltas)
    assert Phi_b.shape == (50, 2, 6, 6)
    ref = discretize(mdl, deltas[7])
    np.testing.assert_allclose(Phi_b[7, 1, :2, :2], ref.Phi[6:, 6:], atol=1e-14)
    np.testing.assert_allclose(Qd_b[7, 0], ref.Qd[:6, :6], atol=1e-14)
    np.testing.assert_array_equal(Phi_b[7, 1, 2:, :], 0.0)
    cache = StepCache()
    P1, Q1 = discretize_sequence(mdl, deltas, cache)
    misses = cache.misses
    P2, Q2 = discretize_sequence(mdl, deltas, cache)
    assert cache.misses == misses and cache.hits > 0
    np.testing.assert_allclose(P1, Phi_b, atol=1e-12)
    np.testing.assert_array_equal(P1, P2)


def test_json_round_trip(tmp_path):
    for mdl in (convert(KernelSpec("rbf", z=0.5)),
                convert_miso([KernelSpec("rbf", z=1.0), KernelSpec("periodic", z=1.0, omega0=2.0)])):
        path = tmp_path / "m.json"
        save_model(path, mdl, 0.01, {"order": 6})
        back, noise = load_model(path)
        assert noise == 0.01
        for f in ("A", "L", "H", "qc2", "Pinf"):
            np.testing.assert_array_equal(getattr(back, f), getattr(mdl, f))
        assert back.blocks == mdl.blocks


def test_json_scalar_qc2_and_version():
    obj = model_to_json_obj(convert(KernelSpec("matern", z=1.0, nu=0.5)))
    assert isinstance(obj["qc2"], float)
    obj["version"] = 99
    with pytest.raises(ValueError, match="version"):
        model_from_json_obj(obj)


def test_lssm_is_frozen():
    mdl = convert(KernelSpec("matern", z=1.0, nu=0.5))
    with pytest.raises(Exception):
        mdl.A = np.eye(1)
    assert isinstance(mdl, Lssm)
