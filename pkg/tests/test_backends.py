import json
import os
import subprocess
import sys

import numpy as np
import pytest

from ssgpkit import _accel
from ssgpkit.kalman import _layout, build_model
from ssgpkit.kernels import KernelSpec
from ssgpkit.ssm import discretize_sequence

needs_numba = pytest.mark.skipif(not _accel.HAS_NUMBA, reason="numba not installed")


def _problem(rng, specs, n=120):
    model = build_model(specs)
    offs, sizes, _ = _layout(model)
    deltas = np.abs(rng.standard_normal((n, len(offs)))) * 0.3
    deltas[0] = 0.0
    Phi_b, Qd_b = discretize_sequence(model, deltas)
    y = rng.standard_normal(n)
    obs = rng.uniform(size=n) > 0.2
    return model, offs, sizes, Phi_b, Qd_b, y, obs


@needs_numba
def test_expm_backends_agree(rng):
    for s in (1, 3, 6, 17):
        A = rng.standard_normal((10, s, s)) * 3
        np.testing.assert_allclose(_accel.expm_batch_numba(A), _accel.expm_batch_numpy(A), rtol=1e-11, atol=1e-11)


@needs_numba
@pytest.mark.parametrize("specs", [
    KernelSpec("rbf", z=1.0),
    KernelSpec("matern", z=0.5, nu=0.5),
    [KernelSpec("rbf", z=1.0, sigma2=0.5), KernelSpec("matern", z=2.0, nu=1.5), KernelSpec("periodic", z=1.0, omega0=2.0)],
])
def test_filter_and_smoother_backends_agree(rng, specs):
    model, offs, sizes, Phi_b, Qd_b, y, obs = _problem(rng, specs)
    args = (Phi_b, Qd_b, offs, sizes, model.H[0].copy(), y, obs, 0.05, np.zeros(model.state_dim), model.Pinf.copy(), True)
    a = _accel.kalman_filter_numpy(*args)
    b = _accel.kalman_filter_numba(*args)
    for x, z in zip(a[:6], b[:6]):
        np.testing.assert_allclose(x, z, rtol=1e-9, atol=1e-10)
    assert a[6] == pytest.approx(b[6], rel=1e-11)
    assert a[7] == b[7] == _accel.OK
    sa = _accel.rts_smoother_numpy(Phi_b, Qd_b, offs, sizes, model.H[0].copy(), a[0], a[1])
    sb = _accel.rts_smoother_numba(Phi_b, Qd_b, offs, sizes, model.H[0].copy(), b[0], b[1])
    for x, z in zip(sa, sb):
        np.testing.assert_allclose(x, z, rtol=1e-8, atol=1e-9)


@needs_numba
def test_conflict_status_agrees():
    model = build_model(KernelSpec("matern", z=1.0, nu=0.5))
    offs, sizes, _ = _layout(model)
    Phi_b, Qd_b = discretize_sequence(model, np.zeros((2, 1)))
    args = (Phi_b, Qd_b, offs, sizes, model.H[0].copy(), np.array([0.0, 1.0]), np.array([True, True]), 0.0,
            np.zeros(1), model.Pinf.copy(), False)
    assert _accel.kalman_filter_numpy(*args)[7] == _accel.CONFLICT
    assert _accel.kalman_filter_numba(*args)[7] == _accel.CONFLICT


_SCRIPT = """
import json, numpy as np
from ssgpkit import _accel
from ssgpkit.kalman import RegressionDataset, build_model, predict_at
from ssgpkit.kernels import KernelSpec, NoiseSpec
x = np.linspace(0, 5, 40); y = np.sin(x)
p = predict_at(build_model(KernelSpec('rbf', z=1.0)), RegressionDataset(x, y), NoiseSpec(0.01), [1.3, 2.7])
print(json.dumps({"backend": _accel.BACKEND, "mean": p.mean.tolist(), "var": p.var.tolist(), "ll": p.loglik}))
"""


def _run(flag):
    env = dict(os.environ)
    env.pop("SSGPKIT_DISABLE_NUMBA", None)
    if flag is not None:
        env["SSGPKIT_DISABLE_NUMBA"] = flag
    out = subprocess.run([sys.executable, "-c", _SCRIPT], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def test_env_flag_selects_numpy_and_matches():
    off = _run("1")
    assert off["backend"] == "numpy"
    default = _run(None)
    assert default["backend"] == ("numba" if _accel.HAS_NUMBA else "numpy")
    np.testing.assert_allclose(off["mean"], default["mean"], atol=1e-10)
    np.testing.assert_allclose(off["var"], default["var"], atol=1e-10)
    assert off["ll"] == pytest.approx(default["ll"], rel=1e-10)
