import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from ssgpkit import quad
from ssgpkit.quad import (
    Disturbance,
    FlightSample,
    Vehicle,
    axis_dataset,
    axis_inputs,
    body_force_targets,
    closure_experiment,
    collective_thrust,
    compute_residuals,
    corrected_accel,
    forces_to_world_accel,
    nominal_accel,
    read_flight_csv,
    residual_rmse,
    synthesize_flight,
    write_flight_csv,
)


def _hover(t=0.0, v=(0.0, 0.0, 0.0), R=None):
    w = np.full(4, np.sqrt(9.81 / 4e-5))
    return FlightSample(t=t, R_wb=np.eye(3) if R is None else R, v_b=np.array(v), omega_motors=w)


def test_thrust_and_hover():
    s = _hover()
    assert collective_thrust(s.omega_motors, 1e-5) == pytest.approx(9.81)
    np.testing.assert_allclose(nominal_accel(s), 0.0, atol=1e-12)


def test_corrected_accel_sign_convention():
    s = _hover()
    f = np.array([0.1, -0.2, 0.0])
    np.testing.assert_allclose(corrected_accel(s, f, gravity_sign=-1.0), f, atol=1e-12)
    np.testing.assert_allclose(corrected_accel(s, f), f + 2 * 9.81 * quad.E3, atol=1e-12)


def test_sample_validation():
    with pytest.raises(ValueError):
        _hover(R=np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        FlightSample(0.0, np.eye(3), np.zeros(3), np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError):
        Vehicle(mass=0.0)


def test_residual_of_constant_drag():
    # hover attitude, a known residual force acting over one step
    dt = 0.01
    R = Rotation.from_euler("xyz", [0.1, -0.2, 0.3]).as_matrix()
    s0 = _hover(0.0, (1.0, 0.0, 0.0), R)
    resid = np.array([0.2, -0.1, 0.05])
    v1_w = R @ s0.v_b + dt * (nominal_accel(s0) + resid)
    s1 = _hover(dt, R.T @ v1_w, R)
    rec = compute_residuals([s0, s1])
    assert len(rec) == 1
    np.testing.assert_allclose(rec[0].delta_a, resid, atol=1e-10)
    np.testing.assert_allclose(body_force_targets(rec)[0], R.T @ resid, atol=1e-10)


def test_timestamp_checks():
    with pytest.raises(ValueError):
        compute_residuals([_hover(1.0), _hover(0.5)])
    with pytest.raises(ValueError):
        compute_residuals([_hover()])
    recs = compute_residuals([_hover(0.0), _hover(0.0), _hover(0.01)])
    assert len(recs) == 1


def test_synthetic_residuals_recover_injected_truth():
    traj = synthesize_flight("lemniscate", disturbance=Disturbance(0.3, 0.1), n=300, dt=0.01)
    recs = compute_residuals(traj)
    got = np.array([r.delta_a for r in recs])
    gt = np.array([r.gt_delta_a for r in recs])
    np.testing.assert_allclose(got, gt, atol=1e-9)
    assert residual_rmse(recs, gt) < 1e-9
    assert residual_rmse(recs) > 0.1


def test_drag_only_targets_are_linear_in_velocity():
    recs = compute_residuals(synthesize_flight("circle", disturbance=Disturbance(0.4, 0.0), n=200, dt=0.02))
    F = body_force_targets(recs)
    V = np.array([r.features_siso for r in recs])
    np.testing.assert_allclose(F, -0.4 * V, atol=1e-9)


def test_motor_mismatch_adds_body_z_force():
    base = synthesize_flight("circle", disturbance=Disturbance(0.0, 0.0), n=50)
    mm = synthesize_flight("circle", disturbance=Disturbance(0.0, 0.0, (0.1, -0.1, 0.1, -0.1)), n=50)
    fb = np.array([s.R_wb.T @ s.gt_delta_a for s in mm])
    assert np.allclose(fb[:, :2], 0.0, atol=1e-12)
    assert np.max(np.abs(fb[:, 2])) > 1e-3
    assert all(np.allclose(b.gt_delta_a, 0.0) for b in base)
    with pytest.raises(ValueError):
        Disturbance(motor_mismatch=(0.1, 0.2))


def test_features_and_axis_datasets():
    recs = compute_residuals(synthesize_flight("parabola", n=100))
    assert axis_inputs(recs, 1, "siso").shape == (99, 1)
    Xm = axis_inputs(recs, 2, "miso")
    assert Xm.shape == (99, 5)
    np.testing.assert_array_equal(Xm[:, 0], [r.features_siso[2] for r in recs])
    np.testing.assert_array_equal(Xm[:, 1:], [r.features_miso[3:] for r in recs])
    assert axis_dataset(recs, 0, "siso").ordering.value == "sort"
    assert axis_dataset(recs, 0, "miso").ordering.value == "given"
    with pytest.raises(ValueError):
        axis_inputs(recs, 0, "mimo")


def test_force_to_world_round_trip():
    recs = compute_residuals(synthesize_flight("circle", disturbance=Disturbance(0.3, 0.1), n=80))
    F = body_force_targets(recs)
    np.testing.assert_allclose(forces_to_world_accel(recs, F), [r.delta_a for r in recs], atol=1e-10)


def test_csv_round_trip(tmp_path):
    traj = synthesize_flight("circle", disturbance=Disturbance(0.3, 0.1), n=40, noise=0.01, seed=3,
                             vehicle=Vehicle(mass=1.3, kf=2e-5))
    path = tmp_path / "flight.csv"
    write_flight_csv(path, traj)
    back = read_flight_csv(path)
    assert len(back) == 40
    for a, b in zip(traj, back):
        np.testing.assert_allclose(b.R_wb, a.R_wb, atol=1e-12)
        np.testing.assert_array_equal(b.v_b, a.v_b)
        np.testing.assert_array_equal(b.omega_motors, a.omega_motors)
        assert b.mass == 1.3 and b.kf == 2e-5
        np.testing.assert_array_equal(b.gt_delta_a, a.gt_delta_a)


def test_csv_errors(tmp_path):
    path = tmp_path / "f.csv"
    write_flight_csv(path, synthesize_flight("circle", n=20))
    quad.sidecar_path(path).unlink()
    with pytest.raises(FileNotFoundError):
        read_flight_csv(path)
    bad = tmp_path / "bad.csv"
    bad.write_text("t,qw\n0,1\n")
    with pytest.raises(ValueError, match="missing columns"):
        read_flight_csv(bad, Vehicle())


def test_synthesizer_is_seeded():
    a = synthesize_flight("circle", n=30, noise=0.01, seed=4)
    b = synthesize_flight("circle", n=30, noise=0.01, seed=4)
    c = synthesize_flight("circle", n=30, noise=0.01, seed=5)
    assert all(np.array_equal(x.v_b, y.v_b) for x, y in zip(a, b))
    assert not all(np.array_equal(x.v_b, y.v_b) for x, y in zip(a, c))
    with pytest.raises(ValueError):
        synthesize_flight("square")


def test_closure_experiment_smoke():
    dist = Disturbance(0.3, 0.1)
    mk = lambda s, k: compute_residuals(synthesize_flight(s, disturbance=dist, n=200, dt=0.02, noise=5e-4, seed=k))
    out = closure_experiment(mk("circle", 1), {"parabola": mk("parabola", 2)}, budget=15)
    row = out["parabola"]
    assert set(row) == {"nominal", "siso", "miso"}
    assert row["siso"] < row["nominal"]
