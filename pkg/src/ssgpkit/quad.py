"""Quadrotor residual dynamics: nominal model, residual targets, synthetic flights.

Internal sign convention: m a = R tau e3 - m g e3 (gravity pulls along -z).
``corrected_accel`` reproduces the augmented model with gravity added as
+g e3 by default, as it is commonly printed; pass ``gravity_sign=-1`` for the
convention consistent with ``nominal_accel``.
"""
from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .kalman import (Mode, Ordering, RegressionDataset, build_model, one_step_ahead, posterior_at_data,
                     train_hyperparameters)
from .kernels import Family, KernelSpec, NoiseSpec

log = logging.getLogger(__name__)

G = 9.81
E3 = np.array([0.0, 0.0, 1.0])
CSV_COLUMNS = ["t", "qw", "qx", "qy", "qz", "vbx", "vby", "vbz", "w0", "w1", "w2", "w3"]
GT_COLUMNS = ["gt_dax", "gt_day", "gt_daz"]


@dataclass(frozen=True)
class Vehicle:
    mass: float = 1.0
    kf: float = 1e-5
    g: float = G

    def __post_init__(self):
        if self.mass <= 0 or self.kf <= 0:
            raise ValueError("mass and kf must be positive")


@dataclass(frozen=True, eq=False)
class FlightSample:
    t: float
    R_wb: np.ndarray
    v_b: np.ndarray
    omega_motors: np.ndarray
    tau: float | None = None
    mass: float = 1.0
    g: float = G
    kf: float = 1e-5
    gt_delta_a: np.ndarray | None = None

    def __post_init__(self):
        R = np.asarray(self.R_wb, dtype=float)
        if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("R_wb must be a proper rotation matrix")
        w = np.asarray(self.omega_motors, dtype=float)
        if w.shape != (4,) or np.any(w < 0):
            raise ValueError("omega_motors must be four nonnegative speeds")
        if self.mass <= 0 or self.kf <= 0:
            raise ValueError("mass and kf must be positive")
        object.__setattr__(self, "R_wb", R)
        object.__setattr__(self, "omega_motors", w)
        object.__setattr__(self, "v_b", np.asarray(self.v_b, dtype=float))
        if self.tau is None:
            object.__setattr__(self, "tau", collective_thrust(w, self.kf))


@dataclass(frozen=True, eq=False)
class ResidualRecord:
    delta_a: np.ndarray
    features_siso: np.ndarray
    features_miso: np.ndarray
    dt: float
    R_wb: np.ndarray
    mass: float
    gt_delta_a: np.ndarray | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")


def collective_thrust(omega_motors, kf: float) -> float:
    w = np.asarray(omega_motors, dtype=float)
    return float(kf * np.sum(w * w))


def nominal_accel(sample: FlightSample) -> np.ndarray:
    return sample.R_wb @ (sample.tau * E3) / sample.mass - sample.g * E3


def corrected_accel(sample: FlightSample, gp_outputs, gravity_sign: float = 1.0) -> np.ndarray:
    """(1/m) R (tau e3 + f_gp) + gravity_sign * g e3; f_gp is a body-frame force."""
    f = np.asarray(gp_outputs, dtype=float)
    return sample.R_wb @ (sample.tau * E3 + f) / sample.mass + gravity_sign * sample.g * E3


def compute_residuals(trajectory: Sequence[FlightSample], min_dt: float = 1e-6) -> list[ResidualRecord]:
    """Residual accelerations between consecutive samples.

    The predicted body velocity comes from one forward-Euler step of the
    nominal model from the previous sample; the record carries the previous
    sample's features, i.e. the state the residual force acted on.
    """
    if len(trajectory) < 2:
        raise ValueError("need at least two samples")
    out = []
    skipped = 0
    for prev, cur in zip(trajectory[:-1], trajectory[1:]):
        dt = cur.t - prev.t
        if dt < 0:
            raise ValueError(f"timestamps not monotone at t={cur.t}")
        if dt < min_dt:
            skipped += 1
            continue
        v_hat_w = prev.R_wb @ prev.v_b + dt * nominal_accel(prev)
        v_hat_b = cur.R_wb.T @ v_hat_w
        delta_a = cur.R_wb @ ((cur.v_b - v_hat_b) / dt)
        out.append(
            ResidualRecord(
                delta_a=delta_a,
                features_siso=prev.v_b.copy(),
                features_miso=np.r_[prev.v_b, prev.omega_motors],
                dt=dt,
                R_wb=prev.R_wb,
                mass=prev.mass,
                gt_delta_a=prev.gt_delta_a,
            )
        )
    if skipped:
        log.info("skipped %d samples with dt < %g s", skipped, min_dt)
    return out


# ---------------------------------------------------------------------------
# regression datasets built from residual records


def body_force_targets(records: Sequence[ResidualRecord]) -> np.ndarray:
    """Body-frame residual force m R^T delta_a, shape (n, 3)."""
    return np.array([r.mass * r.R_wb.T @ r.delta_a for r in records])


def axis_inputs(records: Sequence[ResidualRecord], axis: int, kind: str) -> np.ndarray:
    """SISO: body velocity on the axis. MISO: that velocity plus the four motor speeds."""
    if kind == "siso":
        return np.array([r.features_siso[axis] for r in records])[:, None]
    if kind == "miso":
        return np.array([np.r_[r.features_miso[axis], r.features_miso[3:]] for r in records])
    raise ValueError(f"unknown feature kind {kind!r}")


def axis_dataset(records, axis: int, kind: str, ordering: Ordering | None = None) -> RegressionDataset:
    """Per-axis regression data; SISO sweeps sort by input, MISO keeps time order."""
    return RegressionDataset(axis_inputs(records, axis, kind), body_force_targets(records)[:, axis], ordering)


def forces_to_world_accel(records, forces: np.ndarray) -> np.ndarray:
    """Map per-axis body-frame GP forces (n, 3) to world-frame accelerations."""
    return np.array([r.R_wb @ f / r.mass for r, f in zip(records, forces)])


def residual_rmse(records, predicted_world: np.ndarray | None = None, truth: str = "gt") -> float:
    """RMSE over all components of (residual - prediction); prediction None means nominal (0)."""
    if truth == "gt" and all(r.gt_delta_a is not None for r in records):
        ref = np.array([r.gt_delta_a for r in records])
    else:
        ref = np.array([r.delta_a for r in records])
    err = ref if predicted_world is None else ref - predicted_world
    return float(np.sqrt(np.mean(err**2)))


def initial_axis_spec(records, axis: int, kind: str, template: KernelSpec | None = None):
    """Data-scaled starting hyperparameters for one axis model.

    Length scales start at each input's standard deviation (the RBF z is its
    inverse), signal variance is
    split evenly over inputs, and noise starts at a tenth of the target variance.
    """
    template = template or KernelSpec("rbf", z=1.0)
    ds = axis_dataset(records, axis, kind)
    var = float(max(ds.y.var(), 1e-6))
    d = ds.X.shape[1]
    ell = np.maximum(ds.X.std(axis=0), 1e-3)
    if template.family is Family.RBF:
        ell = 1.0 / ell
    specs = [template.with_params(z=float(ell[j]), sigma2=var / d) for j in range(d)]
    return (specs[0] if d == 1 else specs), NoiseSpec(0.1 * var)


def fit_axis_models(records, kind: str, budget: int = 200, template: KernelSpec | None = None,
                    order: int | None = None) -> list[tuple]:
    """Train one residual model per body axis; returns [(spec, noise), ...] for x, y, z."""
    fitted = []
    for axis in range(3):
        spec, noise = initial_axis_spec(records, axis, kind, template)
        res = train_hyperparameters(spec, noise, axis_dataset(records, axis, kind), order, budget)
        fitted.append((res.spec, res.noise))
    return fitted


def predict_residuals(axis_models, records, kind: str, mode: str = "smooth", order: int | None = None) -> np.ndarray:
    """World-frame residual accelerations predicted from a flight's own measured residuals.

    ``mode`` is "smooth" (all samples), "filter" (samples up to k) or
    "ahead" (samples strictly before k, i.e. a streaming forecast).
    """
    forces = np.zeros((len(records), 3))
    for axis, (spec, noise) in enumerate(axis_models):
        model = build_model(spec, order)
        ds = axis_dataset(records, axis, kind)
        if mode == "ahead":
            forces[:, axis] = one_step_ahead(model, ds, noise).mean
        else:
            forces[:, axis] = posterior_at_data(model, ds, noise, Mode(mode)).mean
    return forces_to_world_accel(records, forces)


def closure_experiment(train_records, test_sets: dict, budget: int = 200, mode: str = "smooth",
                       kinds=("siso", "miso")) -> dict:
    """Hyperparameters from ``train_records``, RMSE on each held-out flight.

    Returns {name: {"nominal": r, "siso": r, "miso": r}} with RMSE against the
    noise-free residual when the logs carry it.
    """
    fitted = {kind: fit_axis_models(train_records, kind, budget) for kind in kinds}
    out = {}
    for name, recs in test_sets.items():
        row = {"nominal": residual_rmse(recs)}
        for kind in kinds:
            row[kind] = residual_rmse(recs, predict_residuals(fitted[kind], recs, kind, mode))
        out[name] = row
    return out


# ---------------------------------------------------------------------------
# synthetic flights


class Shape(str, enum.Enum):
    CIRCLE = "circle"
    PARABOLA = "parabola"
    LEMNISCATE = "lemniscate"


@dataclass(frozen=True)
class TrajectoryParams:
    size: float = 2.0
    speed: float = 2.0
    height: float = 1.5
    vertical: float = 0.4
    yaw_amplitude: float = 0.5


@dataclass(frozen=True)
class Disturbance:
    """Injected disturbances.

    ``thrust_error`` scales every motor's thrust coefficient; ``motor_mismatch``
    adds a per-motor fractional error on top (mismatched propellers).
    """
    drag: float = 0.0
    thrust_error: float = 0.0
    motor_mismatch: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.motor_mismatch) != 4:
            raise ValueError("motor_mismatch needs one entry per motor")
        object.__setattr__(self, "motor_mismatch", tuple(float(e) for e in self.motor_mismatch))


def _reference(shape: Shape, p: TrajectoryParams, t: np.ndarray):
    """Position, velocity, acceleration of the reference path at times t, shape (n, 3) each."""
    A, h, az = p.size, p.height, p.vertical
    if shape is Shape.CIRCLE:
        w = p.speed / A
        ph = w * t
        pos = np.c_[A * np.cos(ph), A * np.sin(ph), h + az * np.sin(2 * ph)]
        vel = np.c_[-A * w * np.sin(ph), A * w * np.cos(ph), 2 * az * w * np.cos(2 * ph)]
        acc = np.c_[-A * w * w * np.cos(ph), -A * w * w * np.sin(ph), -4 * az * w * w * np.sin(2 * ph)]
    elif shape is Shape.PARABOLA:
        # back-and-forth along x with z = h + az * (x / A)^2 * 2
        w = p.speed / A
        s, c = np.sin(w * t), np.cos(w * t)
        pos = np.c_[A * s, 0.3 * A * s, h + 2 * az * s * s]
        vel = np.c_[A * w * c, 0.3 * A * w * c, 4 * az * w * s * c]
        acc = np.c_[-A * w * w * s, -0.3 * A * w * w * s, 4 * az * w * w * (c * c - s * s)]
    else:
        w = p.speed / A
        s, c = np.sin(w * t), np.cos(w * t)
        s2, c2 = np.sin(2 * w * t), np.cos(2 * w * t)
        pos = np.c_[A * s, 0.5 * A * s2, h + az * s]
        vel = np.c_[A * w * c, A * w * c2, az * w * c]
        acc = np.c_[-A * w * w * s, -2 * A * w * w * s2, -az * w * w * s]
    return pos, vel, acc


def _attitude(thrust_dir: np.ndarray, yaw: float) -> np.ndarray:
    b3 = thrust_dir / np.linalg.norm(thrust_dir)
    b1c = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    b2 = np.cross(b3, b1c)
    b2 /= np.linalg.norm(b2)
    b1 = np.cross(b2, b3)
    return np.c_[b1, b2, b3]


def synthesize_flight(shape="circle", params: TrajectoryParams | None = None,
                      disturbance: Disturbance | None = None, n: int = 2000, dt: float = 0.01,
                      noise: float = 0.0, seed: int = 0, vehicle: Vehicle | None = None,
                      ) -> list[FlightSample]:
    """Closed-loop flight along a reference path with injected disturbances.

    The true vehicle feels linear body drag ``-drag * v_b`` and a thrust map
    off by the factor ``1 + thrust_error``; the recorded motor speeds and
    nominal thrust follow the nominal map. Attitude tracks the commanded
    thrust direction exactly, so mismatch torques are not modelled. Velocity is integrated with forward
    Euler, so ``gt_delta_a`` (the injected residual acceleration of the step
    starting at each sample) is exactly what ``compute_residuals`` recovers
    in the absence of measurement noise. ``noise`` is the std (m/s) of
    Gaussian noise added to the recorded body velocity.
    """
    if n < 10 or dt <= 0:
        raise ValueError("need n >= 10 and dt > 0")
    shape = Shape(shape)
    p = params or TrajectoryParams()
    dist = disturbance or Disturbance()
    veh = vehicle or Vehicle()
    rng = np.random.default_rng(seed)
    mismatch = np.asarray(dist.motor_mismatch)
    t = np.arange(n) * dt
    pos_ref, vel_ref, acc_ref = _reference(shape, p, t)
    kp, kd = 6.0, 4.0
    pos = pos_ref[0].copy()
    vel = vel_ref[0].copy()
    m, g, kf = veh.mass, veh.g, veh.kf
    out = []
    for k in range(n):
        a_cmd = acc_ref[k] + kp * (pos_ref[k] - pos) + kd * (vel_ref[k] - vel)
        thrust_vec = m * (a_cmd + g * E3)
        yaw = p.yaw_amplitude * math.sin(0.3 * t[k])
        R = _attitude(thrust_vec, yaw)
        tau_cmd = float(thrust_vec @ R[:, 2])
        phase = 3.0 * t[k]
        mix = 0.08 * np.array([math.sin(phase), -math.sin(phase), math.cos(phase), -math.cos(phase)])
        omega = np.sqrt(tau_cmd / (4.0 * kf) * (1.0 + mix))
        tau_nom = collective_thrust(omega, kf)
        v_b = R.T @ vel
        thrust_err = kf * float(np.dot(dist.thrust_error + mismatch, omega**2))
        f_dist_b = thrust_err * E3 - dist.drag * v_b
        gt = R @ f_dist_b / m
        a_true = R @ (tau_nom * E3) / m - g * E3 + gt
        v_meas = v_b + noise * rng.standard_normal(3) if noise > 0 else v_b
        out.append(FlightSample(t=float(t[k]), R_wb=R, v_b=v_meas, omega_motors=omega, tau=tau_nom,
                                mass=m, g=g, kf=kf, gt_delta_a=gt))
        pos = pos + dt * vel
        vel = vel + dt * a_true
    return out


# ---------------------------------------------------------------------------
# CSV I/O


def write_flight_csv(path, trajectory: Sequence[FlightSample], vehicle: Vehicle | None = None):
    path = Path(path)
    with_gt = all(s.gt_delta_a is not None for s in trajectory)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_COLUMNS + (GT_COLUMNS if with_gt else []))
        for s in trajectory:
            qx, qy, qz, qw = Rotation.from_matrix(s.R_wb).as_quat()
            row = [s.t, qw, qx, qy, qz, *s.v_b, *s.omega_motors]
            if with_gt:
                row += list(s.gt_delta_a)
            wr.writerow([repr(float(v)) for v in row])
    first = trajectory[0]
    veh = vehicle or Vehicle(first.mass, first.kf, first.g)
    with open(sidecar_path(path), "w") as fh:
        json.dump({"mass": veh.mass, "kf": veh.kf, "g": veh.g}, fh, indent=1)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def read_flight_csv(path, vehicle: Vehicle | None = None) -> list[FlightSample]:
    """Read a flight log; vehicle constants come from the JSON sidecar unless given."""
    path = Path(path)
    if vehicle is None:
        side = sidecar_path(path)
        if not side.exists():
            raise FileNotFoundError(f"missing vehicle sidecar {side}")
        with open(side) as fh:
            c = json.load(fh)
        vehicle = Vehicle(float(c["mass"]), float(c["kf"]), float(c.get("g", G)))
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (rd.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        has_gt = all(c in rd.fieldnames for c in GT_COLUMNS)
        rows = list(rd)
    out = []
    for row in rows:
        q = np.array([float(row[c]) for c in ("qx", "qy", "qz", "qw")])
        R = Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()
        gt = np.array([float(row[c]) for c in GT_COLUMNS]) if has_gt else None
        out.append(
            FlightSample(
                t=float(row["t"]),
                R_wb=R,
                v_b=np.array([float(row[c]) for c in ("vbx", "vby", "vbz")]),
                omega_motors=np.array([float(row[c]) for c in ("w0", "w1", "w2", "w3")]),
                mass=vehicle.mass,
                g=vehicle.g,
                kf=vehicle.kf,
                gt_delta_a=gt,
            )
        )
    return out
