"""Synthetic worlds, trajectories and sensor streams with known truth.

The world field is a draw from the reduced-rank GP prior. Trajectories are
cubic splines through waypoints, traversed with a smooth start/stop time
warp so the platform can sit still during the initial segment. Heading
follows the path tangent, with optional roll/pitch wobble.
"""

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .config import SimConfig
from .geometry import error_inject, quat_from_euler, rotation_matrix
from .gp_field import GpDomain, evaluate_global_field, prior_covariance
from .types import BaroSample, ImuSample, PoseFix, SensorFrame


class InfeasibleSpeed(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    domain: GpDomain
    eta: np.ndarray
    gravity: float = 9.81
    seed: int = 0

    def field(self, points):
        """True field at navigation-frame points, shape (n, 3)."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return evaluate_global_field(self.domain, self.eta, pts)


def sample_world(domain, seed, gravity=9.81):
    rng = np.random.default_rng(seed)
    eta = np.sqrt(prior_covariance(domain)) * rng.standard_normal(domain.dim)
    return SyntheticWorld(domain, eta, gravity, seed)


@dataclass(frozen=True)
class TrajectorySpec:
    waypoints: np.ndarray
    speed: float = 1.0             # m/s along the path at full rate
    duration: float | None = None
    dwell: float = 0.0             # s stationary at the start
    ramp: float = 2.0              # s to reach (and leave) full speed
    closed: bool = False
    family: str = "loop"           # long-corridor | loop | spiral
    max_speed: float = 2.5
    wobble: float = 0.0            # rad, roll/pitch oscillation amplitude
    wobble_freq: float = 0.5       # Hz

    def __post_init__(self):
        if self.duration is not None and self.duration <= 0:
            raise ValueError("duration must be positive")


@dataclass
class TruthTrajectory:
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    q: np.ndarray
    omega: np.ndarray   # body rates, rad/s
    euler: np.ndarray   # roll, pitch, yaw
    mid: Optional["TruthTrajectory"] = None  # same quantities half a sample later

    def __len__(self):
        return len(self.t)

    def at(self, k):
        return self.p[k], self.q[k]


def _smootherstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x ** 3 * (x * (6.0 * x - 15.0) + 10.0)


def _smootherstep_d(x):
    inside = (x > 0) & (x < 1)
    return np.where(inside, 30.0 * x ** 2 * (x - 1.0) ** 2, 0.0)


def _smootherstep_int(x):
    x = np.clip(x, 0.0, 1.0)
    return x ** 6 - 3.0 * x ** 5 + 2.5 * x ** 4


def _path_spline(spec):
    W = np.asarray(spec.waypoints, dtype=float).reshape(-1, 3)
    if spec.closed and not np.allclose(W[0], W[-1]):
        W = np.vstack([W, W[:1]])
    chord = np.linalg.norm(np.diff(W, axis=0), axis=1)
    if np.any(chord <= 0):
        raise ValueError("consecutive waypoints must differ")
    nodes = np.concatenate([[0.0], np.cumsum(chord)]) / spec.speed
    bc = "periodic" if spec.closed else "natural"
    return CubicSpline(nodes, W, bc_type=bc), nodes[-1]


def synthesize_trajectory(spec, rate=100.0):
    """Dense truth samples at ``rate`` Hz.

    ``mid`` holds the same kinematics evaluated half a sample later, which
    the sensor synthesizer uses for IMU readings.
    """
    W = np.asarray(spec.waypoints, dtype=float).reshape(-1, 3)
    dt = 1.0 / rate
    duration = spec.duration or 1.0
    if len(W) == 1:
        t = np.arange(int(round(duration * rate)) + 1) * dt
        n = len(t)
        truth = TruthTrajectory(t, np.tile(W[0], (n, 1)), np.zeros((n, 3)), np.zeros((n, 3)),
                                np.tile(quat_from_euler(0.0, 0.0, 0.0), (n, 1)),
                                np.zeros((n, 3)), np.zeros((n, 3)))
        truth.mid = truth
        return truth

    spline, period = _path_spline(spec)
    if spec.duration is None:
        duration = spec.dwell + period + spec.ramp
    elif not spec.closed:
        # rescale so the open path ends exactly at the last waypoint
        motion = duration - spec.dwell - spec.ramp
        if motion <= 0:
            raise ValueError("duration too short for dwell and ramps")
        spec = _replace_speed(spec, spec.speed * period / motion)
        spline, period = _path_spline(spec)
    t = np.arange(int(round(duration * rate)) + 1) * dt
    truth = _evaluate(spec, spline, period, t, duration)
    truth.mid = _evaluate(spec, spline, period, t + 0.5 * dt, duration)
    return truth


def _evaluate(spec, spline, period, t, duration):
    tau, tau_d, tau_dd = _ramped(t, spec.dwell, spec.ramp, duration)
    s = np.mod(tau, period) if spec.closed else np.clip(tau, 0.0, period)
    P = spline(s)
    D1 = spline(s, 1)
    D2 = spline(s, 2)
    v = D1 * tau_d[:, None]
    a = D2 * tau_d[:, None] ** 2 + D1 * tau_dd[:, None]
    speed = np.linalg.norm(v, axis=1)
    if speed.max() > spec.max_speed:
        raise InfeasibleSpeed(f"peak speed {speed.max():.2f} m/s exceeds {spec.max_speed} m/s")

    # heading from the horizontal tangent, defined even while stationary
    hx, hy = D1[:, 0], D1[:, 1]
    yaw = np.unwrap(np.arctan2(hy, hx))
    h2 = hx * hx + hy * hy
    yaw_rate = (hx * D2[:, 1] - hy * D2[:, 0]) / np.maximum(h2, 1e-12) * tau_d

    w = 2.0 * math.pi * spec.wobble_freq
    ph = 0.7 * w * t + 1.0
    roll = spec.wobble * np.sin(w * t) * tau_d
    pitch = 0.5 * spec.wobble * np.sin(ph) * tau_d
    roll_rate = spec.wobble * (w * np.cos(w * t) * tau_d + np.sin(w * t) * tau_dd)
    pitch_rate = 0.5 * spec.wobble * (0.7 * w * np.cos(ph) * tau_d + np.sin(ph) * tau_dd)
    q = np.array([quat_from_euler(r, pi, y) for r, pi, y in zip(roll, pitch, yaw)])
    sr, cr = np.sin(roll), np.cos(roll)
    sp, cp = np.sin(pitch), np.cos(pitch)
    omega = np.column_stack([
        roll_rate - yaw_rate * sp,
        pitch_rate * cr + yaw_rate * sr * cp,
        -pitch_rate * sr + yaw_rate * cr * cp,
    ])
    return TruthTrajectory(t, P, v, a, q, omega, np.column_stack([roll, pitch, yaw]))


def _replace_speed(spec, speed):
    return dataclasses.replace(spec, speed=speed)


def _ramped(t, dwell, ramp, t_end):
    """Rate profile: 0 during dwell, smooth ramp up, 1, smooth ramp down to
    0 at ``t_end``. Returns (tau, dtau/dt, d2tau/dt2)."""
    if ramp <= 0:
        rate = (t >= dwell).astype(float)
        return np.clip(t - dwell, 0.0, None), rate, np.zeros_like(t)
    x_up = (t - dwell) / ramp
    x_dn = (t - (t_end - ramp)) / ramp
    tau = ramp * _smootherstep_int(x_up) + np.clip(t - dwell - ramp, 0.0, None)
    # subtract what the ramp-down removes: integral of (1 - S(1 - x))
    tau -= ramp * (np.clip(x_dn, 0.0, 1.0) - (0.5 - _smootherstep_int(1.0 - np.clip(x_dn, 0.0, 1.0))))
    up, dn = _smootherstep(x_up), _smootherstep(1.0 - x_dn)
    rate = up * dn
    drate = (_smootherstep_d(x_up) * dn - up * _smootherstep_d(1.0 - x_dn)) / ramp
    return tau, rate, drate


def specific_force(truth, gravity=9.81):
    """Body-frame accelerometer reading ``R^T (a - g)`` for every sample."""
    out = np.empty_like(truth.a)
    g = np.array([0.0, 0.0, -gravity])
    for k, q in enumerate(truth.q):
        out[k] = rotation_matrix(q).T @ (truth.a[k] - g)
    return out


@dataclass
class CleanReadings:
    """Noise-free specific force, body rates and array readings along a truth."""
    acc: np.ndarray    # (n, 3)
    gyro: np.ndarray   # (n, 3)
    mag: np.ndarray    # (n, N, 3)


def clean_readings(world, truth, geometry, chunk=2000):
    """Exact IMU and magnetometer-array readings; see :func:`synthesize_sensors`."""
    n = len(truth)
    mid = truth.mid if truth.mid is not None else truth
    f_body = specific_force(mid, world.gravity)
    r = geometry.positions
    mag = np.empty((n, geometry.n, 3))
    for s0 in range(0, n, chunk):
        sl = slice(s0, min(n, s0 + chunk))
        Rs = np.array([rotation_matrix(q) for q in truth.q[sl]])
        pts = truth.p[sl, None, :] + np.einsum("kij,nj->kni", Rs, r)
        B = world.field(pts.reshape(-1, 3)).reshape(-1, geometry.n, 3)
        mag[sl] = np.einsum("kji,knj->kni", Rs, B)
    return CleanReadings(f_body, np.array(mid.omega, dtype=float), mag)


def synthesize_sensors(world, truth, geometry, cfg=SimConfig(), seed=0, chunk=2000, clean=None):
    """Sensor frames along a truth trajectory.

    IMU sample ``k`` is the instantaneous reading at the middle of
    ``[t_k, t_k+1]``, matching the filters' zero-order hold from ``t_k``.
    Barometer frames carry the configured constant offset. Pass ``clean``
    (from :func:`clean_readings`) to redraw only the noise.
    """
    rng = np.random.default_rng(seed)
    n = len(truth)
    dt = truth.t[1] - truth.t[0] if n > 1 else 1.0 / cfg.imu_rate
    if clean is None:
        clean = clean_readings(world, truth, geometry, chunk)
    k_imu = max(1, int(cfg.imu_count))
    acc_sd = cfg.sigma_acc / math.sqrt(dt) / math.sqrt(k_imu)
    gyr_sd = cfg.sigma_gyro / math.sqrt(dt) / math.sqrt(k_imu)
    acc_bias = cfg.acc_bias * rng.standard_normal(3)
    gyro_bias = cfg.gyro_bias * rng.standard_normal(3)
    acc = clean.acc + acc_bias + acc_sd * rng.standard_normal((n, 3))
    gyro = clean.gyro + gyro_bias + gyr_sd * rng.standard_normal((n, 3))
    mag = clean.mag + cfg.sigma_mag * rng.standard_normal(clean.mag.shape)

    baro_every = max(1, int(round(cfg.imu_rate / cfg.baro_rate)))
    mag_every = max(1, int(round(cfg.imu_rate / cfg.mag_rate)))
    fix_every = max(1, int(round(cfg.imu_rate / cfg.pose_fix_rate)))
    baro_noise = cfg.sigma_baro * rng.standard_normal(n)
    fix_noise = rng.standard_normal((n, 6))
    frames = []
    t0 = truth.t[0]
    for k in range(n):
        t = float(truth.t[k])
        baro = None
        if k % baro_every == 0:
            baro = BaroSample(t, float(truth.p[k, 2] + cfg.baro_offset + baro_noise[k]))
        fix = None
        if t - t0 <= cfg.pose_fix_duration and k % fix_every == 0:
            fix = PoseFix(truth.p[k] + cfg.sigma_fix_pos * fix_noise[k, :3],
                          error_inject(truth.q[k], cfg.sigma_fix_att * fix_noise[k, 3:]),
                          cfg.sigma_fix_pos, cfg.sigma_fix_att)
        frames.append(SensorFrame(
            t, ImuSample(t, acc[k], gyro[k]),
            mag[k] if k % mag_every == 0 else None, baro, fix))
    return frames


# -- scenarios -------------------------------------------------------------------

@dataclass
class Scenario:
    name: str
    spec: TrajectorySpec
    truth: TruthTrajectory
    world: SyntheticWorld
    frames: list = field(repr=False)


def corridor_loop_spec(duration=120.0, width=12.0, depth=5.0, speed=1.0, dwell=5.0):
    w, d = width / 2, depth / 2
    c = 1.2  # corner cut so the spline turns smoothly
    pts = [(-w + c, -d), (w - c, -d), (w, -d + c), (w, d - c), (w - c, d), (-w + c, d),
           (-w, d - c), (-w, -d + c)]
    W = np.array([(x, y, 0.0) for x, y in pts])
    return TrajectorySpec(W, speed=speed, duration=duration, dwell=dwell, closed=True,
                          family="loop", wobble=0.03)


def spiral_spec(duration=60.0, radius=1.5, climb=4.5, turns=3, dwell=5.0):
    ang = np.linspace(0.0, 2.0 * np.pi * turns, 12 * turns + 1)
    W = np.column_stack([radius * np.cos(ang), radius * np.sin(ang), climb * ang / ang[-1]])
    return TrajectorySpec(W, speed=1.0, duration=duration, dwell=dwell, closed=False,
                          family="spiral", wobble=0.03)


def long_corridor_spec(duration=120.0, length=40.0, dwell=5.0):
    xs = np.linspace(0.0, length, 9)
    W = np.column_stack([xs, 0.3 * np.sin(xs / 5.0), np.zeros_like(xs)])
    return TrajectorySpec(W, speed=1.0, duration=duration, dwell=dwell, closed=False,
                          family="long-corridor", wobble=0.03)


SPECS = {"loop": corridor_loop_spec, "spiral": spiral_spec, "long-corridor": long_corridor_spec}


def build_scenario(name, seed, geometry, cfg=SimConfig(), duration=None, rate=None):
    """Truth trajectory, GP world around it and the synthetic sensor stream."""
    kwargs = {} if duration is None else {"duration": duration}
    spec = SPECS[name](**kwargs)
    truth = synthesize_trajectory(spec, rate or cfg.imu_rate)
    domain = GpDomain.around(truth.p, cfg.m, cfg.sigma_lin, cfg.sigma_se, cfg.l_se)
    world = sample_world(domain, seed)
    frames = synthesize_sensors(world, truth, geometry, cfg, seed=seed + 1_000_003)
    return Scenario(name, spec, truth, world, frames)


def write_truth(path, truth, world=None):
    data = {"t": truth.t, "p": truth.p, "v": truth.v, "q": truth.q, "omega": truth.omega}
    if world is not None:
        data.update(eta=world.eta, half_lengths=world.domain.half_lengths,
                    center=world.domain.center, modes=world.domain.modes)
    np.savez(path, **data)


def read_truth(path):
    with np.load(path) as z:
        return {k: z[k].copy() for k in z.files}
