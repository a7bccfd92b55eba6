"""Loosely coupled inertial-magnetic SLAM back end.

A MAINS filter with a past-pose clone produces odometry increments; this
filter dead-reckons on them and corrects pose and global field weights with
the raw array readings and the barometer. State: ``[p, q, eta]``.
"""

import warnings

import numpy as np

from . import eskf
from .config import FilterConfig
from .geometry import quat_multiply, rotation_matrix, skew
from .gp_field import (
    OutOfDomainWarning,
    field_hessians,
    field_regressors,
    prior_covariance,
)
from .mains import PoseFixModel, baro_model, emit_odometry
from .types import Trajectory

SLAM_BLOCKS = (eskf.Block("p", 3), eskf.Block("q", 3, rotation=True))


class OdometryProcess:
    """Pose composition ``p += dp``, ``q = q ⊗ dq``; the increment covariance
    enters as process noise."""

    blocks = ("p", "q")

    def transition(self, state, odo, dt):
        q = state["q"]
        dR = rotation_matrix(odo.dq)
        F = np.eye(6)
        F[3:6, 3:6] = dR.T
        G = np.eye(6)
        G[3:6, 3:6] = dR.T
        return {"p": state["p"] + odo.dp, "q": quat_multiply(q, odo.dq)}, F, G, odo.cov


def new_slam_state(p0, q0, P_pose, domain, t=0.0):
    blocks = SLAM_BLOCKS + (eskf.Block("eta", domain.dim),)
    d = 6 + domain.dim
    P = np.zeros((d, d))
    P[:6, :6] = P_pose
    P[6:, 6:] = np.diag(prior_covariance(domain))
    nominal = {"p": p0, "q": q0, "eta": np.zeros(domain.dim)}
    return eskf.FilterState(blocks, nominal, P, t)


def slam_predict(state, odo, process=OdometryProcess()):
    """Compose the pose with an increment, in place. Identity increments are a no-op."""
    dt = odo.t_j - odo.t_i
    if dt <= 0:
        return state
    return eskf.propagate(state, process, odo, dt)


class ArraySlamModel(eskf.MeasurementModel):
    """Each sensor reads ``R^T grad(Psi)(p + R r_i) eta``."""

    name = "array_slam"
    blocks = ("p", "q", "eta")

    def __init__(self, geometry, domain, sigma_mag):
        self.geometry = geometry
        self.domain = domain
        self.R = sigma_mag ** 2 * np.eye(3 * geometry.n)

    def _eval(self, state):
        R = rotation_matrix(state["q"])
        pts = state["p"] + self.geometry.positions @ R.T
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OutOfDomainWarning)
            B = field_regressors(self.domain, pts)
        return R, pts, B

    def predict(self, state):
        R, _, B = self._eval(state)
        return (B @ state["eta"] @ R).reshape(-1)

    def jacobian(self, state):
        R, pts, B = self._eval(state)
        eta = state["eta"]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OutOfDomainWarning)
            Hs = field_hessians(self.domain, eta, pts)
        x = B @ eta
        n = self.geometry.n
        J = np.empty((3 * n, 6 + self.domain.dim))
        Rt = R.T
        for i, r in enumerate(self.geometry.positions):
            RtH = Rt @ Hs[i]
            rows = slice(3 * i, 3 * i + 3)
            J[rows, 0:3] = RtH
            J[rows, 3:6] = skew(Rt @ x[i]) - RtH @ R @ skew(r)
            J[rows, 6:] = Rt @ B[i]
        return J


def array_slam_measurement(geometry, domain, sigma_mag=0.5):
    return ArraySlamModel(geometry, domain, sigma_mag)


def baro_measurement(sigma_baro=0.1):
    return baro_model(sigma_baro)


class LooseSlam:
    """SLAM filter driven by odometry increments."""

    def __init__(self, geometry, domain, cfg=FilterConfig(), use_mag=True, use_baro=True,
                 use_fix=True, sink=None):
        self.cfg = cfg
        self.domain = domain
        self.use_mag = use_mag
        self.use_baro = use_baro
        self.use_fix = use_fix
        self.sink = sink
        self.array_model = ArraySlamModel(geometry, domain, cfg.sigma_mag)
        self.baro_model = baro_model(cfg.sigma_baro)
        self.process = OdometryProcess()
        self.state = None
        self.rows = []

    def start(self, t, p0, q0, P_pose):
        self.state = new_slam_state(np.array(p0, float), np.array(q0, float), P_pose, self.domain, t)
        self._record(self.state["p"].copy())

    def _update(self, model, y):
        return eskf.update(self.state, model, y, form=self.cfg.update_form,
                           gate=self.cfg.gate_or_none, sink=self.sink)

    def step(self, odo, mag=None, baro=None, fix=None):
        slam_predict(self.state, odo, self.process)
        p_prior = self.state["p"].copy()
        if fix is not None and self.use_fix:
            self._update(PoseFixModel(fix.sigma_p, fix.sigma_att), (fix.p, fix.q))
        if baro is not None and self.use_baro:
            self._update(self.baro_model, [baro.altitude])
        if mag is not None and self.use_mag:
            self._update(self.array_model, np.asarray(mag, float).reshape(-1))
        self._record(p_prior)

    def _record(self, p_prior):
        s = self.state
        d = np.diag(s.P)
        self.rows.append((s.t, s["p"].copy(), s["q"].copy(), d[0:6].copy(), s["p"] - p_prior, False))

    def trajectory(self):
        return Trajectory.from_rows(self.rows)


def _nearest(times, t):
    i = int(np.searchsorted(times, t))
    if i == len(times):
        return i - 1
    if i > 0 and t - times[i - 1] <= times[i] - t:
        return i - 1
    return i


def run_loose_slam(odometry, frames, geometry, domain, cfg=FilterConfig(), init=None,
                   use_mag=True, use_baro=True, use_fix=True, sink=None):
    """SLAM back end over precomputed odometry.

    ``init`` is ``(t, p0, q0, P_pose)``; by default the pose at the first
    odometry epoch is taken from ``frames[0]``'s fix (or the origin) with a
    small covariance. The magnetometer and barometer samples nearest each
    odometry epoch are used; pose fixes only when they fall exactly on it.
    """
    frames = list(frames)
    slam = LooseSlam(geometry, domain, cfg, use_mag, use_baro, use_fix and cfg.slam_pose_fix, sink)
    if init is None:
        f0 = frames[0]
        if f0.pose_fix is not None:
            init = (f0.t, f0.pose_fix.p, f0.pose_fix.q, np.eye(6) * f0.pose_fix.sigma_p ** 2)
        else:
            init = (f0.t, np.zeros(3), np.array([1.0, 0, 0, 0]), np.eye(6) * 1e-6)
    slam.start(*init)
    mag_t = np.array([f.t for f in frames if f.mag is not None])
    mag_f = [f for f in frames if f.mag is not None]
    baro_t = np.array([f.t for f in frames if f.baro is not None])
    baro_f = [f for f in frames if f.baro is not None]
    by_time = {f.t: f for f in frames if f.pose_fix is not None}
    for odo in odometry:
        t = odo.t_j
        mag = mag_f[_nearest(mag_t, t)].mag if len(mag_t) else None
        baro = baro_f[_nearest(baro_t, t)].baro if len(baro_t) else None
        fr = by_time.get(t)
        slam.step(odo, mag, baro, fr.pose_fix if fr is not None else None)
    return slam


def run_loose(frames, geometry, domain, cfg=FilterConfig(), use_baro=True, use_fix=True, sink=None):
    """Full cascade: MAINS odometry followed by the SLAM back end.

    Returns ``(slam, mains_filter)``.
    """
    frames = list(frames)
    odometry, front = emit_odometry(frames, geometry, cfg, use_baro=use_baro, use_fix=use_fix)
    s0 = front.rows[0]
    init_P = np.diag(s0[3])
    init = (s0[0], s0[1], s0[2], init_P)
    slam = run_loose_slam(odometry, frames, geometry, domain, cfg, init, use_baro=use_baro,
                          use_fix=use_fix, sink=sink)
    return slam, front
