"""Magnetic-field-aided inertial navigation and odometry extraction.

The filter state is ``[p, v, q, b_a, b_g, theta]`` with an optional past-pose
clone ``[p_past, q_past]`` and, for the tightly coupled system, the global
field weights ``eta``. Navigation frame is z-up with gravity along -z.

Odometry increments are read off the clone: between clone epochs ``i`` and
``j`` the increment is ``dp = p_j - p_i``, ``dq = q_i* ⊗ q_j`` and its
covariance is ``A Cov(p_i, p_j, dth_i, dth_j) A^T`` with ``A`` from
:func:`odometry_jacobian`.
"""

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import eskf
from .config import FilterConfig
from .geometry import (
    IDENTITY,
    error_extract,
    quat_conjugate,
    quat_exp,
    quat_from_euler,
    quat_multiply,
    right_jacobian,
    rotation_matrix,
    skew,
)
from .local_field import (
    N_COEFFS,
    field_gradient,
    gradient_basis,
    pack_gradient,
    stacked_regressor,
)
from .types import NavState, OdometryIncrement, Trajectory

log = logging.getLogger(__name__)

NAV_BLOCKS = (
    eskf.Block("p", 3),
    eskf.Block("v", 3),
    eskf.Block("q", 3, rotation=True),
    eskf.Block("ba", 3),
    eskf.Block("bg", 3),
)
THETA_BLOCK = eskf.Block("theta", N_COEFFS)
CLONE_SOURCES = ("p", "q")
CLONE_NAMES = ("p_past", "q_past")


class GapTooLarge(eskf.FilterError):
    pass


@dataclass(frozen=True)
class ArrayGeometry:
    """Body-frame magnetometer positions, shape (N, 3), meters."""
    positions: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(np.unique(np.round(r, 12), axis=0)) != len(r):
            raise ValueError("sensor positions must be distinct")
        if len(r) > 1 and np.linalg.matrix_rank(r - r.mean(axis=0), tol=1e-9) < 2:
            raise ValueError("sensor positions must span at least two dimensions")
        object.__setattr__(self, "positions", r)
        if len(r) >= 3:
            Phi = stacked_regressor(r)
            normal_inv = np.linalg.inv(Phi.T @ Phi)
            object.__setattr__(self, "_phi", Phi)
            object.__setattr__(self, "_normal_inv", normal_inv)
            object.__setattr__(self, "_projector", normal_inv @ Phi.T)

    @property
    def n(self):
        return len(self.positions)

    @property
    def stacked(self):
        return self._phi

    @property
    def projector(self):
        """Least-squares map from stacked readings (3N,) to theta (8,)."""
        return self._projector

    @property
    def normal_inverse(self):
        return self._normal_inv


def default_array(nx=6, ny=5, width=0.30, height=0.20):
    """Planar grid of ``nx * ny`` sensors centered on the body origin."""
    xs = np.linspace(-width / 2, width / 2, nx)
    ys = np.linspace(-height / 2, height / 2, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return ArrayGeometry(np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)]))


def gravity_vector(g=9.81):
    return np.array([0.0, 0.0, -g])


def _half_step_terms(phi):
    """``Exp(phi / 2)``, ``Jr(phi)`` and ``Jr(phi / 2)`` from one skew matrix."""
    angle = math.sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
    K = skew(phi)
    KK = K @ K
    if angle < 1e-6:
        return (_E3 + 0.5 * K + 0.125 * KK, _E3 - 0.5 * K + KK / 6.0,
                _E3 - 0.25 * K + KK / 24.0)
    a2 = angle * angle
    a3 = a2 * angle
    s, c = math.sin(angle), math.cos(angle)
    sh, ch = math.sin(0.5 * angle), math.cos(0.5 * angle)
    Eh = _E3 + (sh / angle) * K + ((1.0 - ch) / a2) * KK
    Jr = _E3 - ((1.0 - c) / a2) * K + ((angle - s) / a3) * KK
    Jrh = _E3 - (2.0 * (1.0 - ch) / a2) * K + (2.0 * (0.5 * angle - sh) / a3) * KK
    return Eh, Jr, Jrh


def _strapdown(p, v, q, ba, bg, acc, gyro, dt, g_vec):
    """One step of strapdown integration under zero-order-hold inputs.

    The specific force is rotated with the mid-step attitude, which makes the
    velocity update exact for constant body rates.
    """
    a = acc - ba
    w = gyro - bg
    phi = w * dt
    R = rotation_matrix(q)
    Eh, Jr, Jrh = _half_step_terms(phi)
    Eha = Eh @ a
    fv = R @ Eha * dt + g_vec * dt
    return {
        "p": p + v * dt + 0.5 * fv * dt,
        "v": v + fv,
        "q": quat_multiply(q, quat_exp(phi)),
    }, (a, phi, R, Eh, Eha, Jr, Jrh)


def ins_mechanization(x, u, dt, gravity=9.81):
    """Advance a :class:`NavState` by one IMU interval; biases are held."""
    if not 0.0 < dt <= 0.1:
        raise ValueError("dt must lie in (0, 0.1] s")
    new, _ = _strapdown(x.p, x.v, x.q, x.ba, x.bg, np.asarray(u.acc, float),
                        np.asarray(u.gyro, float), dt, gravity_vector(gravity))
    out = NavState(new["p"], new["v"], new["q"], x.ba.copy(), x.bg.copy())
    if not all(np.all(np.isfinite(a)) for a in (out.p, out.v, out.q)):
        raise eskf.NonFiniteState("strapdown produced non-finite state")
    return out


_GRAD_BASIS = gradient_basis()
_E3 = np.eye(3)
_SKEW_E = np.stack([skew(e) for e in _E3])


_PACK_I = np.array([1, 1, 0, 0, 0])
_PACK_J = np.array([2, 1, 2, 1, 0])
_PACK_W = np.array([1.0, 0.5, 1.0, 1.0, 0.5])


def _pack_rows(mats):
    """Pack a stack of symmetric traceless 3x3 matrices column-wise into (5, k)."""
    return (mats[:, _PACK_I, _PACK_J] * _PACK_W).T


class InsFieldProcess:
    """Strapdown INS plus exact rigid-motion transport of the local field.

    Error layout (tangent): p 0:3, v 3:6, att 6:9, b_a 9:12, b_g 12:15,
    theta 15:23. Noise layout: accel white, gyro white, accel bias walk,
    gyro bias walk, field mean walk, field gradient walk.
    """

    blocks = ("p", "v", "q", "ba", "bg", "theta")

    def __init__(self, cfg=FilterConfig()):
        self.cfg = cfg
        self.g = gravity_vector(cfg.gravity)
        self._G = np.zeros((23, 20))
        self._G[9:12, 6:9] = _E3
        self._G[12:15, 9:12] = _E3
        self._G[15:23, 12:20] = np.eye(8)
        self._noise_dt = None

    def noise(self, dt):
        if self._noise_dt is not None and abs(dt - self._noise_dt) <= 1e-9 * dt:
            return self._noise
        c = self.cfg
        self._noise_dt = dt
        self._noise = np.concatenate([
            np.full(3, c.sigma_acc ** 2 / dt),
            np.full(3, c.sigma_gyro ** 2 / dt),
            np.full(3, c.sigma_acc_bias ** 2 * dt),
            np.full(3, c.sigma_gyro_bias ** 2 * dt),
            np.full(3, c.q_field_mean ** 2 * dt),
            np.full(5, c.q_field_grad ** 2 * dt),
        ])
        return self._noise

    def transition(self, state, u, dt):
        n = state.nominal
        p, v, q, ba, bg, th = n["p"], n["v"], n["q"], n["ba"], n["bg"], n["theta"]
        new, (a, phi, R, Eh, Eha, Jr, Jrh) = _strapdown(p, v, q, ba, bg, u.acc, u.gyro, dt, self.g)
        g = self.g
        E = Eh @ Eh
        dt2 = dt * dt

        # body-frame displacement over the step and local field transport
        nav_disp = v * dt + 0.5 * g * dt2
        dpb = R.T @ nav_disp + 0.5 * Eha * dt2
        G = field_gradient(th)
        m0n = E.T @ (th[:3] + G @ dpb)
        Gn = E.T @ G @ E
        new["theta"] = np.concatenate([m0n, pack_gradient(Gn)])

        F = np.eye(23)
        dEha_dbg = Eh @ skew(a) @ Jrh * (0.5 * dt)
        Jr_dt = -Jr * dt
        # velocity rows over (att, b_a, b_g); position rows are half a step of them
        dv = (R * dt) @ np.concatenate([-skew(Eha), -Eh, dEha_dbg], axis=1)
        F[3:6, 6:15] = dv
        F[0:3, 3:6] = _E3 * dt
        F[0:3, 6:15] = (0.5 * dt) * dv
        F[6:9, 6:9] = E.T
        F[6:9, 12:15] = Jr_dt

        # field mean rows through the body displacement over (v, att, b_a, b_g)
        EtG = E.T @ G
        d_disp = np.concatenate([R.T * dt, skew(R.T @ nav_disp), (-0.5 * dt2) * Eh,
                                 (0.5 * dt2) * dEha_dbg], axis=1)
        F[15:18, 3:15] = EtG @ d_disp
        F[15:18, 12:15] += skew(m0n) @ Jr_dt
        F[15:18, 15:18] = E.T
        F[15:18, 18:23] = E.T @ (_GRAD_BASIS @ dpb).T
        F[18:23, 18:23] = _pack_rows(E.T @ _GRAD_BASIS @ E)
        GnK = Gn @ _SKEW_E
        dG_de = _pack_rows(GnK + GnK.transpose(0, 2, 1))
        F[18:23, 12:15] = dG_de @ Jr_dt

        Gm = self._G.copy()
        Gm[:, 0:3] = F[:, 9:12]
        Gm[:, 3:6] = F[:, 12:15]
        Gm[9:15, 0:6] = 0.0
        return new, F, Gm, self.noise(dt)


# -- measurement models -----------------------------------------------------

def mains_measurement_model(geometry, sigma_mag):
    """Raw stacked array model: 3N readings predicted as ``Phi(r_i) theta``."""
    Phi = geometry.stacked
    R = sigma_mag ** 2 * np.eye(len(Phi))
    return eskf.FunctionModel("mains", ("theta",), lambda s: Phi @ s["theta"], lambda s: Phi, R)


def mains_observation_matrix(geometry, nav_dim=15):
    """Full Jacobian ``[0 | Phi]`` over the INS and theta error blocks."""
    Phi = geometry.stacked
    return np.hstack([np.zeros((len(Phi), nav_dim)), Phi])


class CompressedArrayModel(eskf.MeasurementModel):
    """Array update through the least-squares theta of the frame.

    Conditioning on ``W y`` with noise ``sigma^2 (Phi^T Phi)^-1`` gives the
    same posterior as the raw 3N-row model, since theta is a sufficient
    statistic of a linear-Gaussian observation.
    """

    name = "mains"
    blocks = ("theta",)

    def __init__(self, geometry, sigma_mag):
        self.geometry = geometry
        self.R = sigma_mag ** 2 * geometry.normal_inverse
        self._H = np.eye(N_COEFFS)

    def compress(self, readings):
        return self.geometry.projector @ np.asarray(readings, dtype=float).reshape(-1)

    def predict(self, state):
        return state["theta"].copy()

    def jacobian(self, state):
        return self._H


def baro_model(sigma_baro):
    H = np.array([[0.0, 0.0, 1.0]])
    return eskf.FunctionModel("baro", ("p",), lambda s: s["p"][2:3].copy(), lambda s: H,
                              [[sigma_baro ** 2]])


class PoseFixModel(eskf.MeasurementModel):
    """Position and attitude fix; ``y = (p, q)``.

    The attitude residual ``xi = Log(q_hat* ⊗ q_fix)`` depends on a body-frame
    error ``d`` through ``Exp(-d) ⊗ Exp(xi)``, so its rows of the Jacobian
    are the inverse left Jacobian of ``xi`` (identity for a zero residual).
    """

    name = "pose_fix"
    blocks = ("p", "q")

    def __init__(self, sigma_p, sigma_att):
        self.R = np.diag([sigma_p ** 2] * 3 + [sigma_att ** 2] * 3)
        self._q_hat = None
        self._xi = np.zeros(3)

    def predict(self, state):
        self._q_hat = state["q"].copy()
        return state["p"].copy()

    def residual(self, y, y_hat):
        p, q = y
        self._xi = error_extract(self._q_hat, q)
        return np.concatenate([np.asarray(p, float) - y_hat, self._xi])

    def jacobian(self, state):
        H = np.eye(6)
        H[3:, 3:] = np.linalg.inv(right_jacobian(-self._xi))
        return H


# -- odometry -----------------------------------------------------------------

def odometry_jacobian(q_i, q_j):
    """Linear map from ``(dp_i, dp_j, dth_i, dth_j)`` to the increment error.

    Position rows give ``dp_j - dp_i``; rotation rows give the left error
    ``eps`` of ``dq = q_i* ⊗ q_j`` for body-frame attitude errors.
    """
    Ri = rotation_matrix(q_i)
    Rj = rotation_matrix(q_j)
    A = np.zeros((6, 12))
    A[0:3, 0:3] = -_E3
    A[0:3, 3:6] = _E3
    A[3:6, 6:9] = -_E3
    A[3:6, 9:12] = Ri.T @ Rj
    return A


def increment_from_poses(p_i, q_i, p_j, q_j):
    return p_j - p_i, quat_multiply(quat_conjugate(q_i), q_j)


def odometry_from_state(state, t_i, i, j):
    """Increment between the clone blocks and the current pose."""
    p_i, q_i = state["p_past"], state["q_past"]
    p_j, q_j = state["p"], state["q"]
    dp, dq = increment_from_poses(p_i, q_i, p_j, q_j)
    C = state.marginal(("p_past", "p", "q_past", "q"))
    A = odometry_jacobian(q_i, q_j)
    cov = A @ C @ A.T
    return OdometryIncrement(t_i, state.t, i, j, dp, dq, 0.5 * (cov + cov.T))


def compose_increments(p0, q0, increments):
    p, q = np.array(p0, dtype=float), np.array(q0, dtype=float)
    for inc in increments:
        p = p + inc.dp
        q = quat_multiply(q, inc.dq)
    return p, q


def write_odometry(path, increments):
    with open(path, "w", encoding="utf-8") as fh:
        for o in increments:
            fh.write(json.dumps({
                "t_i": o.t_i, "t_j": o.t_j, "i": o.i, "j": o.j,
                "dp": o.dp.tolist(), "dq": o.dq.tolist(),
                "cov": o.cov.reshape(-1).tolist(),
            }) + "\n")


def read_odometry(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(OdometryIncrement(d["t_i"], d["t_j"], d["i"], d["j"], np.array(d["dp"]),
                                             np.array(d["dq"]), np.array(d["cov"]).reshape(6, 6)))
    return out


# -- initialization -------------------------------------------------------------

def leveling_attitude(acc_mean, yaw=0.0):
    """Roll and pitch from a mean specific-force reading of a static platform."""
    fx, fy, fz = acc_mean
    roll = np.arctan2(fy, fz)
    pitch = np.arctan2(-fx, np.hypot(fy, fz))
    return quat_from_euler(roll, pitch, yaw)


def coarse_alignment(frames, t_init):
    """Mean accelerometer over the initial segment, leveled attitude (yaw 0)."""
    t0 = frames[0].t
    acc = [f.imu.acc for f in frames if f.imu is not None and f.t - t0 <= t_init]
    if not acc:
        return IDENTITY.copy()
    return leveling_attitude(np.mean(acc, axis=0))


# -- filter ---------------------------------------------------------------------

class InertialMagneticFilter:
    """INS + local field filter, optionally with a past-pose clone and a
    global field block.

    * ``clone=True`` emits odometry increments every ``cfg.odometry_steps``
      propagation steps.
    * ``domain`` adds the global field weights; every ``cfg.switch_period``-th
      magnetometer frame then uses the fused global/local model instead of the
      local-only model.
    """

    def __init__(self, geometry, cfg=FilterConfig(), domain=None, clone=False,
                 use_mag=True, use_baro=True, use_fix=True, sink=None, switch_period=None):
        self.geometry = geometry
        self.cfg = cfg
        self.domain = domain
        self.clone = clone
        self.use_mag = use_mag
        self.use_baro = use_baro
        self.use_fix = use_fix
        self.sink = sink
        self.switch_period = cfg.switch_period if switch_period is None else switch_period
        self.process = InsFieldProcess(cfg)
        self.mag_model = CompressedArrayModel(geometry, cfg.sigma_mag)
        self.baro_model = baro_model(cfg.sigma_baro)
        self.fused_model = None
        if domain is not None:
            from .tight import FusedArrayModel
            self.fused_model = FusedArrayModel(geometry, domain, cfg.sigma_mag)
        self.state = None
        self.k = 0
        self.mag_count = 0
        self.rows = []
        self.odometry = []
        self._imu = None
        self._clone_t = None
        self._clone_k = None

    # setup

    def start(self, frame, q0=None):
        cfg = self.cfg
        fix = frame.pose_fix if self.use_fix else None
        if fix is not None:
            p0, q = np.array(fix.p, float), np.array(fix.q, float)
            P_pos = np.full(3, fix.sigma_p ** 2)
            P_att = np.eye(3) * fix.sigma_att ** 2
        else:
            p0 = np.zeros(3)
            q = IDENTITY.copy() if q0 is None else np.array(q0, float)
            P_pos = np.full(3, cfg.init_sigma_pos ** 2)
            R = rotation_matrix(q)
            P_att = R.T @ np.diag([cfg.init_sigma_tilt ** 2] * 2 + [cfg.init_sigma_yaw ** 2]) @ R
        if self.use_mag and frame.mag is not None:
            theta = self.geometry.projector @ np.asarray(frame.mag, float).reshape(-1)
            P_th = cfg.sigma_mag ** 2 * self.geometry.normal_inverse
            self.mag_count = 1
        else:
            theta = np.zeros(N_COEFFS)
            P_th = np.eye(N_COEFFS) * 1e4

        blocks = list(NAV_BLOCKS) + [THETA_BLOCK]
        nominal = {"p": p0, "v": np.zeros(3), "q": q, "ba": np.zeros(3), "bg": np.zeros(3),
                   "theta": theta}
        dim = 23
        if self.domain is not None:
            from .gp_field import prior_covariance
            blocks.append(eskf.Block("eta", self.domain.dim))
            nominal["eta"] = np.zeros(self.domain.dim)
            dim += self.domain.dim
        P = np.zeros((dim, dim))
        P[0:3, 0:3] = np.diag(P_pos)
        P[3:6, 3:6] = np.eye(3) * cfg.init_sigma_vel ** 2
        P[6:9, 6:9] = P_att
        P[9:12, 9:12] = np.eye(3) * cfg.init_sigma_acc_bias ** 2
        P[12:15, 12:15] = np.eye(3) * cfg.init_sigma_gyro_bias ** 2
        P[15:23, 15:23] = P_th
        if self.domain is not None:
            P[23:, 23:] = np.diag(prior_covariance(self.domain))
        self.state = eskf.FilterState(blocks, nominal, P, frame.t)
        self.k = 1
        self._imu = frame.imu
        if self.use_baro and frame.baro is not None:
            self._update(self.baro_model, [frame.baro.altitude])
        if self.clone:
            eskf.augment_block(self.state, CLONE_SOURCES, CLONE_NAMES)
            self._clone_t, self._clone_k = self.state.t, self.k
        self._record(self.state["p"].copy(), False)
        return self

    # processing

    def _update(self, model, y):
        return eskf.update(self.state, model, y, form=self.cfg.update_form,
                           gate=self.cfg.gate_or_none, sink=self.sink)

    def step(self, frame):
        """Consume one frame. Returns an odometry increment when one is due."""
        if self.state is None:
            self.start(frame)
            return None
        s = self.state
        dt = frame.t - s.t
        if dt > self.cfg.gap_max:
            raise GapTooLarge(f"gap of {dt:.3f} s before t={frame.t:.3f}")
        if dt < 0:
            raise ValueError(f"frame at t={frame.t} precedes filter time {s.t}")
        K = self.cfg.odometry_steps
        if dt > 0:
            if self._imu is None:
                raise eskf.FilterError("no IMU sample available for propagation")
            if self.clone and (self.k - 1) % K == 0:
                eskf.reclone(s, CLONE_SOURCES, CLONE_NAMES)
                self._clone_t, self._clone_k = s.t, self.k
            eskf.propagate(s, self.process, self._imu, dt)
            self.k += 1
        if frame.imu is not None:
            self._imu = frame.imu

        p_prior = s["p"].copy()
        fused = False
        fix = frame.pose_fix if self.use_fix else None
        if fix is not None:
            model = PoseFixModel(fix.sigma_p, fix.sigma_att)
            self._update(model, (fix.p, fix.q))
        if self.use_baro and frame.baro is not None:
            self._update(self.baro_model, [frame.baro.altitude])
        if self.use_mag and frame.mag is not None:
            self.mag_count += 1
            if self.fused_model is not None and self.mag_count % self.switch_period == 0:
                self._update(self.fused_model, np.asarray(frame.mag, float).reshape(-1))
                fused = True
            else:
                self._update(self.mag_model, self.mag_model.compress(frame.mag))
        self._record(p_prior, fused)

        if self.clone and dt > 0 and self.k > 1 and (self.k - 1) % K == 0:
            inc = odometry_from_state(s, self._clone_t, self._clone_k, self.k)
            self.odometry.append(inc)
            return inc
        return None

    def _record(self, p_prior, fused):
        s = self.state
        d = np.diag(s.P)
        self.rows.append((s.t, s["p"].copy(), s["q"].copy(), np.concatenate([d[0:3], d[6:9]]),
                          s["p"] - p_prior, fused))

    def trajectory(self):
        return Trajectory.from_rows(self.rows)

    def nav_state(self):
        s = self.state
        return NavState(s["p"].copy(), s["v"].copy(), s["q"].copy(), s["ba"].copy(), s["bg"].copy())


def initial_attitude(frames, cfg):
    if frames and frames[0].pose_fix is None:
        return coarse_alignment(frames, cfg.t_init)
    return None


def run_mains(frames, geometry, cfg=FilterConfig(), use_mag=True, use_baro=True, use_fix=True,
              clone=False, sink=None):
    """Run MAINS over a frame list. Returns the filter (trajectory, odometry, state)."""
    frames = list(frames)
    f = InertialMagneticFilter(geometry, cfg, clone=clone, use_mag=use_mag, use_baro=use_baro,
                               use_fix=use_fix, sink=sink)
    f.start(frames[0], initial_attitude(frames, cfg) if use_fix else coarse_alignment(frames, cfg.t_init))
    for fr in frames[1:]:
        f.step(fr)
    return f


def emit_odometry(frames, geometry, cfg=FilterConfig(), use_baro=True, use_fix=True, sink=None):
    """MAINS with past-pose augmentation; returns (increments, filter)."""
    f = run_mains(frames, geometry, cfg, use_baro=use_baro, use_fix=use_fix, clone=True, sink=sink)
    return f.odometry, f


def strapdown_trajectory(frames, p0, q0, v0=None, gravity=9.81):
    """Pure inertial dead reckoning (no updates, zero biases) over the frames."""
    x = NavState(np.array(p0, float), np.zeros(3) if v0 is None else np.array(v0, float),
                 np.array(q0, float))
    rows = [(frames[0].t, x.p.copy(), x.q.copy(), np.zeros(6), np.zeros(3), False)]
    u = frames[0].imu
    t = frames[0].t
    for f in frames[1:]:
        dt = f.t - t
        if dt > 0:
            x = ins_mechanization(x, u, dt, gravity)
            t = f.t
        if f.imu is not None:
            u = f.imu
        rows.append((t, x.p.copy(), x.q.copy(), np.zeros(6), np.zeros(3), False))
    return Trajectory.from_rows(rows)
