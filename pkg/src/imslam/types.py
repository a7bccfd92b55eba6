"""Plain record types passed between the filters, the simulator and the harness."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import IDENTITY


@dataclass(frozen=True)
class ImuSample:
    t: float
    acc: np.ndarray   # specific force, m/s^2, body frame
    gyro: np.ndarray  # angular rate, rad/s, body frame


@dataclass(frozen=True)
class BaroSample:
    t: float
    altitude: float   # m, offset-corrected


@dataclass(frozen=True)
class PoseFix:
    p: np.ndarray
    q: np.ndarray
    sigma_p: float = 0.005
    sigma_att: float = 0.005


@dataclass(frozen=True)
class SensorFrame:
    t: float
    imu: ImuSample | None = None
    mag: np.ndarray | None = None        # (N, 3) uT, body frame
    baro: BaroSample | None = None
    pose_fix: PoseFix | None = None

    def __post_init__(self):
        if self.imu is None and self.mag is None and self.baro is None and self.pose_fix is None:
            raise ValueError(f"sensor frame at t={self.t} carries no payload")


@dataclass
class NavState:
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: IDENTITY.copy())
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self):
        return NavState(self.p.copy(), self.v.copy(), self.q.copy(), self.ba.copy(), self.bg.copy())


@dataclass
class OdometryIncrement:
    """Relative pose between clone epochs ``i`` and ``j``.

    ``dp`` is the navigation-frame displacement ``p_j - p_i`` and ``dq`` is
    ``q_i* ⊗ q_j``. ``cov`` is the 6x6 covariance of ``(dp error, eps)`` where
    the rotation error enters on the left: ``dq_true = Exp(eps) ⊗ dq``.
    """
    t_i: float
    t_j: float
    i: int
    j: int
    dp: np.ndarray
    dq: np.ndarray
    cov: np.ndarray

    @classmethod
    def identity(cls, t=0.0, k=0):
        return cls(t, t, k, k, np.zeros(3), IDENTITY.copy(), np.zeros((6, 6)))


@dataclass
class Trajectory:
    """Per-epoch estimates. ``cov_diag`` holds position then attitude variances.

    ``shift`` is the position correction applied by measurement updates at
    that epoch and ``fused`` marks epochs where the fused global/local model
    was used.
    """
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    cov_diag: np.ndarray
    shift: np.ndarray
    fused: np.ndarray

    def __len__(self):
        return len(self.t)

    @classmethod
    def from_rows(cls, rows):
        if not rows:
            return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 6)),
                       np.zeros((0, 3)), np.zeros(0, dtype=bool))
        t, p, q, c, s, f = zip(*rows)
        return cls(np.array(t), np.array(p), np.array(q), np.array(c), np.array(s),
                   np.array(f, dtype=bool))
