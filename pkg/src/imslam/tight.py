"""Tightly coupled inertial-magnetic SLAM.

One filter holds the INS states, the local field coefficients ``theta`` and
the global field weights ``eta``. Magnetometer frames normally update
``theta`` only; every ``switch_period``-th frame instead uses the fused
model, where each sensor sees the global field at the array center plus the
local gradient::

    y_i = R^T grad(Psi)(p) eta + grad(theta) r_i
"""

import warnings

import numpy as np

from . import eskf
from .config import FilterConfig
from .geometry import rotation_matrix, skew
from .gp_field import OutOfDomainWarning, field_hessians, field_regressors
from .local_field import field_gradient, regressor

_PHI0 = regressor(np.zeros(3))


class FusedArrayModel(eskf.MeasurementModel):
    name = "fused"
    blocks = ("p", "q", "theta", "eta")

    def __init__(self, geometry, domain, sigma_mag):
        self.geometry = geometry
        self.domain = domain
        n = geometry.n
        self.R = sigma_mag ** 2 * np.eye(3 * n)
        self._dphi = np.vstack([regressor(r) - _PHI0 for r in geometry.positions])

    def _global(self, state):
        p = state["p"]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OutOfDomainWarning)
            B = field_regressors(self.domain, p)[0]
            H = field_hessians(self.domain, state["eta"], p)[0]
        return B, H

    def predict(self, state):
        B, _ = self._global(state)
        Rt = rotation_matrix(state["q"]).T
        center = Rt @ (B @ state["eta"])
        local = self.geometry.positions @ field_gradient(state["theta"]).T
        return (center[None, :] + local).reshape(-1)

    def jacobian(self, state):
        B, Hs = self._global(state)
        Rt = rotation_matrix(state["q"]).T
        x = B @ state["eta"]
        n = self.geometry.n
        top = np.hstack([Rt @ Hs, skew(Rt @ x)])
        J = np.empty((3 * n, 6 + 8 + self.domain.dim))
        J[:, 0:6] = np.tile(top, (n, 1))
        J[:, 6:14] = self._dphi
        J[:, 14:] = np.tile(Rt @ B, (n, 1))
        return J


def fused_measurement(geometry, domain, sigma_mag=0.5):
    return FusedArrayModel(geometry, domain, sigma_mag)


def run_tight_slam(frames, geometry, domain, cfg=FilterConfig(), use_baro=True, use_fix=True,
                   switch_period=None, sink=None):
    """Run the tightly coupled filter; returns the filter object."""
    from .mains import InertialMagneticFilter, coarse_alignment, initial_attitude

    frames = list(frames)
    f = InertialMagneticFilter(geometry, cfg, domain=domain, use_baro=use_baro, use_fix=use_fix,
                               sink=sink, switch_period=switch_period)
    q0 = initial_attitude(frames, cfg) if use_fix else coarse_alignment(frames, cfg.t_init)
    f.start(frames[0], q0)
    for fr in frames[1:]:
        f.step(fr)
    return f


def position_jump_metric(trajectory):
    """Update-induced position jumps split by fused vs ordinary epochs.

    Returns a dict with the jump magnitudes and their summary statistics
    for each class.
    """
    jumps = np.linalg.norm(np.asarray(trajectory.shift, dtype=float).reshape(-1, 3), axis=1)
    fused = np.asarray(trajectory.fused, dtype=bool)
    out = {}
    for name, sel in (("fused", fused), ("ordinary", ~fused)):
        j = jumps[sel]
        out[name] = {
            "count": int(j.size),
            "median": float(np.median(j)) if j.size else 0.0,
            "mean": float(j.mean()) if j.size else 0.0,
            "max": float(j.max()) if j.size else 0.0,
            "values": j,
        }
    return out
