"""End-of-run error metrics and run reports."""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import yaw_from_quat


class NoOverlap(ValueError):
    pass


@dataclass
class RunReport:
    horizontal: float          # m
    vertical: float            # m
    yaw_deg: float             # deg
    t: np.ndarray = field(repr=False)
    horizontal_series: np.ndarray = field(repr=False)
    vertical_series: np.ndarray = field(repr=False)
    yaw_series_deg: np.ndarray = field(repr=False)
    fingerprint: str = ""
    labels: dict = field(default_factory=dict)

    def summary(self):
        return {
            "labels": dict(sorted(self.labels.items())),
            "horizontal": self.horizontal,
            "vertical": self.vertical,
            "yaw_deg": self.yaw_deg,
            "fingerprint": self.fingerprint,
        }

    def to_json(self, series=False):
        d = self.summary()
        if series:
            d["series"] = {
                "t": self.t.tolist(),
                "horizontal": self.horizontal_series.tolist(),
                "vertical": self.vertical_series.tolist(),
                "yaw_deg": self.yaw_series_deg.tolist(),
            }
        return json.dumps(d, sort_keys=True, indent=1)


def _yaw_errors(q_est, q_true):
    ye = np.array([yaw_from_quat(q) for q in q_est])
    yt = np.array([yaw_from_quat(q) for q in q_true])
    d = (ye - yt + math.pi) % (2.0 * math.pi) - math.pi
    return np.degrees(np.abs(d))


def compute_metrics(t, p, q, truth_t, truth_p, truth_q, fingerprint="", labels=None, tol=1e-6):
    """Errors of an estimated trajectory against truth.

    Truth is interpolated (linearly in position, slerp in attitude) at the
    estimate epochs that fall inside its time span; the end errors are taken
    at the last estimate epoch, which must be covered by truth.
    """
    from scipy.spatial.transform import Rotation, Slerp

    t = np.asarray(t, dtype=float)
    truth_t = np.asarray(truth_t, dtype=float)
    if len(t) == 0 or len(truth_t) == 0:
        raise NoOverlap("empty trajectory")
    if t[-1] < truth_t[0] - tol or t[-1] > truth_t[-1] + tol:
        raise NoOverlap(f"estimate ends at t={t[-1]:.3f}, truth covers "
                        f"[{truth_t[0]:.3f}, {truth_t[-1]:.3f}]")
    sel = (t >= truth_t[0] - tol) & (t <= truth_t[-1] + tol)
    ts = np.clip(t[sel], truth_t[0], truth_t[-1])
    tp = np.column_stack([np.interp(ts, truth_t, np.asarray(truth_p)[:, d]) for d in range(3)])
    if len(truth_t) > 1:
        rot = Rotation.from_quat(np.asarray(truth_q)[:, [1, 2, 3, 0]])
        tq = Slerp(truth_t, rot)(ts).as_quat()[:, [3, 0, 1, 2]]
    else:
        tq = np.tile(np.asarray(truth_q)[0], (len(ts), 1))
    ep = np.asarray(p)[sel]
    eq = np.asarray(q)[sel]
    h = np.linalg.norm(ep[:, :2] - tp[:, :2], axis=1)
    v = np.abs(ep[:, 2] - tp[:, 2])
    y = _yaw_errors(eq, tq)
    return RunReport(float(h[-1]), float(v[-1]), float(y[-1]), ts, h, v, y, fingerprint,
                     dict(labels or {}))
