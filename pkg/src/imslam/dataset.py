"""Dataset files: one CSV per sequence with a commented header.

Header lines start with ``#`` and hold ``key: value`` pairs::

    # format: imslam-csv 1
    # units: t=s acc=m/s^2 gyro=rad/s mag=uT baro=m pos=m
    # array: x y z; x y z; ...        sensor positions, body frame, meters
    # domain: cx cy cz lx ly lz       optional mapping cuboid
    # baro_corrected: 0

Then a column row and one data row per epoch. Required columns are ``t``,
``ax ay az gx gy gz`` and ``mag_{i}_{x|y|z}`` for every sensor; ``baro``,
``fix_*`` (pose fix) and ``gt_*`` (ground truth) are optional. Extra IMU
channels ``imu{j}_ax`` ... ``imu{j}_gz`` may be present for averaging.
Empty cells mean "no sample at this epoch".
"""

import csv
import math
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import quat_normalize
from .mains import ArrayGeometry
from .types import BaroSample, ImuSample, PoseFix, SensorFrame

FORMAT = "imslam-csv 1"
UNITS = "t=s acc=m/s^2 gyro=rad/s mag=uT baro=m pos=m"
IMU_COLS = ["ax", "ay", "az", "gx", "gy", "gz"]
FIX_COLS = ["fix_px", "fix_py", "fix_pz", "fix_qw", "fix_qx", "fix_qy", "fix_qz",
            "fix_sigma_p", "fix_sigma_att"]
GT_COLS = ["gt_px", "gt_py", "gt_pz", "gt_qw", "gt_qx", "gt_qy", "gt_qz"]


class SchemaMismatch(ValueError):
    pass


class NonMonotoneTime(ValueError):
    pass


class MissingCalibration(ValueError):
    pass


@dataclass
class GroundTruth:
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def at(self, times):
        """Positions (linear) and attitudes (slerp) at the requested times."""
        from scipy.spatial.transform import Rotation, Slerp
        times = np.clip(np.asarray(times, dtype=float), self.t[0], self.t[-1])
        p = np.column_stack([np.interp(times, self.t, self.p[:, d]) for d in range(3)])
        rot = Rotation.from_quat(self.q[:, [1, 2, 3, 0]])
        qs = Slerp(self.t, rot)(times).as_quat()[:, [3, 0, 1, 2]]
        qs[qs[:, 0] < 0] *= -1.0
        return p, qs


@dataclass
class Dataset:
    frames: list
    geometry: ArrayGeometry
    truth: GroundTruth | None = None
    domain: np.ndarray | None = None   # (cx, cy, cz, lx, ly, lz)
    meta: dict | None = None

    @property
    def duration(self):
        return self.frames[-1].t - self.frames[0].t if self.frames else 0.0


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_dataset(path, frames, geometry, truth=None, domain=None, baro_corrected=False):
    """Write frames (and optional truth arrays ``(p, q)`` per frame) to CSV."""
    n = geometry.n
    mag_cols = [f"mag_{i + 1}_{a}" for i in range(n) for a in "xyz"]
    cols = ["t"] + IMU_COLS + mag_cols + ["baro"] + FIX_COLS + (GT_COLS if truth is not None else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# format: {FORMAT}\n")
        fh.write(f"# units: {UNITS}\n")
        fh.write("# array: " + "; ".join(" ".join(repr(float(c)) for c in r)
                                        for r in geometry.positions) + "\n")
        if domain is not None:
            fh.write("# domain: " + " ".join(repr(float(c)) for c in domain) + "\n")
        fh.write(f"# baro_corrected: {int(baro_corrected)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for k, f in enumerate(frames):
            row = [repr(float(f.t))]
            row += [_fmt(v) for v in np.concatenate([f.imu.acc, f.imu.gyro])] if f.imu else [""] * 6
            row += [_fmt(v) for v in np.asarray(f.mag).reshape(-1)] if f.mag is not None else [""] * (3 * n)
            row.append(_fmt(f.baro.altitude) if f.baro else "")
            if f.pose_fix is not None:
                fx = f.pose_fix
                row += [_fmt(v) for v in np.concatenate([fx.p, fx.q, [fx.sigma_p, fx.sigma_att]])]
            else:
                row += [""] * len(FIX_COLS)
            if truth is not None:
                row += [_fmt(v) for v in np.concatenate([truth[0][k], truth[1][k]])]
            w.writerow(row)


def _parse_header(lines):
    meta = {}
    for line in lines:
        body = line[1:].strip()
        if ":" in body:
            k, v = body.split(":", 1)
            meta[k.strip()] = v.strip()
    return meta


def _parse_array(text):
    try:
        rows = [[float(x) for x in part.split()] for part in text.split(";") if part.strip()]
        return ArrayGeometry(np.array(rows))
    except ValueError as exc:
        raise MissingCalibration(f"unreadable array geometry: {exc}") from None


def ingest_dataset(path, fmt="imslam", correct_baro=True, t_init=5.0, imu_count=1):
    """Read a sequence into time-sorted sensor frames.

    The barometer offset is removed (unless the header marks it as already
    corrected) by matching the mean reading over the first ``t_init``
    seconds to the mean pose-fix altitude there, or to zero without fixes.
    """
    if fmt != "imslam":
        raise SchemaMismatch(f"no converter for dataset format {fmt!r}")
    with open(path, encoding="utf-8") as fh:
        header, body = [], []
        for line in fh:
            (header if line.startswith("#") and not body else body).append(line)
    meta = _parse_header(header)
    if meta.get("format") != FORMAT:
        raise SchemaMismatch(f"{path}: expected format {FORMAT!r}, got {meta.get('format')!r}")
    if "units" not in meta:
        raise SchemaMismatch(f"{path}: units not declared in header")
    if "array" not in meta:
        raise MissingCalibration(f"{path}: no magnetometer array geometry in header")
    geometry = _parse_array(meta["array"])
    domain = np.array([float(x) for x in meta["domain"].split()]) if "domain" in meta else None

    reader = csv.reader(body)
    try:
        cols = next(reader)
    except StopIteration:
        raise SchemaMismatch(f"{path}: missing column row") from None
    pos = {c: i for i, c in enumerate(cols)}
    n = geometry.n
    mag_cols = [f"mag_{i + 1}_{a}" for i in range(n) for a in "xyz"]
    missing = [c for c in ["t"] + IMU_COLS + mag_cols if c not in pos]
    if missing:
        raise SchemaMismatch(f"{path}: missing columns {missing[:6]}")
    extra_mag = [c for c in cols if re.fullmatch(r"mag_\d+_[xyz]", c) and c not in mag_cols]
    if extra_mag:
        raise SchemaMismatch(f"{path}: magnetometer columns {extra_mag[:3]} exceed the array geometry")
    imu_sets = [IMU_COLS]
    j = 1
    while all(f"imu{j}_{c}" in pos for c in IMU_COLS):
        imu_sets.append([f"imu{j}_{c}" for c in IMU_COLS])
        j += 1
    if imu_count > 1:
        if len(imu_sets) < imu_count + 1:
            raise SchemaMismatch(f"{path}: {imu_count} IMU channels requested, "
                                 f"{len(imu_sets) - 1} present")
        imu_sets = imu_sets[1:imu_count + 1]
    else:
        imu_sets = imu_sets[:1]

    rows = []
    for lineno, row in enumerate(reader, start=len(header) + 2):
        if not row:
            continue
        if len(row) != len(cols):
            raise SchemaMismatch(f"{path}:{lineno}: {len(row)} fields, expected {len(cols)}")
        rows.append((lineno, [float(x) if x != "" else math.nan for x in row]))
    if not rows:
        raise SchemaMismatch(f"{path}: no data rows")
    data = np.array([r for _, r in rows])
    t = data[:, pos["t"]]
    bad = np.nonzero(np.diff(t) <= 0)[0]
    if bad.size:
        k = bad[0] + 1
        raise NonMonotoneTime(f"{path}:{rows[k][0]}: t={t[k]!r} does not follow t={t[k - 1]!r}")

    def block(names):
        return data[:, [pos[c] for c in names]]

    imu = np.mean([block(s) for s in imu_sets], axis=0)
    mag = block(mag_cols).reshape(-1, n, 3)
    baro = data[:, pos["baro"]] if "baro" in pos else np.full(len(t), math.nan)
    fix = block(FIX_COLS) if all(c in pos for c in FIX_COLS) else None
    gt = block(GT_COLS) if all(c in pos for c in GT_COLS) else None

    baro_corrected = meta.get("baro_corrected", "0") == "1"
    if correct_baro and not baro_corrected:
        early = (t - t[0] <= t_init) & np.isfinite(baro)
        if early.any():
            ref = 0.0
            if fix is not None:
                fe = (t - t[0] <= t_init) & np.isfinite(fix[:, 2])
                if fe.any():
                    ref = float(np.mean(fix[fe, 2]))
            baro = baro - (np.mean(baro[early]) - ref)

    frames = []
    for k in range(len(t)):
        tk = float(t[k])
        u = ImuSample(tk, imu[k, :3], imu[k, 3:]) if np.all(np.isfinite(imu[k])) else None
        m = mag[k] if np.all(np.isfinite(mag[k])) else None
        b = BaroSample(tk, float(baro[k])) if np.isfinite(baro[k]) else None
        pf = None
        if fix is not None and np.all(np.isfinite(fix[k, :7])):
            sp = fix[k, 7] if np.isfinite(fix[k, 7]) else 0.005
            sa = fix[k, 8] if np.isfinite(fix[k, 8]) else 0.005
            q = fix[k, 3:7].copy()
            if abs(q @ q - 1.0) > 1e-9:
                q = quat_normalize(q)
            pf = PoseFix(fix[k, :3].copy(), q, float(sp), float(sa))
        if u is None and m is None and b is None and pf is None:
            continue
        frames.append(SensorFrame(tk, u, m, b, pf))
    truth = None
    if gt is not None:
        ok = np.all(np.isfinite(gt), axis=1)
        truth = GroundTruth(t[ok], gt[ok, :3], gt[ok, 3:7])
    return Dataset(frames, geometry, truth, domain, meta)


TRAJ_COLS = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz",
             "var_px", "var_py", "var_pz", "var_ax", "var_ay", "var_az", "jump", "fused"]


def write_trajectory(path, traj):
    """Trajectory CSV; ``jump`` is the update-induced position change at the
    epoch and ``fused`` marks fused-model epochs."""
    jump = np.linalg.norm(traj.shift, axis=1) if len(traj) else np.zeros(0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJ_COLS)
        for k in range(len(traj)):
            w.writerow([repr(float(traj.t[k]))]
                       + [repr(float(v)) for v in np.concatenate([traj.p[k], traj.q[k], traj.cov_diag[k]])]
                       + [repr(float(jump[k])), int(traj.fused[k])])


def read_trajectory(path):
    from .types import Trajectory
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    shift = np.zeros((len(data), 3))
    shift[:, 0] = data[:, 14]
    return Trajectory(data[:, 0], data[:, 1:4], data[:, 4:8], data[:, 8:14], shift,
                      data[:, 15].astype(bool))
