"""Filter and simulation parameters shared by every system, plus the plain
key-value config file format used by the CLI.

Config files are INI-style with sections ``[filter]``, ``[sim]`` and
``[suite]``; keys are the dataclass field names below. Unknown keys are an
error so typos do not silently fall back to defaults.
"""

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


@dataclass(frozen=True)
class FilterConfig:
    gravity: float = 9.81
    # IMU white noise densities and bias random walks
    sigma_acc: float = 0.02          # m/s^2/sqrt(Hz)
    sigma_gyro: float = 0.002        # rad/s/sqrt(Hz)
    sigma_acc_bias: float = 2e-4     # m/s^2/sqrt(s)
    sigma_gyro_bias: float = 2e-5    # rad/s/sqrt(s)
    # local field process noise (random walk on top of exact transport)
    q_field_mean: float = 0.3        # uT/sqrt(s)
    q_field_grad: float = 1.0        # uT/m/sqrt(s)
    sigma_mag: float = 0.5           # uT per axis
    sigma_baro: float = 0.1          # m
    # initial uncertainty
    init_sigma_pos: float = 0.01
    init_sigma_vel: float = 0.05
    init_sigma_tilt: float = 0.02    # rad, roll/pitch from leveling
    init_sigma_yaw: float = 0.5      # rad, used when no pose fix is available
    init_sigma_acc_bias: float = 0.05
    init_sigma_gyro_bias: float = 0.005
    # schedule
    odometry_steps: int = 20         # propagation steps between odometry increments
    switch_period: int = 100         # mag frames between fused-model updates
    t_init: float = 5.0              # s, quasi-static / pose-fix initial segment
    gap_max: float = 0.5             # s
    slam_pose_fix: bool = True       # SLAM back end also consumes pose fixes
    update_form: str = "joseph"
    gate: float = 0.0                # chi-square gate on innovations, 0 = off

    def __post_init__(self):
        if self.odometry_steps < 1:
            raise ValueError("odometry_steps must be >= 1")
        if self.switch_period < 1:
            raise ValueError("switch_period must be >= 1")

    @property
    def gate_or_none(self):
        return self.gate if self.gate > 0 else None


@dataclass(frozen=True)
class SimConfig:
    imu_rate: float = 100.0
    mag_rate: float = 100.0
    baro_rate: float = 10.0
    sigma_acc: float = 0.02
    sigma_gyro: float = 0.002
    sigma_mag: float = 0.5
    sigma_baro: float = 0.1
    acc_bias: float = 0.0            # std of the constant bias draw, m/s^2
    gyro_bias: float = 0.0           # rad/s
    baro_offset: float = 0.0         # m, constant offset removed at ingestion
    pose_fix_duration: float = 5.0   # s of mocap fixes at the start
    pose_fix_rate: float = 10.0
    sigma_fix_pos: float = 0.005
    sigma_fix_att: float = 0.005
    imu_count: int = 1               # averaged IMUs; white noise scales 1/sqrt(k)
    m: int = 250                     # GP modes of the world
    sigma_lin: float = 50.0
    sigma_se: float = 3.5
    l_se: float = 0.7


@dataclass(frozen=True)
class SuiteConfig:
    scenarios: tuple = ("loop",)
    systems: tuple = ("mains", "loose", "tight")
    seeds: tuple = (0,)
    baro: tuple = (True,)
    imu_counts: tuple = (1,)
    m_filter: int = 250


@dataclass(frozen=True)
class Config:
    filter: FilterConfig = field(default_factory=FilterConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)

    def to_dict(self):
        return {
            "filter": dataclasses.asdict(self.filter),
            "sim": dataclasses.asdict(self.sim),
            "suite": {k: list(v) if isinstance(v, tuple) else v
                      for k, v in dataclasses.asdict(self.suite).items()},
        }

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)


def _coerce(kind, text):
    if kind is bool:
        return text.strip().lower() in ("1", "true", "yes", "on")
    if kind is tuple:
        return tuple(_scalar(x) for x in text.replace(",", " ").split())
    return kind(text)


def _scalar(text):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def _section(cls, items):
    types = {f.name: type(f.default) if f.default is not dataclasses.MISSING else None
             for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in items:
        if key not in types:
            raise KeyError(f"unknown config key {key!r} for {cls.__name__}")
        kwargs[key] = _coerce(types[key], text)
    return cls(**kwargs)


def load_config(path=None, text=None):
    parser = configparser.ConfigParser()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    elif text is not None:
        parser.read_string(text)
    known = {"filter": FilterConfig, "sim": SimConfig, "suite": SuiteConfig}
    for name in parser.sections():
        if name not in known:
            raise KeyError(f"unknown config section [{name}]")
    parts = {name: _section(cls, parser.items(name)) if parser.has_section(name) else cls()
             for name, cls in known.items()}
    return Config(**parts)


def dump_config(cfg):
    lines = []
    for name, values in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for k, v in values.items():
            if isinstance(v, list):
                v = " ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
