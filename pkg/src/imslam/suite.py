"""Run orchestration: one system on one sequence, and the full comparison suite."""

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import Config, FilterConfig
from .gp_field import GpDomain, prior_covariance
from .loose import run_loose
from .mains import default_array, run_mains, strapdown_trajectory
from .metrics import compute_metrics
from .sim import build_scenario
from .tight import position_jump_metric, run_tight_slam

log = logging.getLogger(__name__)

SYSTEMS = ("ins", "mains", "loose", "tight")


@dataclass
class RunOutput:
    system: str
    trajectory: object
    odometry: list = field(default_factory=list)
    eta: np.ndarray | None = None
    eta_var: np.ndarray | None = None
    domain: GpDomain | None = None
    jumps: dict | None = None


def filter_domain(extent, m, cfg_sim):
    """Mapping cuboid from ``(cx, cy, cz, lx, ly, lz)`` with ``m`` modes."""
    extent = np.asarray(extent, dtype=float)
    return GpDomain.build(extent[3:], m, cfg_sim.sigma_lin, cfg_sim.sigma_se, cfg_sim.l_se,
                          center=extent[:3])


def domain_extent(domain):
    return np.concatenate([domain.center, domain.half_lengths])


def scaled_filter_config(cfg, imu_count):
    """Filter noise densities for an average of ``imu_count`` IMUs."""
    k = max(1, int(imu_count))
    if k == 1:
        return cfg
    return dataclasses.replace(cfg, sigma_acc=cfg.sigma_acc / np.sqrt(k),
                               sigma_gyro=cfg.sigma_gyro / np.sqrt(k))


def run_system(system, frames, geometry, domain, cfg=FilterConfig(), use_baro=True, sink=None):
    """Run one estimator over a frame list."""
    if system == "ins":
        f0 = frames[0]
        if f0.pose_fix is not None:
            p0, q0 = f0.pose_fix.p, f0.pose_fix.q
        else:
            from .mains import coarse_alignment
            p0, q0 = np.zeros(3), coarse_alignment(frames, cfg.t_init)
        return RunOutput(system, strapdown_trajectory(frames, p0, q0, gravity=cfg.gravity))
    if system == "mains":
        f = run_mains(frames, geometry, cfg, use_baro=use_baro, sink=sink)
        return RunOutput(system, f.trajectory())
    if system == "loose":
        slam, front = run_loose(frames, geometry, domain, cfg, use_baro=use_baro, sink=sink)
        return RunOutput(system, slam.trajectory(), front.odometry, slam.state["eta"].copy(),
                         np.diag(slam.state.marginal("eta")).copy(), domain)
    if system == "tight":
        f = run_tight_slam(frames, geometry, domain, cfg, use_baro=use_baro, sink=sink)
        traj = f.trajectory()
        return RunOutput(system, traj, eta=f.state["eta"].copy(),
                         eta_var=np.diag(f.state.marginal("eta")).copy(), domain=domain,
                         jumps=position_jump_metric(traj))
    raise ValueError(f"unknown system {system!r}; choose from {SYSTEMS}")


def report_for(out, truth_t, truth_p, truth_q, fingerprint, labels):
    tr = out.trajectory
    return compute_metrics(tr.t, tr.p, tr.q, truth_t, truth_p, truth_q, fingerprint, labels)


@dataclass
class SuiteResult:
    reports: list
    tables: dict
    runtime: dict

    def reports_json(self):
        return json.dumps([r.summary() for r in self.reports], sort_keys=True, indent=1)

    def boxplot_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "system", "baro", "imu_count", "seed", "horizontal", "vertical", "yaw_deg"])
        for r in self.reports:
            lb = r.labels
            w.writerow([lb["scenario"], lb["system"], int(lb["baro"]), lb["imu_count"], lb["seed"],
                        repr(r.horizontal), repr(r.vertical), repr(r.yaw_deg)])
        return buf.getvalue()


def format_table(reports, systems, scenarios):
    """Median end errors as ``horizontal (vertical)`` per system and scenario."""
    lines = ["| system | " + " | ".join(scenarios) + " |",
             "|---" * (len(scenarios) + 1) + "|"]
    for s in systems:
        cells = []
        for sc in scenarios:
            sel = [r for r in reports if r.labels["system"] == s and r.labels["scenario"] == sc]
            if not sel:
                cells.append("-")
                continue
            h = np.median([r.horizontal for r in sel])
            v = np.median([r.vertical for r in sel])
            cells.append(f"{h:.2f} ({v:.2f})")
        lines.append(f"| {s} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def run_suite(cfg=Config(), geometry=None, duration=None, progress=None):
    """Every (scenario, seed, imu count, baro, system) cell of the suite config.

    Returns reports in a deterministic order, one table per (baro, imu count)
    group and wall-clock runtimes kept apart from the reports.
    """
    geometry = geometry or default_array()
    sc_cfg = cfg.suite
    fingerprint = cfg.fingerprint()
    reports, runtime = [], {}
    for name in sc_cfg.scenarios:
        for seed in sc_cfg.seeds:
            for k in sc_cfg.imu_counts:
                sim_cfg = dataclasses.replace(cfg.sim, imu_count=int(k))
                t0 = time.perf_counter()
                scen = build_scenario(name, int(seed), geometry, sim_cfg, duration=duration)
                runtime[f"{name}/{seed}/{k}/simulate"] = time.perf_counter() - t0
                domain = filter_domain(domain_extent(scen.world.domain), sc_cfg.m_filter, cfg.sim)
                fcfg = scaled_filter_config(cfg.filter, k)
                truth = scen.truth
                for baro in sc_cfg.baro:
                    for system in sc_cfg.systems:
                        if system == "ins" and not baro and True in sc_cfg.baro:
                            continue  # the INS baseline ignores the barometer
                        t0 = time.perf_counter()
                        out = run_system(system, scen.frames, geometry, domain, fcfg, use_baro=bool(baro))
                        labels = {"scenario": name, "seed": int(seed), "imu_count": int(k),
                                  "baro": bool(baro), "system": system}
                        reports.append(report_for(out, truth.t, truth.p, truth.q, fingerprint, labels))
                        key = f"{name}/{seed}/{k}/{int(bool(baro))}/{system}"
                        runtime[key] = time.perf_counter() - t0
                        if progress:
                            progress(key, reports[-1])
    tables = {}
    for baro in sc_cfg.baro:
        for k in sc_cfg.imu_counts:
            sel = [r for r in reports if r.labels["imu_count"] == int(k)
                   and (r.labels["baro"] == bool(baro) or r.labels["system"] == "ins")]
            tables[f"baro{int(bool(baro))}_imu{int(k)}"] = format_table(sel, sc_cfg.systems, sc_cfg.scenarios)
    return SuiteResult(reports, tables, runtime)


def write_suite(result, outdir):
    """Reports, tables and box-plot data under ``outdir``; runtimes go to a
    separate file so the report files are reproducible byte for byte."""
    from pathlib import Path
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "reports.json").write_text(result.reports_json(), encoding="utf-8")
    (out / "boxplot.csv").write_text(result.boxplot_csv(), encoding="utf-8")
    for name, text in sorted(result.tables.items()):
        (out / f"table_{name}.md").write_text(text, encoding="utf-8")
    (out / "runtime.json").write_text(json.dumps(result.runtime, indent=1, sort_keys=True),
                                      encoding="utf-8")
    return out


def map_prior(domain):
    return prior_covariance(domain)
