"""Command-line entry point: ``imslam {simulate,ingest,run,metrics,suite}``."""

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, dump_config, load_config
from .dataset import ingest_dataset, read_trajectory, write_dataset, write_trajectory
from .eskf import DiagnosticWriter
from .gp_field import export_map
from .mains import write_odometry
from .metrics import compute_metrics
from .sim import build_scenario, write_truth
from .suite import (
    SYSTEMS,
    domain_extent,
    filter_domain,
    run_suite,
    run_system,
    scaled_filter_config,
    write_suite,
)

log = logging.getLogger("imslam")


def _config(args):
    return load_config(args.config) if getattr(args, "config", None) else Config()


def _manifest(outdir, verb, cfg, extra):
    data = {"verb": verb, "version": __version__, "config_fingerprint": cfg.fingerprint(),
            "config": cfg.to_dict()}
    data.update(extra)
    (outdir / "manifest.json").write_text(json.dumps(data, indent=1, sort_keys=True), encoding="utf-8")


def cmd_simulate(args):
    cfg = _config(args)
    sim_cfg = dataclasses.replace(cfg.sim, imu_count=args.imu_count)
    scen = build_scenario(args.scenario, args.seed, _geometry(), sim_cfg, duration=args.duration)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out / "dataset.csv", scen.frames, _geometry(), truth=(scen.truth.p, scen.truth.q),
                  domain=domain_extent(scen.world.domain))
    write_truth(out / "truth.npz", scen.truth, scen.world)
    _manifest(out, "simulate", cfg, {"scenario": args.scenario, "seed": args.seed,
                                     "imu_count": args.imu_count, "frames": len(scen.frames),
                                     "files": ["dataset.csv", "truth.npz"]})
    print(out / "dataset.csv")
    return 0


def cmd_ingest(args):
    ds = ingest_dataset(args.path, imu_count=args.imu_count)
    n_mag = sum(f.mag is not None for f in ds.frames)
    n_baro = sum(f.baro is not None for f in ds.frames)
    n_fix = sum(f.pose_fix is not None for f in ds.frames)
    print(json.dumps({"frames": len(ds.frames), "duration_s": ds.duration,
                      "magnetometers": ds.geometry.n, "mag_frames": n_mag, "baro_samples": n_baro,
                      "pose_fixes": n_fix, "ground_truth": ds.truth is not None}, indent=1))
    return 0


def _geometry():
    from .mains import default_array
    return default_array()


def cmd_run(args):
    cfg = _config(args)
    if args.dataset:
        ds = ingest_dataset(args.dataset, t_init=cfg.filter.t_init, imu_count=args.imu_count)
        frames, geometry = ds.frames, ds.geometry
        truth = (ds.truth.t, ds.truth.p, ds.truth.q) if ds.truth is not None else None
        extent = ds.domain
        if extent is None:
            # size the map around a MAINS pass when the header has no extent
            est = run_system("mains", frames, geometry, None, cfg.filter).trajectory.p
            lo, hi = est.min(axis=0), est.max(axis=0)
            half = 0.5 * (hi - lo) * 1.2 + 2.0 * cfg.sim.l_se
            extent = np.concatenate([0.5 * (lo + hi), half])
        source = {"dataset": str(args.dataset)}
    else:
        sim_cfg = dataclasses.replace(cfg.sim, imu_count=args.imu_count)
        geometry = _geometry()
        scen = build_scenario(args.scenario, args.seed, geometry, sim_cfg, duration=args.duration)
        frames = scen.frames
        truth = (scen.truth.t, scen.truth.p, scen.truth.q)
        extent = domain_extent(scen.world.domain)
        source = {"scenario": args.scenario, "seed": args.seed}
    domain = filter_domain(extent, cfg.suite.m_filter, cfg.sim)
    fcfg = scaled_filter_config(cfg.filter, args.imu_count)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with DiagnosticWriter(out / "diagnostics.jsonl") as sink:
        res = run_system(args.system, frames, geometry, domain, fcfg, use_baro=not args.no_baro,
                         sink=sink)
    elapsed = time.perf_counter() - t0
    files = ["trajectory.csv", "diagnostics.jsonl"]
    write_trajectory(out / "trajectory.csv", res.trajectory)
    if res.odometry:
        write_odometry(out / "odometry.jsonl", res.odometry)
        files.append("odometry.jsonl")
    if res.eta is not None:
        export_map(out / "map", domain, res.eta, res.eta_var, grid_spacing=0.25)
        files += ["map.npz", "map_grid.csv"]
    if res.jumps is not None:
        jumps = {k: {kk: vv for kk, vv in v.items() if kk != "values"} for k, v in res.jumps.items()}
        (out / "jumps.json").write_text(json.dumps(jumps, indent=1, sort_keys=True), encoding="utf-8")
        files.append("jumps.json")
    if truth is not None:
        labels = dict(source, system=args.system, baro=not args.no_baro, imu_count=args.imu_count)
        rep = compute_metrics(res.trajectory.t, res.trajectory.p, res.trajectory.q, *truth,
                              fingerprint=cfg.fingerprint(), labels=labels)
        (out / "report.json").write_text(rep.to_json(), encoding="utf-8")
        files.append("report.json")
        print(f"{args.system}: horizontal {rep.horizontal:.3f} m, vertical {rep.vertical:.3f} m, "
              f"yaw {rep.yaw_deg:.2f} deg")
    (out / "runtime.json").write_text(json.dumps({"seconds": elapsed}), encoding="utf-8")
    _manifest(out, "run", cfg, dict(source, system=args.system, baro=not args.no_baro,
                                    imu_count=args.imu_count, files=files))
    return 0


def cmd_metrics(args):
    traj = read_trajectory(args.trajectory)
    if args.truth.endswith(".npz"):
        with np.load(args.truth) as z:
            truth = (z["t"], z["p"], z["q"])
    else:
        ds = ingest_dataset(args.truth)
        if ds.truth is None:
            print("dataset has no ground truth columns", file=sys.stderr)
            return 2
        truth = (ds.truth.t, ds.truth.p, ds.truth.q)
    rep = compute_metrics(traj.t, traj.p, traj.q, *truth)
    print(rep.to_json(series=args.series))
    return 0


def cmd_suite(args):
    cfg = _config(args)

    def progress(key, rep):
        log.info("%s: h=%.3f v=%.3f", key, rep.horizontal, rep.vertical)

    res = run_suite(cfg, duration=args.duration, progress=progress)
    out = write_suite(res, args.out)
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    _manifest(out, "suite", cfg, {"files": ["reports.json", "boxplot.csv", "runtime.json"]
                                  + [f"table_{k}.md" for k in sorted(res.tables)]})
    for name, text in sorted(res.tables.items()):
        print(f"## {name}\n{text}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="imslam", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("simulate", help="write a synthetic dataset with truth")
    s.add_argument("--scenario", default="loop", choices=["loop", "spiral", "long-corridor"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duration", type=float)
    s.add_argument("--imu-count", type=int, default=1)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ingest", help="validate a dataset and print a summary")
    s.add_argument("path")
    s.add_argument("--imu-count", type=int, default=1)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("run", help="run one system on a dataset or a fresh simulation")
    s.add_argument("dataset", nargs="?")
    s.add_argument("--scenario", default="loop", choices=["loop", "spiral", "long-corridor"])
    s.add_argument("--duration", type=float)
    s.add_argument("--system", choices=SYSTEMS, default="tight")
    s.add_argument("--no-baro", action="store_true")
    s.add_argument("--imu-count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("metrics", help="end errors of a trajectory CSV against truth")
    s.add_argument("trajectory")
    s.add_argument("truth", help="dataset CSV with gt_* columns or truth .npz")
    s.add_argument("--series", action="store_true")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("suite", help="run the comparison suite from a config file")
    s.add_argument("--config")
    s.add_argument("--duration", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_suite)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        log.debug("command failed", exc_info=True)
        print(f"imslam {args.verb}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
