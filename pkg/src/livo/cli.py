"""Command-line entry points: simulate, run, eval, export-ply."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np


def _cmd_simulate(args) -> int:
    from . import dataio, sim

    rig = sim.SensorRig(lidar_sweep_hz=args.lidar_hz, camera_hz=args.camera_hz,
                        time_offset=args.time_offset, grayscale=args.grayscale)
    if args.preset == "loop":
        traj = sim.smooth_loop_trajectory(radius=args.radius, duration=args.duration)
        scene = sim.Scene.box_room()
    elif args.preset == "line":
        traj = sim.line_trajectory([args.speed, 0.0, 0.0])
        scene = sim.Scene.box_room()
    else:
        traj = sim.static_trajectory()
        scene = sim.Scene.corner()

    if args.noise == "nominal":
        noise = sim.SensorNoise(gyro_density=1e-3, accel_density=1e-2,
                                range_sigma=0.02, pixel_sigma=2.0, seed=args.seed)
    else:
        noise = sim.SensorNoise(seed=args.seed)

    t0, t1 = 0.0, args.duration
    sweeps = sim.sample_lidar(traj, rig, scene, noise, t0, t1)
    frames = sim.sample_camera(traj, rig, scene, noise, t0, t1)
    imu = sim.sample_imu(traj, rig, noise, t0, t1)

    gt_stamps = [s.end for s in sweeps]
    gt_poses = [traj.pose_at(t) for t in gt_stamps]
    calib = {
        "lidar_sweep_hz": rig.lidar_sweep_hz, "camera_hz": rig.camera_hz,
        "imu_rate_hz": rig.imu_rate_hz,
        "fx": rig.fx, "fy": rig.fy, "cx": rig.cx, "cy": rig.cy,
        "width": float(rig.width), "height": float(rig.height),
        "time_offset": rig.time_offset,
        "lidar_to_body": dataio.transform_to_vec(rig.lidar_to_body),
        "camera_to_body": dataio.transform_to_vec(rig.camera_to_body),
        "gravity": rig.gravity,
    }
    dataio.write_dataset(args.output, sweeps, frames, imu, calib,
                         gt_stamps=gt_stamps, gt_poses=gt_poses)
    n_pts = sum(len(s.points) for s in sweeps)
    print(f"wrote {args.output}: {len(sweeps)} sweeps ({n_pts} points), "
          f"{len(frames)} images, {len(imu)} imu samples")
    return 0


def _cmd_run(args) -> int:
    from . import dataio
    from .pipeline import PipelineConfig, run_pipeline

    ds = dataio.read_dataset(args.dataset)
    config = PipelineConfig.from_calib(ds.calib, use_vision=not args.no_vision)
    result = run_pipeline(ds.sweeps, ds.frames, ds.imu, config)

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_tum(out / "trajectory.txt", result.stamps, result.poses)
    positions, colors, weights, rendered = result.world_map.all_points()
    np.savez(out / "map_points.npz", positions=positions, colors=colors,
             weights=weights, rendered=rendered)
    cam = result.camera
    dataio.write_config(out / "camera.txt", {
        "time_offset": cam.time_offset,
        "camera_to_body": dataio.transform_to_vec(cam.extrinsic),
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
    })
    total, mean, worst = result.timing()
    stages = result.timing_breakdown()
    aligned = sum(1 for r in result.records if r.aligned)
    stats = {
        "n_packets": float(len(result.records)),
        "n_aligned": float(aligned),
        "n_map_points": float(len(positions)),
        "dropped_images": float(result.dropped_images),
        "total_s": total, "mean_packet_s": mean, "max_packet_s": worst,
        "mean_lidar_s": stages["lidar"], "mean_vision_s": stages["vision"],
    }
    dataio.write_config(out / "stats.txt", stats)
    print(f"{len(result.records)} packets ({aligned} aligned), "
          f"{len(positions)} map points, {mean * 1e3:.1f} ms/packet "
          f"(lidar {stages['lidar'] * 1e3:.1f} + vision "
          f"{stages['vision'] * 1e3:.1f}) -> {out}")
    return 0


def _cmd_eval_ate(args) -> int:
    from . import dataio, evaluation

    est_stamps, est_pos, _ = dataio.read_tum(args.estimate)
    gt_stamps, gt_pos, _ = dataio.read_tum(args.reference)
    result = evaluation.compute_ate(est_stamps, est_pos, gt_stamps, gt_pos,
                                    max_dt=args.max_dt)
    print(f"ate_rmse_m {result.rmse:.6f}  (pairs {result.n_pairs})")
    return 0


def _cmd_eval_e2e(args) -> int:
    from . import dataio, evaluation

    _, positions, _ = dataio.read_tum(args.estimate)
    print(f"end_to_end_m {evaluation.end_to_end_error(positions):.6f}")
    return 0


def _cmd_export_ply(args) -> int:
    from . import dataio

    data = np.load(Path(args.run_dir) / "map_points.npz")
    positions, colors = data["positions"], data["colors"]
    rendered = data["rendered"].astype(bool)
    if not args.include_unrendered:
        positions, colors = positions[rendered], colors[rendered]
    out = args.output or str(Path(args.run_dir) / "map.ply")
    dataio.write_ply(out, positions, colors)
    print(f"wrote {out}: {len(positions)} points")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="livo",
        description="LiDAR-inertial odometry with camera-refined colored mapping")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--preset", choices=["loop", "line", "static"], default="loop")
    p.add_argument("--duration", type=float, default=30.0)
    p.add_argument("--radius", type=float, default=4.0)
    p.add_argument("--speed", type=float, default=1.0)
    p.add_argument("--lidar-hz", type=float, default=10.0)
    p.add_argument("--camera-hz", type=float, default=15.0)
    p.add_argument("--time-offset", type=float, default=0.0)
    p.add_argument("--noise", choices=["ideal", "nominal"], default="ideal")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grayscale", action="store_true")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("run", help="run odometry and mapping over a dataset")
    p.add_argument("dataset")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--no-vision", action="store_true")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("eval", help="trajectory metrics")
    esub = p.add_subparsers(dest="metric", required=True)
    pa = esub.add_parser("ate", help="absolute error vs a reference, after alignment")
    pa.add_argument("estimate")
    pa.add_argument("reference")
    pa.add_argument("--max-dt", type=float, default=0.010)
    pa.set_defaults(fn=_cmd_eval_ate)
    pe = esub.add_parser("e2e", help="distance between first and last poses")
    pe.add_argument("estimate")
    pe.set_defaults(fn=_cmd_eval_e2e)

    p = sub.add_parser("export-ply", help="convert a run's map to a PLY cloud")
    p.add_argument("run_dir")
    p.add_argument("-o", "--output")
    p.add_argument("--include-unrendered", action="store_true")
    p.set_defaults(fn=_cmd_export_ply)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # surface one line, not a stack trace
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
