"""Acceptance checklist for the full toolkit.

Each test prints exactly one `[criterion NN] ... PASS/FAIL` line (visible
under `pytest -s`) and enforces the stated numeric bounds and time budgets.
The 30 s loop dataset and its odometry runs are built once per session and
shared by the accuracy, throughput, and determinism criteria.
"""

import math
import time

import numpy as np
import pytest

from livo.evaluation import compute_ate, end_to_end_error, rigid_align
from livo.geometry import ImuSample, RigidTransform, Rotation, so3_exp
from livo.lio import LioConfig
from livo.pipeline import (PipelineConfig, initial_camera_covariance,
                           run_pipeline)
from livo.sim import (Scene, SensorNoise, SensorRig, oracle_correspondences,
                      sample_camera, sample_imu, sample_lidar,
                      smooth_loop_trajectory)
from livo.sweep import (ImageEvent, LidarPoint, StreamConfig,
                        SweepReconstructor)
from livo.vision import (CameraParams, ImageFrame, VisionConfig,
                         bilinear_sample, params_boxminus, params_boxplus,
                         photometric_system, pnp_system, pnp_update, predict,
                         projection_system, render)

NO_NOISE = SensorNoise()
LOOP_NOISE = SensorNoise(gyro_density=1e-3, accel_density=1e-2,
                         range_sigma=0.02, seed=7)


def report(num, name, ok, detail):
    line = f"[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    assert ok, line


def pipeline_config(rig, use_vision=True):
    return PipelineConfig(
        stream=StreamConfig(lidar_sweep_hz=rig.lidar_sweep_hz,
                            camera_hz=rig.camera_hz),
        lio=LioConfig(gravity=rig.gravity, imu_rate_hz=rig.imu_rate_hz),
        vision=VisionConfig(),
        camera=rig.true_camera_params(),
        lidar_to_body=rig.lidar_to_body,
        use_vision=use_vision)


def simulate_loop(rig, noise, duration=30.0, scene=None):
    traj = smooth_loop_trajectory(radius=4.0, duration=max(30.0, duration))
    scene = scene if scene is not None else Scene.box_room()
    sweeps = sample_lidar(traj, rig, scene, noise, 0.0, duration)
    frames = sample_camera(traj, rig, scene, noise, 0.0, duration)
    imu = sample_imu(traj, rig, noise, 0.0, duration)
    return traj, scene, sweeps, frames, imu


@pytest.fixture(scope="session")
def clean_run():
    rig = SensorRig()
    traj, _, sweeps, frames, imu = simulate_loop(rig, NO_NOISE)
    t0 = time.perf_counter()
    result = run_pipeline(sweeps, frames, imu, pipeline_config(rig))
    return traj, result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def noisy_streams():
    rig = SensorRig()
    traj, _, sweeps, frames, imu = simulate_loop(rig, LOOP_NOISE)
    return rig, traj, sweeps, frames, imu


@pytest.fixture(scope="session")
def noisy_run(noisy_streams):
    rig, traj, sweeps, frames, imu = noisy_streams
    t0 = time.perf_counter()
    result = run_pipeline(sweeps, frames, imu, pipeline_config(rig))
    return traj, result, time.perf_counter() - t0


def ate_against(traj, result):
    gt = np.stack([traj.pose_at(t).translation for t in result.stamps])
    return compute_ate(result.stamps, result.positions, result.stamps, gt).rmse


# ---------------------------------------------------------------------------
# criterion 1: reconstructed sweeps end exactly at image stamps in every
# stream-rate regime, and the estimator state lands on those stamps

def synthetic_stream(lidar_hz, camera_hz, duration):
    events = []
    for k in range(1, int(duration * 200) + 1):
        events.append((k / 200, 0, ImuSample(k / 200, np.zeros(3), np.zeros(3))))
    for k in range(int(duration * 400)):
        t = k / 400
        events.append((t, 1, LidarPoint(position=np.array([1.0, 0, 0]),
                                        stamp=t, intensity=k / 1e6)))
    for k in range(1, int(duration * camera_hz) + 1):
        t = k / camera_hz
        frame = ImageFrame(stamp=t, pixels=np.zeros((2, 2)))
        events.append((t, 2, ImageEvent(stamp=t, frame=frame)))
    events.sort(key=lambda e: (e[0], e[1]))
    return [e[2] for e in events]


def test_criterion_01_alignment_in_all_rate_modes():
    t0 = time.perf_counter()
    worst = 0.0
    for camera_hz in (30.0, 15.0, 4.0):  # above 2x, between 1x and 2x, below
        recon = SweepReconstructor(StreamConfig(lidar_sweep_hz=10.0,
                                                camera_hz=camera_hz))
        packets = []
        for event in synthetic_stream(10.0, camera_hz, 3.0):
            packets.extend(recon.push(event))
        packets.extend(recon.flush())
        assert packets
        image_stamps = {round(k / camera_hz, 12) for k in range(1, 200)}
        for p in packets:
            if p.image is not None:
                gap = abs(p.sweep.end - p.image.stamp)
                worst = max(worst, gap)
                assert gap <= 1e-9
        if camera_hz > 10.0:
            assert all(p.image is not None for p in packets[:-1])

    # estimator stamps must land on the cut stamps in a real run; keep the
    # full scanner density, since 30 Hz cutting leaves each packet only a
    # third of a sweep to register with
    for camera_hz in (30.0, 15.0, 4.0):
        rig = SensorRig(camera_hz=camera_hz)
        traj, _, sweeps, frames, imu = simulate_loop(rig, NO_NOISE,
                                                     duration=1.0)
        result = run_pipeline(sweeps, frames, imu, pipeline_config(rig))
        aligned = [r for r in result.records if r.aligned]
        assert aligned
        for r in aligned:
            gap = abs(r.stamp - r.image_stamp)
            worst = max(worst, gap)
            assert gap <= 1e-9
    elapsed = time.perf_counter() - t0
    report(1, "image-aligned sweep cuts in all rate modes",
           worst <= 1e-9 and elapsed < 5.0,
           f"worst stamp gap {worst:.2e} s, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: re-cutting conserves every point, keeps ends increasing, and
# marks exactly the image-closed packets as aligned, under stream fuzzing

def test_criterion_02_point_conservation_fuzz():
    t0 = time.perf_counter()
    total_points = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        lidar_hz = rng.uniform(2.0, 20.0)
        camera_hz = rng.uniform(1.0, 50.0)
        duration = rng.uniform(0.5, 2.0)
        n = 1000
        stamps = np.sort(rng.uniform(0.0, duration, n))
        events = [(s, 1, LidarPoint(position=rng.uniform(-5, 5, 3), stamp=s,
                                    intensity=i / 1e6))
                  for i, s in enumerate(stamps)]
        imu_rate = rng.uniform(100.0, 400.0)
        events += [(k / imu_rate, 0,
                    ImuSample(k / imu_rate, np.zeros(3), np.zeros(3)))
                   for k in range(1, int(duration * imu_rate) + 1)]
        n_img = int(duration * camera_hz)
        for s in np.sort(rng.uniform(0.0, duration, n_img)):
            frame = ImageFrame(stamp=s, pixels=np.zeros((2, 2)))
            events.append((s, 2, ImageEvent(stamp=s, frame=frame)))
        events.sort(key=lambda e: (e[0], e[1]))

        recon = SweepReconstructor(StreamConfig(lidar_sweep_hz=lidar_hz,
                                                camera_hz=camera_hz))
        packets = []
        for _, _, ev in events:
            packets.extend(recon.push(ev))
        packets.extend(recon.flush())

        seen = [(p.stamp, p.intensity) for pk in packets
                for p in pk.sweep.points]
        assert sorted(seen) == [(s, i / 1e6) for i, s in enumerate(stamps)]
        total_points += n

        prev_end = -np.inf
        for pk in packets:
            assert pk.sweep.end > prev_end + 1e-12
            assert pk.sweep.aligned_to_image == (pk.image is not None)
            if pk.image is not None:
                assert abs(pk.sweep.end - pk.image.stamp) <= 1e-9
            for pt in pk.sweep.points:
                assert prev_end - 1e-9 < pt.stamp <= pk.sweep.end + 1e-9
            prev_end = pk.sweep.end
    elapsed = time.perf_counter() - t0
    report(2, "stream fuzz conserves points and orderings",
           elapsed < 30.0, f"{total_points} points, 100 seeds, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: measurement Jacobians match central finite differences in all
# eleven camera-parameter dimensions, including the clock-offset column

def max_fd_error(residual_fn, rows, params, eps=1e-6):
    worst = 0.0
    for d in range(11):
        step = np.zeros(11)
        step[d] = eps
        fd = (residual_fn(params_boxplus(params, step))
              - residual_fn(params_boxplus(params, -step))) / (2 * eps)
        ana = rows[:, :, d]
        scale = max(np.abs(fd).max(), np.abs(ana).max(), 1e-6)
        worst = max(worst, np.abs(fd - ana).max() / scale)
    return worst


def test_criterion_03_jacobians_match_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(123)
    v, u = np.mgrid[0:60, 0:80].astype(float)
    image = ImageFrame(stamp=0.0, pixels=40.0 + 1.3 * u + 0.7 * v
                       + 0.02 * u * v)
    worst = 0.0
    dt = 1.0 / 15.0
    for case in range(500):
        params = CameraParams(
            time_offset=rng.uniform(-0.01, 0.01),
            extrinsic=RigidTransform(so3_exp(rng.uniform(-0.3, 0.3, 3)),
                                     rng.uniform(-0.15, 0.15, 3)),
            fx=rng.uniform(25, 45), fy=rng.uniform(25, 45),
            cx=39.5, cy=29.5)
        nav = RigidTransform(so3_exp(rng.uniform(-0.3, 0.3, 3)),
                             rng.uniform(-0.5, 0.5, 3))
        n = 5
        pc = np.empty((n, 3))
        pc[:, 2] = rng.uniform(2.0, 6.0, n)
        pc[:, 0] = rng.uniform(-0.5, 0.5, n) * pc[:, 2]
        pc[:, 1] = rng.uniform(-0.4, 0.4, n) * pc[:, 2]
        positions = nav.compose(params.extrinsic).apply(pc)
        flows = rng.uniform(-4, 4, (n, 2))
        if case % 2 == 0:
            observations = rng.uniform(0, 80, (n, 2))

            def res(p):
                r, _, valid = pnp_system(p, nav, positions, observations,
                                         flows, dt)
                assert valid.all()
                return r

            _, rows, _ = pnp_system(params, nav, positions, observations,
                                    flows, dt)
        else:
            colors = rng.uniform(20, 200, (n, 1))

            def res(p):
                r, _, valid = photometric_system(p, nav, positions, colors,
                                                 flows, image, dt)
                assert valid.all()
                return r

            _, rows, _ = photometric_system(params, nav, positions, colors,
                                            flows, image, dt)
        worst = max(worst, max_fd_error(res, rows, params))
    elapsed = time.perf_counter() - t0
    report(3, "camera Jacobians vs central differences",
           worst < 1e-4 and elapsed < 10.0,
           f"max rel err {worst:.2e} over 500 configs, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 4: the per-frame prediction step is exactly information-neutral

def test_criterion_04_prediction_is_information_neutral():
    rng = np.random.default_rng(42)
    params = CameraParams(time_offset=0.0, extrinsic=RigidTransform.identity(),
                          fx=64.0, fy=64.0, cx=63.5, cy=47.5)
    cov = initial_camera_covariance()
    # push one real update through so the covariance is a filter posterior
    from tests.test_vision import make_exact_features
    feats = make_exact_features(params, RigidTransform.identity(), rng)
    params, cov, info = pnp_update(params, cov, feats,
                                   RigidTransform.identity(), 1 / 15,
                                   VisionConfig())
    assert info.applied
    mean, cov_out = predict(cov)
    ok = bool(np.all(mean == 0.0)) and cov_out.tobytes() == cov.tobytes()
    report(4, "prediction keeps zero error mean and bit-identical covariance",
           ok, f"mean max {np.abs(mean).max():.1f}, "
               f"cov bytes equal {cov_out.tobytes() == cov.tobytes()}")


# ---------------------------------------------------------------------------
# criterion 5: joint camera-parameter perturbations are pulled back to truth
# from exact feature tracks within fifty frames

def scatter_on_scene(scene, rng, per_patch=120):
    pts = []
    for patch in scene.patches:
        uu = rng.uniform(-patch.half_u, patch.half_u, per_patch)
        vv = rng.uniform(-patch.half_v, patch.half_v, per_patch)
        pts.append(patch.center + uu[:, None] * patch.u_axis
                   + vv[:, None] * patch.v_axis)
    return np.concatenate(pts)


def test_criterion_05_camera_parameter_convergence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    rig = SensorRig(time_offset=0.004)
    traj = smooth_loop_trajectory()
    points = scatter_on_scene(Scene.box_room(), rng, per_patch=400)
    truth = rig.true_camera_params()

    delta = np.zeros(11)
    delta[0] = 0.005                                  # 5 ms clock error
    delta[1:4] = math.radians(2.0) * np.array([0.48, -0.6, 0.64])
    delta[4:7] = 0.02 * np.array([0.6, 0.64, -0.48])  # 2 cm offset
    delta[7] = 0.05 * truth.fx                        # 5 % focal error
    delta[8] = 0.05 * truth.fy
    delta[9:] = 4.0                                   # 4 px principal point
    est = params_boxplus(truth, delta)
    cov = initial_camera_covariance()

    dt = 1.0 / rig.camera_hz
    config = VisionConfig()
    # start mid-loop where the motion is rich: near the start the platform is
    # barely translating, which leaves the lever arm poorly constrained
    start = 5.0
    for k in range(1, 51):
        t_prev, t_cur = start + (k - 1) * dt, start + k * dt
        feats = oracle_correspondences(points, traj, rig, t_prev, t_cur)
        est, cov, info = pnp_update(est, cov, feats, traj.pose_at(t_cur), dt,
                                    config)
        assert info.applied and info.n_used > 50

    err = params_boxminus(est, truth)
    rot_deg = math.degrees(np.linalg.norm(err[1:4]))
    trans_mm = 1e3 * np.linalg.norm(err[4:7])
    focal_pct = 100 * max(abs(err[7]) / truth.fx, abs(err[8]) / truth.fy)
    pp_px = np.abs(err[9:]).max()
    tau_ms = 1e3 * abs(err[0])
    elapsed = time.perf_counter() - t0
    ok = (focal_pct <= 0.5 and pp_px <= 0.5 and rot_deg <= 0.2
          and trans_mm <= 5.0 and tau_ms <= 1.0 and elapsed < 60.0)
    report(5, "camera self-calibration convergence", ok,
           f"focal {focal_pct:.3f}%, pp {pp_px:.3f}px, rot {rot_deg:.4f}deg, "
           f"trans {trans_mm:.2f}mm, clock {tau_ms:.3f}ms, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 6: trajectory accuracy on the 30 s, ~25 m loop

def test_criterion_06_loop_trajectory_accuracy(clean_run, noisy_run):
    traj, clean, t_clean = clean_run
    _, noisy, t_noisy = noisy_run
    ate_clean = ate_against(traj, clean)
    drift = end_to_end_error(clean.positions)
    ate_noisy = ate_against(traj, noisy)
    elapsed = t_clean + t_noisy
    ok = (ate_clean < 0.05 and drift < 0.05 and ate_noisy < 0.15
          and elapsed < 300.0)
    report(6, "loop accuracy, ideal and noisy sensors", ok,
           f"ate {ate_clean * 1e3:.2f}mm, drift {drift * 1e3:.2f}mm, "
           f"noisy ate {ate_noisy * 1e3:.2f}mm, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 7: rendered map colors match the true surface albedo on a
# constant-albedo scene, and rendering visits every recently-seen point

def test_criterion_07_coloring_accuracy():
    rig = SensorRig()
    scene = Scene.box_room(shaded=False, panels=False)
    traj, _, sweeps, frames, imu = simulate_loop(rig, NO_NOISE, duration=3.5,
                                                 scene=scene)
    assert len(frames) >= 50
    # hold the calibration at its configured (true) values so the check
    # isolates the render path: a texture-free room carries no information
    # for self-calibration anyway
    config = pipeline_config(rig)
    config.refine_camera = False
    result = run_pipeline(sweeps, frames, imu, config)

    positions, colors, _, rendered = result.world_map.all_points()
    assert rendered.sum() > 1000
    truth = scene.color_at(positions[rendered], tol=0.05)
    close = np.abs(colors[rendered] - truth).max(axis=1) <= 2.0
    fraction = close.mean()

    info = render(result.world_map, frames[-1], result.camera,
                  result.state.pose, VisionConfig())
    visited = {mp.seq for mp in result.world_map.visited_points()}
    covered = set(info.considered_seqs.tolist()) == visited

    ok = fraction >= 0.95 and covered
    report(7, "map colors match surface albedo", ok,
           f"{100 * fraction:.1f}% of {int(rendered.sum())} rendered points "
           f"within 2 levels, full visit coverage {covered}")


# ---------------------------------------------------------------------------
# criterion 8: trajectory metrics report exact zeros on constructed fixtures

def test_criterion_08_metric_fixtures():
    rng = np.random.default_rng(99)
    stamps = np.arange(400) * 0.05
    phi = np.linspace(0.0, 2 * math.pi, 400)
    gt = np.column_stack([5 * np.cos(phi), 5 * np.sin(phi), 0.2 * np.sin(3 * phi)])
    rot = so3_exp(rng.uniform(-2, 2, 3)).as_matrix()
    moved = gt @ rot.T + np.array([20.0, -4.0, 7.0])
    ate = compute_ate(stamps, moved, stamps, gt).rmse

    closed = gt.copy()
    closed[-1] = closed[0]
    drift = end_to_end_error(closed)

    r_fit, t_fit = rigid_align(gt, moved)
    fit_err = np.abs(gt @ r_fit.T + t_fit - moved).max()

    ok = ate <= 1e-9 and drift == 0.0 and fit_err <= 1e-9
    report(8, "metric zero fixtures", ok,
           f"rigid-copy ate {ate:.1e}, closed-loop drift {drift:.1f}, "
           f"alignment residual {fit_err:.1e}")


# ---------------------------------------------------------------------------
# criterion 9: the loop dataset processes faster than real time

def test_criterion_09_throughput(clean_run):
    _, result, elapsed = clean_run
    stages = result.timing_breakdown()
    mean = stages["total"]
    ok = mean <= 0.100 and elapsed < 30.0
    report(9, "faster than real time", ok,
           f"lidar {stages['lidar'] * 1e3:.1f} ms / vision "
           f"{stages['vision'] * 1e3:.1f} ms / total {mean * 1e3:.1f} ms "
           f"per sweep; wall {elapsed:.1f}s for a 30s dataset")


# ---------------------------------------------------------------------------
# criterion 10: identical inputs give byte-identical trajectory exports

def test_criterion_10_determinism(noisy_streams, noisy_run, tmp_path):
    from livo.dataio import write_tum

    rig, _, sweeps, frames, imu = noisy_streams
    _, first, _ = noisy_run
    second = run_pipeline(sweeps, frames, imu, pipeline_config(rig))
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    write_tum(a, first.stamps, first.poses)
    write_tum(b, second.stamps, second.poses)
    identical = a.read_bytes() == b.read_bytes()
    report(10, "repeated runs export identical trajectories", identical,
           f"{len(first.records)} packets, files equal {identical}")
