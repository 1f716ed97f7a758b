"""Camera-parameter refinement, tracking, and color rendering."""

import math

import numpy as np
import pytest

from livo.geometry import RigidTransform, Rotation, compose, so3_exp
from livo.vision import (CameraParams, ImageFrame, TrackedFeature,
                         VisionConfig, bilinear_sample, extract_recent_points,
                         params_boxminus, params_boxplus, photometric_system,
                         photometric_update, pnp_system, pnp_update, predict,
                         project, projection_system, render,
                         replenish_features, track_features, undistort_image,
                         world_to_camera)
from livo.voxelmap import VoxelMap

IDENTITY = RigidTransform.identity()


def default_params(**overrides):
    base = dict(time_offset=0.0, extrinsic=RigidTransform.identity(),
                fx=64.0, fy=64.0, cx=63.5, cy=47.5)
    base.update(overrides)
    return CameraParams(**base)


def random_params(rng):
    ext = RigidTransform(so3_exp(rng.uniform(-0.4, 0.4, 3)),
                         rng.uniform(-0.2, 0.2, 3))
    return CameraParams(time_offset=rng.uniform(-0.01, 0.01), extrinsic=ext,
                        fx=rng.uniform(50, 90), fy=rng.uniform(50, 90),
                        cx=rng.uniform(55, 70), cy=rng.uniform(40, 55))


def random_pose(rng, scale=0.5):
    return RigidTransform(so3_exp(rng.uniform(-0.3, 0.3, 3)),
                          rng.uniform(-scale, scale, 3))


def bilinear_test_image(h=60, w=80):
    """Intensity exactly bilinear in (u, v): sampling and the gradient
    field reproduce it with no interpolation error."""
    v, u = np.mgrid[0:h, 0:w].astype(float)
    return ImageFrame(stamp=0.0, pixels=40.0 + 1.3 * u + 0.7 * v + 0.02 * u * v)


# ---------------------------------------------------------------------------
# projection model

def test_world_to_camera_identity():
    params = default_params()
    p = np.array([0.3, -0.2, 4.0])
    assert np.allclose(world_to_camera(p, IDENTITY, params), p, atol=1e-12)


def test_world_to_camera_translated_body():
    params = default_params()
    nav = RigidTransform(Rotation.identity(), np.array([1.0, 0.0, 0.0]))
    out = world_to_camera(np.array([1.0, 0.0, 5.0]), nav, params)
    assert np.allclose(out, [0.0, 0.0, 5.0], atol=1e-12)


def test_world_to_camera_matches_composed_inverse():
    rng = np.random.default_rng(3)
    for _ in range(50):
        params = random_params(rng)
        nav = random_pose(rng, scale=2.0)
        p = rng.uniform(-5, 5, 3)
        expect = compose(nav, params.extrinsic).inverse().apply(p)
        assert np.allclose(world_to_camera(p, nav, params), expect, atol=1e-9)


def test_project_pinhole_values():
    params = default_params(fx=400.0, fy=400.0, cx=320.0, cy=240.0)
    assert np.allclose(project(np.array([1.0, 2.0, 2.0]), params), [520.0, 640.0])
    centered = default_params(fx=400.0, fy=400.0, cx=0.0, cy=0.0)
    assert np.allclose(project(np.array([0.0, 0.0, 1.0]), centered), [0.0, 0.0])


def test_project_rejects_nonpositive_depth():
    params = default_params()
    with pytest.raises(ValueError, match="behind camera"):
        project(np.array([0.0, 0.0, -1.0]), params)


def test_project_temporal_correction_shifts_along_flow():
    params = default_params(fx=400.0, fy=400.0, cx=0.0, cy=0.0,
                            time_offset=0.01)
    base = project(np.array([0.0, 0.0, 1.0]), params)
    shifted = project(np.array([0.0, 0.0, 1.0]), params,
                      flow_delta=np.array([10.0, 0.0]), dt=0.1)
    assert np.allclose(shifted - base, [1.0, 0.0], atol=1e-12)


def test_project_flow_requires_frame_interval():
    params = default_params(time_offset=0.01)
    with pytest.raises(ValueError, match="frame interval"):
        project(np.array([0.0, 0.0, 1.0]), params,
                flow_delta=np.array([1.0, 0.0]), dt=None)


def test_boxplus_boxminus_roundtrip():
    rng = np.random.default_rng(4)
    for _ in range(50):
        params = random_params(rng)
        delta = rng.uniform(-0.05, 0.05, 11)
        assert np.allclose(params_boxminus(params_boxplus(params, delta), params),
                           delta, atol=1e-9)


# ---------------------------------------------------------------------------
# measurement Jacobians against central differences

def fd_check(residual_fn, rows, params, n_dims=11, eps=1e-6, rel_tol=1e-4):
    for d in range(n_dims):
        step = np.zeros(11)
        step[d] = eps
        r_plus = residual_fn(params_boxplus(params, step))
        r_minus = residual_fn(params_boxplus(params, -step))
        fd = (r_plus - r_minus) / (2 * eps)
        ana = rows[:, :, d]
        scale = max(np.abs(fd).max(), np.abs(ana).max(), 1e-6)
        assert np.abs(fd - ana).max() <= rel_tol * scale, f"dim {d}"


def test_pnp_jacobian_matches_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(20):
        params = random_params(rng)
        nav = random_pose(rng)
        n = 6
        pc = np.column_stack([rng.uniform(-1.0, 1.0, n),
                              rng.uniform(-0.8, 0.8, n),
                              rng.uniform(2.0, 6.0, n)])
        positions = compose(nav, params.extrinsic).apply(pc)
        observations = rng.uniform(0, 100, (n, 2))
        flows = rng.uniform(-5, 5, (n, 2))
        dt = 1.0 / 15.0

        def res(p):
            r, _, valid = pnp_system(p, nav, positions, observations, flows, dt)
            assert valid.all()
            return r

        _, rows, _ = pnp_system(params, nav, positions, observations, flows, dt)
        fd_check(res, rows, params)


def test_photometric_jacobian_matches_finite_differences():
    rng = np.random.default_rng(6)
    image = bilinear_test_image()
    h, w = image.shape
    for _ in range(20):
        params = CameraParams(time_offset=rng.uniform(-0.01, 0.01),
                              extrinsic=RigidTransform(
                                  so3_exp(rng.uniform(-0.2, 0.2, 3)),
                                  rng.uniform(-0.1, 0.1, 3)),
                              fx=30.0, fy=30.0, cx=(w - 1) / 2, cy=(h - 1) / 2)
        nav = random_pose(rng, scale=0.3)
        n = 8
        # aim camera-frame points at the image interior, away from borders
        pc = np.empty((n, 3))
        pc[:, 2] = rng.uniform(2.0, 5.0, n)
        pc[:, 0] = rng.uniform(-0.6, 0.6, n) * pc[:, 2]
        pc[:, 1] = rng.uniform(-0.5, 0.5, n) * pc[:, 2]
        positions = compose(nav, params.extrinsic).apply(pc)
        colors = rng.uniform(20, 200, (n, 1))
        flows = rng.uniform(-3, 3, (n, 2))
        dt = 1.0 / 15.0

        def res(p):
            r, _, valid = photometric_system(p, nav, positions, colors, flows,
                                             image, dt)
            assert valid.all()
            return r

        _, rows, _ = photometric_system(params, nav, positions, colors, flows,
                                        image, dt)
        fd_check(res, rows, params)


# ---------------------------------------------------------------------------
# error-state updates

def test_predict_zero_mean_covariance_unchanged():
    cov = np.diag(np.arange(1.0, 12.0))
    mean, cov_out = predict(cov)
    assert np.array_equal(mean, np.zeros(11))
    assert np.array_equal(cov_out, cov)


def make_exact_features(params, nav, rng, n=30):
    pc = np.column_stack([rng.uniform(-0.8, 0.8, n),
                          rng.uniform(-0.6, 0.6, n),
                          rng.uniform(2.0, 6.0, n)])
    positions = compose(nav, params.extrinsic).apply(pc)
    pix, _, _, valid = projection_system(params, nav, positions, None, None)
    assert valid.all()
    return [TrackedFeature(position=p, prev_pixel=px, cur_pixel=px)
            for p, px in zip(positions, pix)]


def test_pnp_update_exact_observations_fixed_point():
    rng = np.random.default_rng(7)
    params = default_params()
    nav = random_pose(rng)
    features = make_exact_features(params, nav, rng)
    cov = np.eye(11) * 1e-3
    out, cov_out, info = pnp_update(params, cov, features, nav, 1 / 15, VisionConfig())
    assert info.applied
    assert info.rms < 1e-9
    assert np.linalg.norm(params_boxminus(out, params)) < 1e-10
    assert np.trace(cov_out) < np.trace(cov)
    assert np.allclose(cov_out, cov_out.T, atol=1e-12)
    assert np.linalg.eigvalsh(cov_out).min() > -1e-12


def test_pnp_update_skips_below_feature_floor():
    rng = np.random.default_rng(8)
    params = default_params()
    nav = IDENTITY
    features = make_exact_features(params, nav, rng, n=3)
    cov = np.eye(11) * 1e-3
    out, cov_out, info = pnp_update(params, cov, features, nav, 1 / 15, VisionConfig())
    assert not info.applied
    assert out is params
    assert cov_out is cov


def tight_prior_except(free_dims, free_var):
    cov = np.eye(11) * 1e-12
    for d in free_dims:
        cov[d, d] = free_var
    return cov


def test_pnp_update_recovers_focal_length():
    # the estimator starts 5% long on fx; repeated frames pull it back
    rng = np.random.default_rng(9)
    truth = default_params()
    est = default_params(fx=truth.fx * 1.05)
    cov = tight_prior_except([7], 25.0)
    config = VisionConfig()
    for k in range(10):
        nav = RigidTransform(so3_exp([0, 0.02 * k, 0.01 * k]),
                             np.array([0.05 * k, 0.02 * k, -0.03 * k]))
        features = make_exact_features(truth, nav, rng, n=60)
        est, cov, info = pnp_update(est, cov, features, nav, 1 / 15, config)
        assert info.applied
    assert abs(est.fx - truth.fx) / truth.fx < 0.005


def test_pnp_update_recovers_time_offset():
    # the observed pixels lag the nav stamp by 5 ms; tracked flow exposes it
    rng = np.random.default_rng(10)
    tau = 0.005
    dt = 1.0 / 15.0
    truth = default_params()
    est = default_params(time_offset=0.0)
    cov = tight_prior_except([0], 1e-4)
    config = VisionConfig()
    velocity = np.array([0.8, 0.3, 0.0])
    pc = np.column_stack([rng.uniform(-0.8, 0.8, 60),
                          rng.uniform(-0.6, 0.6, 60),
                          rng.uniform(2.0, 6.0, 60)])
    positions = pc  # world points; the body starts at the origin
    for k in range(1, 21):
        t_prev, t_cur = (k - 1) * dt, k * dt
        pose_at = lambda t: RigidTransform(Rotation.identity(), velocity * t)
        obs_prev, _, _, v0 = projection_system(truth, pose_at(t_prev + tau),
                                               positions, None, None)
        obs_cur, _, _, v1 = projection_system(truth, pose_at(t_cur + tau),
                                              positions, None, None)
        keep = v0 & v1
        features = [TrackedFeature(position=p, prev_pixel=a, cur_pixel=b)
                    for p, a, b in zip(positions[keep], obs_prev[keep],
                                       obs_cur[keep])]
        est, cov, info = pnp_update(est, cov, features, pose_at(t_cur), dt,
                                    config)
        assert info.applied
    assert abs(est.time_offset - tau) < 0.001


def test_photometric_update_recovers_principal_point():
    # stored map colors were rendered with the true cx; a 4 px bias shows up
    # as a coherent intensity residual and is pulled back out
    rng = np.random.default_rng(11)
    image = bilinear_test_image(h=96, w=128)
    truth = default_params(fx=40.0, fy=40.0, cx=63.5, cy=47.5)
    est = params_boxplus(truth, np.array([0, 0, 0, 0, 0, 0, 0, 0, 0, 4.0, 0]))
    cov = tight_prior_except([9], 25.0)
    config = VisionConfig()
    n = 120
    pc = np.column_stack([rng.uniform(-1.0, 1.0, n),
                          rng.uniform(-0.8, 0.8, n),
                          rng.uniform(2.0, 6.0, n)])
    positions = pc
    pix_true, _, _, _ = projection_system(truth, IDENTITY, positions, None, None)
    colors = bilinear_sample(image.pixels[:, :, None], pix_true)
    for _ in range(10):
        est, cov, info = photometric_update(est, cov, positions, colors, None,
                                            image, IDENTITY, None, config)
        assert info.applied
    assert abs(est.cx - truth.cx) < 0.5


def test_photometric_update_skips_when_points_leave_view():
    params = default_params()
    positions = np.tile([0.0, 0.0, -5.0], (40, 1))  # all behind the camera
    colors = np.full((40, 1), 100.0)
    image = bilinear_test_image()
    out, cov_out, info = photometric_update(params, np.eye(11) * 1e-3,
                                            positions, colors, None, image,
                                            IDENTITY, None, VisionConfig())
    assert not info.applied
    assert out is params


# ---------------------------------------------------------------------------
# feature tracking

def textured_image(rng, h=96, w=128):
    import cv2
    base = rng.uniform(0, 255, (h, w)).astype(np.float32)
    smooth = cv2.GaussianBlur(base, (0, 0), 2.5)
    lo, hi = smooth.min(), smooth.max()
    return (smooth - lo) * (255.0 / (hi - lo))


def grid_features(w, h, margin=25, step=20):
    feats = []
    for u in range(margin, w - margin, step):
        for v in range(margin, h - margin, step):
            feats.append(TrackedFeature(position=np.zeros(3),
                                        prev_pixel=[u, v], cur_pixel=[u, v]))
    return feats


def test_track_features_static_image():
    rng = np.random.default_rng(20)
    pixels = textured_image(rng)
    prev = ImageFrame(stamp=0.0, pixels=pixels)
    cur = ImageFrame(stamp=0.1, pixels=pixels.copy())
    feats = grid_features(128, 96)
    starts = [f.cur_pixel.copy() for f in feats]
    track_features(prev, cur, feats, VisionConfig())
    assert all(f.valid for f in feats)
    moves = [np.linalg.norm(f.cur_pixel - s) for f, s in zip(feats, starts)]
    assert max(moves) < 0.1


def test_track_features_follows_pixel_shift():
    rng = np.random.default_rng(21)
    pixels = textured_image(rng)
    prev = ImageFrame(stamp=0.0, pixels=pixels)
    cur = ImageFrame(stamp=0.1, pixels=np.roll(pixels, 5, axis=1))
    feats = grid_features(128, 96)
    starts = [f.cur_pixel.copy() for f in feats]
    track_features(prev, cur, feats, VisionConfig())
    tracked = [f for f in feats if f.valid]
    assert len(tracked) > 0.8 * len(feats)
    errs = [np.linalg.norm(f.cur_pixel - (s + [5.0, 0.0]))
            for f, s in zip(feats, starts) if f.valid]
    assert max(errs) < 0.3
    assert all(np.allclose(f.prev_pixel, s)
               for f, s in zip(feats, starts) if f.valid)


def test_track_features_invalidates_on_flat_image():
    prev = ImageFrame(stamp=0.0, pixels=np.full((96, 128), 128.0))
    cur = ImageFrame(stamp=0.1, pixels=np.full((96, 128), 128.0))
    feats = grid_features(128, 96)
    rng = np.random.default_rng(22)
    # textureless input gives the tracker nothing: every feature must be
    # dropped rather than silently kept
    track_features(prev, cur, feats, VisionConfig(fb_max_error=0.0))
    assert not any(f.valid for f in feats)


# ---------------------------------------------------------------------------
# undistortion

def test_undistort_zero_coefficients_is_passthrough():
    img = ImageFrame(stamp=1.0, pixels=np.random.default_rng(23).uniform(
        0, 255, (48, 64)))
    out = undistort_image(img, default_params(), np.zeros(5))
    assert out is img


def test_undistort_constant_image_stays_constant():
    img = ImageFrame(stamp=1.0, pixels=np.full((96, 128), 77.0))
    out = undistort_image(img, default_params(), np.array([0.05, 0, 0, 0, 0]))
    assert out.stamp == 1.0
    assert out.shape == (96, 128)
    assert np.allclose(out.pixels[20:-20, 20:-20], 77.0, atol=1e-3)


# ---------------------------------------------------------------------------
# map interaction and rendering

def small_map(points, stamps=None):
    m = VoxelMap(voxel_size=0.5, capacity=20, min_point_spacing=0.01)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if stamps is None:
        m.update(points, stamp=0.0)
    else:
        for p, s in zip(points, stamps):
            m.update(p[None, :], stamp=s)
    return m


def test_extract_recent_points_returns_newest_per_cell():
    m = small_map([[0.10, 0.1, 2.0], [0.25, 0.1, 2.0], [0.40, 0.1, 2.0]],
                  stamps=[1.0, 2.0, 3.0])
    # re-touch the cell so it is the recently visited one
    m.update(np.array([[0.40, 0.1, 2.0]]), stamp=3.0)
    recent = extract_recent_points(m)
    assert len(recent) == 1
    assert recent[0].insert_stamp == 3.0
    assert np.allclose(recent[0].position, [0.40, 0.1, 2.0])


def test_render_single_observation_takes_image_color():
    m = small_map([[0.0, 0.0, 2.0]])
    image = ImageFrame(stamp=0.0, pixels=np.full((96, 128), 100.0))
    info = render(m, image, default_params(), IDENTITY, VisionConfig())
    assert info.n_rendered == 1
    view = m.visited_blocks()
    assert np.allclose(view.colors[0], [100.0, 100.0, 100.0], atol=1e-9)
    assert view.rendered[0]
    assert view.weights[0] == pytest.approx(0.25)  # 1 / depth^2


def test_render_equal_weights_average_colors():
    m = small_map([[0.0, 0.0, 2.0]])
    params = default_params()
    render(m, ImageFrame(stamp=0.0, pixels=np.full((96, 128), 100.0)),
           params, IDENTITY, VisionConfig())
    m.update(np.array([[0.0, 0.0, 2.0]]), stamp=0.1)  # revisit, no new point
    render(m, ImageFrame(stamp=0.1, pixels=np.full((96, 128), 200.0)),
           params, IDENTITY, VisionConfig())
    view = m.visited_blocks()
    assert np.allclose(view.colors[0], [150.0, 150.0, 150.0], atol=1e-9)


def test_render_weight_saturates_at_cap():
    m = small_map([[0.0, 0.0, 2.0]])
    params = default_params()
    config = VisionConfig(max_color_weight=0.4)
    image = ImageFrame(stamp=0.0, pixels=np.full((96, 128), 100.0))
    for k in range(3):
        render(m, image, params, IDENTITY, config)
        m.update(np.array([[0.0, 0.0, 2.0]]), stamp=0.1 * (k + 1))
    view = m.visited_blocks()
    assert view.weights[0] == pytest.approx(0.4)


def test_render_skips_points_out_of_view_but_reports_them():
    m = small_map([[0.0, 0.0, 2.0], [0.0, 0.0, -2.0]])
    image = ImageFrame(stamp=0.0, pixels=np.full((96, 128), 100.0))
    info = render(m, image, default_params(), IDENTITY, VisionConfig())
    assert info.n_rendered == 1
    view = m.visited_blocks()
    assert set(info.considered_seqs.tolist()) == set(view.seqs.tolist())
    behind = np.flatnonzero(view.positions[:, 2] < 0)[0]
    assert not view.rendered[behind]
    assert view.weights[behind] == 0.0


def test_render_skips_samples_straddling_strong_edges():
    # the bilinear support at the projection mixes both sides of the step,
    # measuring neither side, so the observation must be dropped
    m = small_map([[0.0, 0.0, 2.0]])
    pixels = np.full((96, 128), 40.0)
    pixels[:, 64:] = 220.0  # vertical step right at the principal point
    frame = ImageFrame(stamp=0.0, pixels=pixels)
    info = render(m, frame, default_params(), IDENTITY, VisionConfig())
    assert info.n_rendered == 0
    view = m.visited_blocks()
    assert not view.rendered[0]
    assert view.weights[0] == 0.0
    # a permissive gate accepts the same observation
    info = render(m, frame, default_params(), IDENTITY,
                  VisionConfig(max_render_contrast=255.0))
    assert info.n_rendered == 1


def test_render_covers_every_visited_point():
    rng = np.random.default_rng(24)
    pts = np.column_stack([rng.uniform(-1.5, 1.5, 200),
                           rng.uniform(-1.0, 1.0, 200),
                           rng.uniform(2.0, 6.0, 200)])
    m = VoxelMap(voxel_size=0.5, capacity=20, min_point_spacing=0.01)
    m.update(pts, stamp=0.0)
    image = ImageFrame(stamp=0.0, pixels=np.full((96, 128), 50.0))
    info = render(m, image, default_params(), IDENTITY, VisionConfig())
    all_seqs = {mp.seq for mp in m.visited_points()}
    assert set(info.considered_seqs.tolist()) == all_seqs


def replenish_map(rng):
    pts = np.column_stack([rng.uniform(-1.5, 1.5, 300),
                           rng.uniform(-1.0, 1.0, 300),
                           rng.uniform(2.0, 5.0, 300)])
    m = VoxelMap(voxel_size=0.5, capacity=20, min_point_spacing=0.01)
    m.update(pts, stamp=0.0)
    return m


def test_replenish_features_fills_from_map_grid():
    rng = np.random.default_rng(25)
    m = replenish_map(rng)
    config = VisionConfig()
    # per-pixel noise gives strong two-directional texture everywhere
    frame = ImageFrame(stamp=0.0, pixels=rng.uniform(0, 255, (96, 128)))
    feats = replenish_features([], m, default_params(), IDENTITY, frame,
                               config)
    assert len(feats) > 0
    g = min(config.feature_grid_px, max(8, 128 // 8))
    cells = [(int(f.cur_pixel[0] // g), int(f.cur_pixel[1] // g)) for f in feats]
    assert len(cells) == len(set(cells))  # one feature per coarse pixel cell
    margin = config.border_margin
    for f in feats:
        assert margin <= f.cur_pixel[0] <= 127 - margin
        assert margin <= f.cur_pixel[1] <= 95 - margin


def test_replenish_keeps_pool_when_full():
    feats = [TrackedFeature(position=np.zeros(3), prev_pixel=[10 + k, 10],
                            cur_pixel=[10 + k, 10])
             for k in range(50)]
    m = VoxelMap()
    frame = ImageFrame(stamp=0.0, pixels=np.zeros((96, 128)))
    out = replenish_features(feats, m, default_params(), IDENTITY, frame,
                             VisionConfig(min_features=40))
    assert out == feats


def test_replenish_rejects_untrackable_image_regions():
    # flat frames freeze under optical flow and straight edges slide along
    # themselves, so neither may seed features no matter how many map
    # points project inside the image
    rng = np.random.default_rng(26)
    m = replenish_map(rng)
    flat = ImageFrame(stamp=0.0, pixels=np.full((96, 128), 90.0))
    assert replenish_features([], m, default_params(), IDENTITY, flat,
                              VisionConfig()) == []
    cols = np.arange(128)[None, :]
    edge = ImageFrame(stamp=0.0,
                      pixels=np.where(cols < 64, 50.0, 180.0) * np.ones((96, 1)))
    assert replenish_features([], m, default_params(), IDENTITY, edge,
                              VisionConfig()) == []
