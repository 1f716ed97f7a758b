"""Camera-parameter filtering and colored-map rendering.

The vision stage never touches the navigation pose: its 11-dimensional error
state covers only the camera clock offset (1), the camera-to-body extrinsic
(3 rotation + 3 translation), and the pinhole intrinsics (fx, fy, cx, cy).
Pixel predictions include a first-order temporal correction that moves a
feature along its image-plane flow by time_offset, so the clock offset is
observable from reprojection alone.

Order per frame in the pipeline: reprojection update, then photometric
update, then rendering of the recently visited map region.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import cv2
import numpy as np

from .geometry import RigidTransform, so3_exp, so3_log
from .voxelmap import MapPoint, VoxelMap

log = logging.getLogger(__name__)

# error-state layout: [d_time_offset, d_rot_ext (3), d_trans_ext (3), d_intr (4)]
STATE_DIM = 11
_MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class CameraParams:
    """Estimated camera parameters: clock offset, extrinsic, intrinsics."""

    time_offset: float
    extrinsic: RigidTransform  # camera frame -> body frame
    fx: float
    fy: float
    cx: float
    cy: float

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])


def params_boxplus(params: CameraParams, delta: np.ndarray) -> CameraParams:
    delta = np.asarray(delta, dtype=float).reshape(STATE_DIM)
    rot = params.extrinsic.rotation * so3_exp(delta[1:4])
    return replace(params,
                   time_offset=params.time_offset + delta[0],
                   extrinsic=RigidTransform(rot, params.extrinsic.translation + delta[4:7]),
                   fx=params.fx + delta[7], fy=params.fy + delta[8],
                   cx=params.cx + delta[9], cy=params.cy + delta[10])


def params_boxminus(a: CameraParams, b: CameraParams) -> np.ndarray:
    out = np.empty(STATE_DIM)
    out[0] = a.time_offset - b.time_offset
    out[1:4] = so3_log(b.extrinsic.rotation.inverse() * a.extrinsic.rotation)
    out[4:7] = a.extrinsic.translation - b.extrinsic.translation
    out[7:11] = a.intrinsics - b.intrinsics
    return out


@dataclass
class VisionConfig:
    sigma_pnp: float = 1.5            # px
    huber_pnp: float = 3.0            # px
    sigma_photometric: float = 8.0    # intensity levels
    huber_photometric: float = 30.0
    max_iterations: int = 5
    convergence_tol: float = 1e-8
    min_pnp_features: int = 4
    min_photometric_points: int = 10
    lk_window: int = 21
    lk_levels: int = 3
    lk_iterations: int = 30
    lk_eps: float = 0.01
    fb_max_error: float = 1.5         # px, forward-backward gate
    border_margin: int = 3
    min_features: int = 40
    feature_grid_px: int = 40
    feature_quality: float = 0.02     # corner gate, fraction of peak response
    min_corner_response: float = 2e-3  # corner gate, absolute floor
    max_color_weight: float = 100.0
    max_render_contrast: float = 60.0  # levels across the bilinear support


@dataclass
class ImageFrame:
    """Image with its stream stamp; pixels are float intensities in [0, 255]."""

    stamp: float
    pixels: np.ndarray  # (H, W) gray or (H, W, 3) RGB

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else self.pixels.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass
class TrackedFeature:
    """A map point observed in consecutive frames."""

    position: np.ndarray  # world coordinates, fixed at creation
    prev_pixel: np.ndarray
    cur_pixel: np.ndarray
    valid: bool = True
    map_point: MapPoint | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.prev_pixel = np.asarray(self.prev_pixel, dtype=float).reshape(2)
        self.cur_pixel = np.asarray(self.cur_pixel, dtype=float).reshape(2)


@dataclass
class UpdateInfo:
    applied: bool
    n_used: int = 0
    iterations: int = 0
    rms: float = float("nan")


@dataclass
class RenderInfo:
    considered_seqs: np.ndarray
    n_rendered: int


# ---------------------------------------------------------------------------
# projection model

def world_to_camera(p_world: np.ndarray, nav_pose: RigidTransform,
                    params: CameraParams) -> np.ndarray:
    """Map world points into the camera frame through body pose and extrinsic.

    Equivalent to inverse(nav_pose . extrinsic) applied to the points, written
    out so the dependence on each calibration block stays explicit.
    """
    r_wo = nav_pose.rotation.as_matrix()
    r_oc = params.extrinsic.rotation.as_matrix()
    a = (r_wo @ r_oc).T
    shift = r_oc.T @ params.extrinsic.translation + a @ nav_pose.translation
    return np.asarray(p_world, dtype=float) @ a.T - shift


def project(p_camera: np.ndarray, params: CameraParams,
            flow_delta: np.ndarray | None = None, dt: float | None = None) -> np.ndarray:
    """Pinhole projection with the temporal clock-offset correction.

    When flow_delta (the pixel displacement of this feature between the
    previous and current frame) is given, the predicted pixel is advanced
    along that flow by time_offset / dt.
    """
    p = np.asarray(p_camera, dtype=float).reshape(3)
    if p[2] <= _MIN_DEPTH:
        raise ValueError(f"point behind camera: depth {p[2]:.3e}")
    pix = np.array([params.fx * p[0] / p[2] + params.cx,
                    params.fy * p[1] / p[2] + params.cy])
    if flow_delta is not None:
        if dt is None or dt <= 0:
            raise ValueError("temporal correction requires a positive frame interval")
        pix = pix + (params.time_offset / dt) * np.asarray(flow_delta, dtype=float)
    return pix


def _skew_batch(p: np.ndarray) -> np.ndarray:
    n = len(p)
    s = np.zeros((n, 3, 3))
    s[:, 0, 1] = -p[:, 2]
    s[:, 0, 2] = p[:, 1]
    s[:, 1, 0] = p[:, 2]
    s[:, 1, 2] = -p[:, 0]
    s[:, 2, 0] = -p[:, 1]
    s[:, 2, 1] = p[:, 0]
    return s


def projection_system(params: CameraParams, nav_pose: RigidTransform,
                      positions: np.ndarray, flows: np.ndarray | None,
                      dt: float | None):
    """Vectorized pixel prediction and its Jacobian w.r.t. the error state.

    Returns (pixels (N,2), p_camera (N,3), J (N,2,11), valid (N,)) where valid
    flags positive-depth points. J columns follow the error-state layout; the
    rotation block uses the body-side perturbation of the extrinsic.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    n = len(positions)
    r_wo = nav_pose.rotation.as_matrix()
    r_oc = params.extrinsic.rotation.as_matrix()
    p_o = (positions - nav_pose.translation) @ r_wo
    p_c = (p_o - params.extrinsic.translation) @ r_oc

    z = p_c[:, 2]
    valid = z > _MIN_DEPTH
    zi = np.where(valid, 1.0 / np.where(valid, z, 1.0), 0.0)
    x, y = p_c[:, 0], p_c[:, 1]

    pix = np.empty((n, 2))
    pix[:, 0] = params.fx * x * zi + params.cx
    pix[:, 1] = params.fy * y * zi + params.cy

    j_pin = np.zeros((n, 2, 3))
    j_pin[:, 0, 0] = params.fx * zi
    j_pin[:, 0, 2] = -params.fx * x * zi * zi
    j_pin[:, 1, 1] = params.fy * zi
    j_pin[:, 1, 2] = -params.fy * y * zi * zi

    jac = np.zeros((n, 2, STATE_DIM))
    if flows is not None:
        if dt is None or dt <= 0:
            raise ValueError("temporal correction requires a positive frame interval")
        flows = np.atleast_2d(np.asarray(flows, dtype=float))
        pix += (params.time_offset / dt) * flows
        jac[:, :, 0] = flows / dt
    jac[:, :, 1:4] = np.einsum("nij,njk->nik", j_pin, _skew_batch(p_c))
    jac[:, :, 4:7] = j_pin @ (-r_oc.T)
    jac[:, 0, 7] = x * zi
    jac[:, 1, 8] = y * zi
    jac[:, 0, 9] = 1.0
    jac[:, 1, 10] = 1.0
    return pix, p_c, jac, valid


# ---------------------------------------------------------------------------
# image sampling

def bilinear_sample(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample (H, W[, C]) image at float pixel coordinates (N, 2)."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    h, w = img.shape[:2]
    u = np.clip(uv[:, 0], 0.0, w - 1.000001)
    v = np.clip(uv[:, 1], 0.0, h - 1.000001)
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    fu = (u - u0)[:, None] if img.ndim == 3 else (u - u0)
    fv = (v - v0)[:, None] if img.ndim == 3 else (v - v0)
    i00 = img[v0, u0]
    i01 = img[v0, u0 + 1]
    i10 = img[v0 + 1, u0]
    i11 = img[v0 + 1, u0 + 1]
    return ((1 - fu) * (1 - fv) * i00 + fu * (1 - fv) * i01
            + (1 - fu) * fv * i10 + fu * fv * i11)


def image_gradients(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradients (d/du, d/dv) of an intensity image."""
    img = np.asarray(pixels, dtype=float)
    gv, gu = np.gradient(img, axis=(0, 1))
    return gu, gv


# ---------------------------------------------------------------------------
# measurement systems

def pnp_system(params: CameraParams, nav_pose: RigidTransform,
               positions: np.ndarray, observations: np.ndarray,
               flows: np.ndarray | None, dt: float | None):
    """Reprojection residuals r = observed - predicted and d r / d error."""
    pix, _, jac, valid = projection_system(params, nav_pose, positions, flows, dt)
    residuals = np.atleast_2d(np.asarray(observations, dtype=float)) - pix
    return residuals, -jac, valid


def photometric_system(params: CameraParams, nav_pose: RigidTransform,
                       positions: np.ndarray, colors: np.ndarray,
                       flows: np.ndarray | None, image: ImageFrame,
                       dt: float | None, gradients=None):
    """Direct intensity residuals r = stored color - image(projection).

    The flow inputs are held fixed by the caller so the Jacobian and finite
    differences of this function agree. Points projecting within
    ``border_margin``-free interior participate; the rest are masked out.
    """
    pix, _, jac, valid = projection_system(params, nav_pose, positions, flows, dt)
    h, w = image.shape
    in_bounds = ((pix[:, 0] >= 1.0) & (pix[:, 0] <= w - 2.0)
                 & (pix[:, 1] >= 1.0) & (pix[:, 1] <= h - 2.0))
    valid = valid & in_bounds
    img = image.pixels if image.pixels.ndim == 3 else image.pixels[:, :, None]
    colors = np.atleast_2d(np.asarray(colors, dtype=float))
    if gradients is None:
        gradients = image_gradients(img)
    gu, gv = gradients
    sampled = bilinear_sample(img, pix)
    grad_u = bilinear_sample(gu, pix)
    grad_v = bilinear_sample(gv, pix)
    residuals = colors - sampled
    # chain rule: d r / d x = -grad_I(pix) . d pix / d x, per channel
    rows = -(grad_u[:, :, None] * jac[:, 0, None, :]
             + grad_v[:, :, None] * jac[:, 1, None, :])
    return residuals, rows, valid


# ---------------------------------------------------------------------------
# iterated error-state update

def predict(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame prediction: zero error mean, covariance carried unchanged."""
    return np.zeros(STATE_DIM), cov


def _iterated_update(params: CameraParams, cov: np.ndarray, build, sigma: float,
                     huber: float, min_rows: int,
                     config: VisionConfig) -> tuple[CameraParams, np.ndarray, UpdateInfo]:
    """Gauss-Newton iteration of an error-state update with a Huber loss.

    ``build(candidate_params)`` returns (residuals (N,k), rows (N,k,11),
    valid (N,)). The prior is the incoming (params, cov); the posterior
    covariance uses the symmetric (Joseph) form with the final linearization.
    """
    p_inv = np.linalg.inv(cov + 1e-15 * np.eye(STATE_DIM))
    inv_s2 = 1.0 / (sigma * sigma)
    delta = np.zeros(STATE_DIM)
    h_stack = None
    w_stack = None
    k_gain = None
    rms = float("nan")
    n_used = 0
    iterations = 0

    for it in range(config.max_iterations):
        iterations = it + 1
        candidate = params_boxplus(params, delta)
        residuals, rows, valid = build(candidate)
        residuals = residuals[valid]
        rows = rows[valid]
        n_used = len(residuals)
        if n_used < min_rows:
            return params, cov, UpdateInfo(applied=False, n_used=n_used,
                                           iterations=iterations)
        k = residuals.shape[1]
        norms = np.linalg.norm(residuals, axis=1)
        weights = np.where(norms > huber, huber / np.maximum(norms, 1e-12), 1.0)
        rms = float(np.sqrt(np.mean(norms ** 2)))

        h_stack = rows.reshape(-1, STATE_DIM)
        r_stack = residuals.reshape(-1)
        w_stack = np.repeat(weights, k)

        a = h_stack.T @ (h_stack * w_stack[:, None]) * inv_s2 + p_inv
        k_gain = np.linalg.solve(a, h_stack.T * (w_stack * inv_s2))
        delta_new = k_gain @ (h_stack @ delta - r_stack)
        step = float(np.linalg.norm(delta_new - delta))
        delta = delta_new
        if step < config.convergence_tol:
            break

    ikh = np.eye(STATE_DIM) - k_gain @ h_stack
    noise = (k_gain * (sigma * sigma / w_stack)) @ k_gain.T
    cov_new = ikh @ cov @ ikh.T + noise
    cov_new = 0.5 * (cov_new + cov_new.T)
    return (params_boxplus(params, delta), cov_new,
            UpdateInfo(applied=True, n_used=n_used, iterations=iterations, rms=rms))


def pnp_update(params: CameraParams, cov: np.ndarray,
               features: list[TrackedFeature], nav_pose: RigidTransform,
               dt: float | None,
               config: VisionConfig) -> tuple[CameraParams, np.ndarray, UpdateInfo]:
    """Refine camera parameters from tracked-feature reprojection residuals."""
    usable = [f for f in features if f.valid]
    if len(usable) < config.min_pnp_features:
        return params, cov, UpdateInfo(applied=False, n_used=len(usable))
    positions = np.stack([f.position for f in usable])
    observations = np.stack([f.cur_pixel for f in usable])
    flows = np.stack([f.cur_pixel - f.prev_pixel for f in usable])
    if dt is None or dt <= 0:
        flows = None

    def build(candidate: CameraParams):
        return pnp_system(candidate, nav_pose, positions, observations, flows, dt)

    return _iterated_update(params, cov, build, config.sigma_pnp,
                            config.huber_pnp, config.min_pnp_features, config)


def photometric_update(params: CameraParams, cov: np.ndarray,
                       positions: np.ndarray, colors: np.ndarray,
                       prev_pixels: np.ndarray | None, image: ImageFrame,
                       nav_pose: RigidTransform, dt: float | None,
                       config: VisionConfig) -> tuple[CameraParams, np.ndarray, UpdateInfo]:
    """Refine camera parameters against stored map colors.

    ``prev_pixels`` are the points' projections in the previous frame; the
    flow used by the temporal correction is fixed at entry from them.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    if len(positions) < config.min_photometric_points:
        return params, cov, UpdateInfo(applied=False, n_used=len(positions))
    flows = None
    if prev_pixels is not None and dt is not None and dt > 0:
        pix0, _, _, valid0 = projection_system(params, nav_pose, positions, None, None)
        flows = np.where(valid0[:, None], pix0 - np.asarray(prev_pixels, dtype=float), 0.0)
    img = image.pixels if image.pixels.ndim == 3 else image.pixels[:, :, None]
    grads = image_gradients(img)
    colors = np.atleast_2d(np.asarray(colors, dtype=float))

    def build(candidate: CameraParams):
        return photometric_system(candidate, nav_pose, positions, colors, flows,
                                  image, dt, gradients=grads)

    return _iterated_update(params, cov, build, config.sigma_photometric,
                            config.huber_photometric,
                            config.min_photometric_points, config)


# ---------------------------------------------------------------------------
# tracking

def _to_gray_u8(pixels: np.ndarray) -> np.ndarray:
    img = np.asarray(pixels, dtype=np.float32)
    if img.ndim == 3:
        img = img @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def track_features(prev_frame: ImageFrame, cur_frame: ImageFrame,
                   features: list[TrackedFeature],
                   config: VisionConfig) -> list[TrackedFeature]:
    """Pyramidal optical-flow tracking with a forward-backward check.

    Features are advanced in place: cur_pixel moves to the new frame,
    prev_pixel keeps the previous location, and valid drops on tracking
    failure, round-trip error above ``fb_max_error``, or proximity to the
    border.
    """
    active = [f for f in features if f.valid]
    if not active:
        return features
    prev8 = _to_gray_u8(prev_frame.pixels)
    cur8 = _to_gray_u8(cur_frame.pixels)
    h, w = cur8.shape
    win = config.lk_window
    # pyramid depth limited so the smallest level still fits the window
    fit_levels = max(0, int(math.floor(math.log2(max(min(h, w) / (2.0 * win), 1.0)))))
    max_level = min(config.lk_levels - 1, fit_levels)
    criteria = (cv2.TERM_CRITERIA_COUNT | cv2.TERM_CRITERIA_EPS,
                config.lk_iterations, config.lk_eps)
    p0 = np.stack([f.cur_pixel for f in active]).astype(np.float32).reshape(-1, 1, 2)
    p1, st_fwd, _ = cv2.calcOpticalFlowPyrLK(
        prev8, cur8, p0, None, winSize=(win, win), maxLevel=max_level,
        criteria=criteria)
    p0_back, st_bwd, _ = cv2.calcOpticalFlowPyrLK(
        cur8, prev8, p1, None, winSize=(win, win), maxLevel=max_level,
        criteria=criteria)
    fb_err = np.linalg.norm(p0.reshape(-1, 2) - p0_back.reshape(-1, 2), axis=1)
    m = config.border_margin
    inside = ((p1[:, 0, 0] >= m) & (p1[:, 0, 0] <= w - 1 - m)
              & (p1[:, 0, 1] >= m) & (p1[:, 0, 1] <= h - 1 - m))
    ok = (st_fwd.ravel() == 1) & (st_bwd.ravel() == 1) \
        & (fb_err <= config.fb_max_error) & inside
    for f, good, new_pix in zip(active, ok, p1.reshape(-1, 2)):
        f.prev_pixel = f.cur_pixel
        f.cur_pixel = np.asarray(new_pix, dtype=float)
        f.valid = bool(good)
    return features


def replenish_features(features: list[TrackedFeature], world_map: VoxelMap,
                       params: CameraParams, nav_pose: RigidTransform,
                       image: ImageFrame,
                       config: VisionConfig) -> list[TrackedFeature]:
    """Top up the feature pool from the newest recently-visited map points.

    New features are admitted only into empty cells of a coarse pixel grid so
    the pool stays spread over the image, and only where the local gradient
    structure tensor has two strong eigenvalues. Flat neighborhoods freeze
    under optical flow and straight edges slide along themselves, both of
    which pass the round-trip tracking check while being wrong, so such
    candidates never enter the pool.
    """
    alive = [f for f in features if f.valid]
    if len(alive) >= config.min_features:
        return alive
    h, w = image.shape
    # keep at least ~8 grid columns so small images can still host a pool
    g = min(config.feature_grid_px, max(8, w // 8))
    occupied = {(int(f.cur_pixel[0] // g), int(f.cur_pixel[1] // g)) for f in alive}
    tracked_seqs = {f.map_point.seq for f in alive if f.map_point is not None}
    candidates = extract_recent_points(world_map)
    if not candidates:
        return alive
    positions = np.stack([mp.position for mp in candidates])
    pix, p_c, _, valid = projection_system(params, nav_pose, positions, None, None)
    m = config.border_margin
    inside = ((pix[:, 0] >= m) & (pix[:, 0] <= w - 1 - m)
              & (pix[:, 1] >= m) & (pix[:, 1] <= h - 1 - m))
    response = cv2.cornerMinEigenVal(_to_gray_u8(image.pixels), 3)
    gate = max(config.min_corner_response,
               config.feature_quality * float(response.max()))
    out = list(alive)
    for mp, pt, ok in zip(candidates, pix, valid & inside):
        if not ok or mp.seq in tracked_seqs:
            continue
        if response[int(round(pt[1])), int(round(pt[0]))] < gate:
            continue
        cell = (int(pt[0] // g), int(pt[1] // g))
        if cell in occupied:
            continue
        occupied.add(cell)
        out.append(TrackedFeature(position=mp.position.copy(), prev_pixel=pt,
                                  cur_pixel=pt, valid=True, map_point=mp))
    return out


# ---------------------------------------------------------------------------
# undistortion

def undistort_image(image: ImageFrame, params: CameraParams,
                    dist_coeffs: np.ndarray) -> ImageFrame:
    """Resample an image onto the ideal pinhole grid.

    Each output pixel is pulled from the raw image at the position given by
    the forward radial-tangential model, with bilinear interpolation. All-zero
    coefficients return the input unchanged.
    """
    dist = np.asarray(dist_coeffs, dtype=float).reshape(-1)
    if not np.any(dist):
        return image
    h, w = image.shape
    k = np.array([[params.fx, 0, params.cx],
                  [0, params.fy, params.cy],
                  [0, 0, 1.0]])
    map_u, map_v = cv2.initUndistortRectifyMap(k, dist, None, k, (w, h), cv2.CV_32FC1)
    out = cv2.remap(image.pixels, map_u, map_v, interpolation=cv2.INTER_LINEAR)
    return ImageFrame(stamp=image.stamp, pixels=out)


# ---------------------------------------------------------------------------
# map interaction

def extract_recent_points(world_map: VoxelMap) -> list[MapPoint]:
    """Newest stored point from each recently visited voxel."""
    out = []
    for key in world_map.recently_visited:
        mp = world_map.newest_point(key)
        if mp is not None:
            out.append(mp)
    return out


def render(world_map: VoxelMap, image: ImageFrame, params: CameraParams,
           nav_pose: RigidTransform, config: VisionConfig) -> RenderInfo:
    """Fuse image colors into every point of the recently visited voxels.

    Observation weight is 1/depth^2 capped at 1; the per-point running color
    average saturates at ``max_color_weight``. Points projecting outside the
    image or behind the camera keep their state, as do points whose bilinear
    support straddles a strong appearance discontinuity: a sample mixed
    across an edge measures neither side, so it must not enter the average.
    """
    view = world_map.visited_blocks()
    if not view.blocks:
        return RenderInfo(considered_seqs=np.empty(0, dtype=np.int64), n_rendered=0)
    pix, p_c, _, valid = projection_system(params, nav_pose, view.positions,
                                           None, None)
    h, w = image.shape
    inside = ((pix[:, 0] >= 0.0) & (pix[:, 0] <= w - 1.0)
              & (pix[:, 1] >= 0.0) & (pix[:, 1] <= h - 1.0))
    valid = valid & inside
    img = image.pixels if image.pixels.ndim == 3 else image.pixels[:, :, None]
    safe = np.where(valid[:, None], pix, 0.0)
    sampled = bilinear_sample(img, safe)
    u0 = np.clip(np.floor(safe[:, 0]).astype(int), 0, w - 2)
    v0 = np.clip(np.floor(safe[:, 1]).astype(int), 0, h - 2)
    support = np.stack([img[v0, u0], img[v0, u0 + 1],
                        img[v0 + 1, u0], img[v0 + 1, u0 + 1]])
    span = (support.max(axis=0) - support.min(axis=0)).max(axis=1)
    valid = valid & (span <= config.max_render_contrast)
    if sampled.shape[1] == 1:
        sampled = np.repeat(sampled, 3, axis=1)
    z = p_c[:, 2]
    w_obs = np.where(valid,
                     np.minimum(1.0, 1.0 / np.maximum(z, _MIN_DEPTH) ** 2), 0.0)
    w_old = view.weights
    denom = np.maximum(w_old + w_obs, 1e-12)
    fused = (view.colors * w_old[:, None] + sampled * w_obs[:, None]) / denom[:, None]
    colors = np.where(valid[:, None], fused, view.colors)
    weights = np.where(valid, np.minimum(w_old + w_obs, config.max_color_weight),
                       w_old)
    rendered = view.rendered | valid
    for cell, lo, hi in view.blocks:
        n = hi - lo
        cell.colors[:n] = colors[lo:hi]
        cell.weights[:n] = weights[lo:hi]
        cell.rendered[:n] = rendered[lo:hi]
    return RenderInfo(considered_seqs=view.seqs, n_rendered=int(valid.sum()))
