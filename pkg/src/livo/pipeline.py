"""End-to-end odometry run: event merging, reconstruction, filtering, coloring.

Per packet the stage order is fixed: IMU propagation, motion compensation,
point-to-plane registration, map insertion, then (on image-aligned packets)
feature tracking, reprojection refinement, photometric refinement, color
rendering, and feature replenishment. Pose estimation never consumes camera
residuals; the camera stage only touches its own parameter block and colors.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, replace

import numpy as np

from .geometry import ImuSample, RigidTransform
from .lio import (LioConfig, NavState, RegistrationInfo, compensate_motion,
                  propagate, register)
from .sweep import (ImageEvent, RawSweep, StreamConfig, SweepReconstructor,
                    SyncedPacket)
from .vision import (CameraParams, ImageFrame, UpdateInfo, VisionConfig,
                     photometric_update, pnp_update, predict, projection_system,
                     render, replenish_features, track_features, undistort_image)
from .voxelmap import VoxelMap


class DegenerateRunError(RuntimeError):
    """Raised when registration stays degenerate for too many packets in a row."""


@dataclass
class PipelineConfig:
    stream: StreamConfig
    lio: LioConfig
    vision: VisionConfig
    camera: CameraParams
    lidar_to_body: RigidTransform
    dist_coeffs: np.ndarray | None = None
    use_vision: bool = True
    # False locks the camera calibration at its configured values: the vision
    # stage still colors the map but runs no tracking or parameter updates
    refine_camera: bool = True
    max_photometric_points: int = 300
    max_consecutive_degenerate: int = 10

    @classmethod
    def from_calib(cls, calib: dict, use_vision: bool = True) -> "PipelineConfig":
        """Build a config from a dataset's flat calibration mapping."""
        from .dataio import vec_to_transform

        stream = StreamConfig(lidar_sweep_hz=float(calib["lidar_sweep_hz"]),
                              camera_hz=float(calib["camera_hz"]))
        lio = LioConfig(imu_rate_hz=float(calib.get("imu_rate_hz", 200.0)))
        if "gravity" in calib:
            lio.gravity = np.asarray(calib["gravity"], dtype=float).reshape(3)
        camera = CameraParams(
            time_offset=float(calib.get("time_offset", 0.0)),
            extrinsic=vec_to_transform(calib["camera_to_body"]),
            fx=float(calib["fx"]), fy=float(calib["fy"]),
            cx=float(calib["cx"]), cy=float(calib["cy"]))
        dist = calib.get("dist_coeffs")
        if dist is not None:
            dist = np.atleast_1d(np.asarray(dist, dtype=float))
        return cls(stream=stream, lio=lio, vision=VisionConfig(), camera=camera,
                   lidar_to_body=vec_to_transform(calib["lidar_to_body"]),
                   dist_coeffs=dist, use_vision=use_vision)


def initial_camera_covariance() -> np.ndarray:
    """Prior spread for the camera parameter block: generous enough to absorb
    a few percent of intrinsic error, a couple of degrees of extrinsic error,
    and tens of milliseconds of clock offset."""
    return np.diag(np.concatenate([
        [1e-4],            # clock offset, sigma 10 ms
        np.full(3, 4e-4),  # extrinsic rotation, sigma ~1.1 deg
        np.full(3, 1e-4),  # extrinsic translation, sigma 1 cm
        [25.0, 25.0, 16.0, 16.0]]))  # focal lengths and principal point, px^2


@dataclass
class PacketRecord:
    """Everything the run learned from one reconstructed sweep."""

    stamp: float
    pose: RigidTransform
    velocity: np.ndarray
    registration: RegistrationInfo
    n_points: int
    aligned: bool
    image_stamp: float | None = None
    pnp: UpdateInfo | None = None
    photometric: UpdateInfo | None = None
    n_rendered: int = 0
    n_features: int = 0
    lidar_time_s: float = 0.0
    vision_time_s: float = 0.0
    wall_time_s: float = 0.0


@dataclass
class PipelineResult:
    records: list[PacketRecord]
    world_map: VoxelMap
    state: NavState
    camera: CameraParams
    camera_history: list[tuple[float, CameraParams]]
    dropped_images: int = 0

    @property
    def stamps(self) -> np.ndarray:
        return np.array([r.stamp for r in self.records])

    @property
    def positions(self) -> np.ndarray:
        return np.stack([r.pose.translation for r in self.records])

    @property
    def poses(self) -> list[RigidTransform]:
        return [r.pose for r in self.records]

    def timing(self) -> tuple[float, float, float]:
        """(total, mean, max) wall seconds over packets."""
        times = np.array([r.wall_time_s for r in self.records])
        if times.size == 0:
            return 0.0, 0.0, 0.0
        return float(times.sum()), float(times.mean()), float(times.max())

    def timing_breakdown(self) -> dict[str, float]:
        """Mean seconds per packet split into lidar / vision / total stages."""
        if not self.records:
            return {"lidar": 0.0, "vision": 0.0, "total": 0.0}
        n = len(self.records)
        return {
            "lidar": sum(r.lidar_time_s for r in self.records) / n,
            "vision": sum(r.vision_time_s for r in self.records) / n,
            "total": sum(r.wall_time_s for r in self.records) / n,
        }


def merge_events(sweeps: list[RawSweep], frames: list[ImageFrame],
                 imu: list[ImuSample]):
    """Single time-ordered stream; ties resolve IMU, then points, then images."""
    def points():
        for sweep in sweeps:
            for pt in sweep.points:
                yield (pt.stamp, 1, pt)

    def samples():
        for s in imu:
            yield (s.stamp, 0, s)

    def images():
        for f in frames:
            yield (f.stamp, 2, ImageEvent(stamp=f.stamp, frame=f))

    for _, _, event in heapq.merge(samples(), points(), images(),
                                   key=lambda e: (e[0], e[1])):
        yield event


class _VisionRunner:
    """Camera-parameter filter plus coloring, fed one aligned packet at a time."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.params = config.camera
        self.cov = initial_camera_covariance()
        self.features = []
        self.prev_frame: ImageFrame | None = None
        self.prev_nav_pose: RigidTransform | None = None
        self.prev_stamp: float | None = None

    def _photometric_inputs(self, world_map: VoxelMap):
        """Colored map points plus their pixels in the previous frame."""
        view = world_map.visited_blocks()
        positions = view.positions[view.rendered]
        colors = view.colors[view.rendered]
        cap = self.config.max_photometric_points
        if len(positions) > cap:
            idx = (np.arange(cap) * (len(positions) / cap)).astype(int)
            positions, colors = positions[idx], colors[idx]
        if len(positions) == 0:
            return None
        prev_pixels = None
        if self.prev_nav_pose is not None:
            pix, _, _, valid = projection_system(self.params, self.prev_nav_pose,
                                                 positions, None, None)
            positions, colors, pix = positions[valid], colors[valid], pix[valid]
            prev_pixels = pix
        return positions, colors, prev_pixels

    def step(self, packet: SyncedPacket, state: NavState,
             world_map: VoxelMap, record: PacketRecord) -> None:
        cfg = self.config.vision
        frame: ImageFrame = packet.image.frame
        if self.config.dist_coeffs is not None:
            frame = undistort_image(frame, self.params, self.config.dist_coeffs)
        gray = frame.pixels.ndim == 2

        if self.config.refine_camera:
            _, self.cov = predict(self.cov)
            dt = None
            if self.prev_stamp is not None:
                dt = frame.stamp - self.prev_stamp

            if self.prev_frame is not None and self.features:
                self.features = track_features(self.prev_frame, frame,
                                               self.features, cfg)

            self.params, self.cov, record.pnp = pnp_update(
                self.params, self.cov, self.features, state.pose, dt, cfg)

            photo = self._photometric_inputs(world_map)
            if photo is not None:
                positions, colors, prev_pixels = photo
                if gray:
                    colors = colors.mean(axis=1, keepdims=True)
                self.params, self.cov, record.photometric = photometric_update(
                    self.params, self.cov, positions, colors, prev_pixels,
                    frame, state.pose, dt, cfg)

        info = render(world_map, frame, self.params, state.pose, cfg)
        record.n_rendered = info.n_rendered

        if self.config.refine_camera:
            self.features = replenish_features(self.features, world_map,
                                               self.params, state.pose, frame,
                                               cfg)
        record.n_features = len(self.features)
        self.prev_frame = frame
        self.prev_nav_pose = state.pose
        self.prev_stamp = frame.stamp


def run_pipeline(sweeps: list[RawSweep], frames: list[ImageFrame],
                 imu: list[ImuSample], config: PipelineConfig,
                 initial_state: NavState | None = None) -> PipelineResult:
    """Run the full odometry and coloring stack over in-memory streams."""
    recon = SweepReconstructor(config.stream)
    world_map = VoxelMap(voxel_size=config.lio.voxel_size,
                         capacity=config.lio.cell_capacity,
                         min_point_spacing=config.lio.min_point_spacing)
    if initial_state is None:
        t0 = sweeps[0].begin if sweeps else 0.0
        initial_state = NavState.initial(stamp=t0)
    state = initial_state
    vision = _VisionRunner(config) if config.use_vision else None
    records: list[PacketRecord] = []
    camera_history: list[tuple[float, CameraParams]] = []
    consecutive_degenerate = 0

    def handle(packet: SyncedPacket) -> None:
        nonlocal state, consecutive_degenerate
        t_start = time.perf_counter()
        prev_state = state
        samples = packet.imu
        if samples:
            predicted = propagate(state, samples, config.lio)
        else:
            predicted = replace(state, stamp=packet.sweep.end)
        if samples:
            points, _ = compensate_motion(packet.sweep, prev_state, samples,
                                          config.lidar_to_body, config.lio.gravity)
        elif packet.sweep.points:
            points = np.stack([pt.position for pt in packet.sweep.points])
        else:
            points = np.empty((0, 3))

        new_state, reg = register(points, world_map, predicted,
                                  config.lidar_to_body, config.lio)
        if reg.status == "degenerate":
            consecutive_degenerate += 1
            if consecutive_degenerate > config.max_consecutive_degenerate:
                raise DegenerateRunError(
                    f"registration degenerate for {consecutive_degenerate} "
                    f"consecutive packets up to stamp {packet.sweep.end:.6f}")
        else:
            consecutive_degenerate = 0
        state = new_state

        if len(points):
            body = state.pose.compose(config.lidar_to_body)
            world = points @ body.rotation.as_matrix().T + body.translation
            world_map.update(world, stamp=packet.sweep.end)

        record = PacketRecord(stamp=state.stamp, pose=state.pose,
                              velocity=state.velocity, registration=reg,
                              n_points=len(packet.sweep.points),
                              aligned=packet.image is not None,
                              image_stamp=(packet.image.stamp
                                           if packet.image else None))
        record.lidar_time_s = time.perf_counter() - t_start
        if vision is not None and packet.image is not None:
            vision.step(packet, state, world_map, record)
            camera_history.append((state.stamp, vision.params))
            record.vision_time_s = (time.perf_counter() - t_start
                                    - record.lidar_time_s)
        record.wall_time_s = time.perf_counter() - t_start
        records.append(record)

    for event in merge_events(sweeps, frames, imu):
        for packet in recon.push(event):
            handle(packet)
    for packet in recon.flush():
        if packet.sweep.points:
            handle(packet)

    camera = vision.params if vision is not None else config.camera
    return PipelineResult(records=records, world_map=world_map, state=state,
                          camera=camera, camera_history=camera_history,
                          dropped_images=recon.dropped_images)
