"""Sweep reconstruction: re-cutting a LiDAR point stream at image timestamps.

A continuous stream of individually stamped LiDAR points is segmented into
reconstructed sweeps whose end stamps coincide with (a subset of) the camera
stamps, so that downstream state estimates land exactly on image times. The
cutting policy depends on how the camera rate compares with the sweep rate:

* rate mode HIGH  (camera > 2x sweep rate): image stamps are first thinned so
  no two kept stamps are closer than half a sweep period, then every kept
  stamp closes a sweep.
* rate mode MID   (sweep rate < camera <= 2x): every image stamp closes a
  sweep.
* rate mode LOW   (camera <= sweep rate): sweeps close either at an image
  stamp, when enough of the sweep period has elapsed since the sweep began,
  or at one full period when no image is due shortly after; only the former
  produces an image-aligned sweep.

Every pushed point ends up in exactly one emitted packet; only image events
may be dropped. Packets are withheld until the IMU stream covers the sweep
interval, and each packet carries a boundary IMU sample interpolated exactly
at the sweep end so integration lands on the image stamp bit-for-bit.
"""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .geometry import TIME_EPS, ImuSample

log = logging.getLogger(__name__)


class StreamOrderError(ValueError):
    """An event arrived with a stamp behind the already-processed stream."""


class RateMode(enum.Enum):
    HIGH_CAMERA = "high_camera"
    MID_CAMERA = "mid_camera"
    LOW_CAMERA = "low_camera"


@dataclass(slots=True)
class LidarPoint:
    """A single LiDAR return with its own capture stamp."""

    position: np.ndarray
    stamp: float
    intensity: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)


@dataclass
class RawSweep:
    """One hardware revolution of the LiDAR, stamps in [begin, end)."""

    points: list[LidarPoint]
    begin: float
    end: float

    def __post_init__(self):
        if self.end <= self.begin:
            raise ValueError(f"raw sweep span [{self.begin!r}, {self.end!r}) is empty")


@dataclass(slots=True)
class ImageEvent:
    """Camera stamp entering the merged stream; frame payload is opaque here."""

    stamp: float
    frame: object | None = None


@dataclass
class ReconstructedSweep:
    """A re-cut sweep; when aligned_to_image, end equals an image stamp."""

    points: list[LidarPoint]
    begin: float
    end: float
    aligned_to_image: bool


@dataclass
class SyncedPacket:
    """A reconstructed sweep plus the IMU samples covering its interval."""

    sweep: ReconstructedSweep
    image: ImageEvent | None
    imu: list[ImuSample]


@dataclass(frozen=True)
class StreamConfig:
    lidar_sweep_hz: float
    camera_hz: float
    min_fraction: float = 0.5

    def __post_init__(self):
        if self.lidar_sweep_hz <= 0 or self.camera_hz <= 0:
            raise ValueError("sensor rates must be positive")
        if not 0.0 < self.min_fraction < 1.0:
            raise ValueError("min_fraction must lie in (0, 1)")


def classify_mode(config: StreamConfig) -> RateMode:
    if config.camera_hz > 2.0 * config.lidar_sweep_hz:
        return RateMode.HIGH_CAMERA
    if config.camera_hz > config.lidar_sweep_hz:
        return RateMode.MID_CAMERA
    return RateMode.LOW_CAMERA


def downsample_images(stamps, config: StreamConfig) -> list[float]:
    """Greedy earliest-first thinning to at most twice the sweep rate.

    Keeps the first stamp, then each stamp at least 1/(2*lidar_sweep_hz) - 1e-9
    after the previously kept one. Dropped stamps are discarded entirely.
    """
    spacing = 0.5 / config.lidar_sweep_hz
    kept: list[float] = []
    for s in stamps:
        if not kept or s - kept[-1] >= spacing - TIME_EPS:
            kept.append(s)
    return kept


@dataclass
class _Boundary:
    end: float
    image: ImageEvent | None  # None for period-driven closes


class SweepReconstructor:
    """Streaming splitter from merged (point | image | IMU) events to packets.

    Events must arrive in non-decreasing stamp order across all three kinds.
    ``push`` may emit zero or more packets; ``flush`` drains whatever remains
    once the stream has ended.
    """

    def __init__(self, config: StreamConfig):
        self.config = config
        self.mode = classify_mode(config)
        self.period = 1.0 / config.lidar_sweep_hz
        self.lookahead = config.min_fraction * self.period
        self._image_spacing = 0.5 / config.lidar_sweep_hz
        self._last_kept_image: float | None = None
        self._points: deque[LidarPoint] = deque()
        self._imu: deque[ImuSample] = deque()
        self._imu_before: ImuSample | None = None  # newest sample at/behind last cut
        self._pending_images: deque[ImageEvent] = deque()
        self._open_begin: float | None = None
        self._last_end: float | None = None
        self._now = -np.inf
        self._last_imu_stamp = -np.inf
        self._saw_imu = False
        self.dropped_images = 0

    # -- event intake -------------------------------------------------------

    def push(self, event) -> list[SyncedPacket]:
        stamp = event.stamp
        if stamp < self._now - TIME_EPS:
            raise StreamOrderError(
                f"event stamp {stamp!r} precedes already-processed stamp {self._now!r}")
        if isinstance(event, LidarPoint):
            if self._open_begin is None:
                self._open_begin = stamp
            self._points.append(event)
        elif isinstance(event, ImuSample):
            self._saw_imu = True
            self._last_imu_stamp = stamp
            self._imu.append(event)
        elif isinstance(event, ImageEvent):
            self._take_image(event)
        else:
            raise TypeError(f"unsupported event type {type(event).__name__}")
        self._now = max(self._now, stamp)
        return self._drain(final=False)

    def flush(self) -> list[SyncedPacket]:
        """Resolve pending cuts and emit the open partial sweep, if any."""
        packets = self._drain(final=True)
        if self._points:
            end = self._points[-1].stamp
            begin = self._last_end if self._last_end is not None else self._open_begin
            packets.append(self._emit(end, None, begin))
        return packets

    def _take_image(self, event: ImageEvent) -> None:
        if self.mode is RateMode.HIGH_CAMERA:
            if (self._last_kept_image is not None
                    and event.stamp - self._last_kept_image < self._image_spacing - TIME_EPS):
                self.dropped_images += 1
                return
            self._last_kept_image = event.stamp
        if self._last_end is not None and event.stamp <= self._last_end + TIME_EPS:
            self.dropped_images += 1
            return
        self._pending_images.append(event)

    # -- cut resolution -----------------------------------------------------

    def _drain(self, final: bool) -> list[SyncedPacket]:
        packets: list[SyncedPacket] = []
        while True:
            boundary = self._next_boundary(final)
            if boundary is None:
                break
            if not self._ready(boundary.end, final):
                break
            if boundary.image is not None:
                self._pending_images.popleft()
            begin = self._last_end if self._last_end is not None else self._open_begin
            if begin is None or boundary.end <= begin + TIME_EPS:
                # no point data yet reaches this cut; nothing to segment
                if boundary.image is not None:
                    self.dropped_images += 1
                continue
            packets.append(self._emit(boundary.end, boundary.image, begin))
        return packets

    def _next_boundary(self, final: bool) -> _Boundary | None:
        if self.mode in (RateMode.HIGH_CAMERA, RateMode.MID_CAMERA):
            if self._pending_images:
                img = self._pending_images[0]
                return _Boundary(img.stamp, img)
            return None
        return self._next_boundary_low(final)

    def _next_boundary_low(self, final: bool) -> _Boundary | None:
        while True:
            begin = self._last_end if self._last_end is not None else self._open_begin
            if begin is None:
                if self._pending_images:
                    # no sweep is open, nothing for this image to close
                    self._pending_images.popleft()
                    self.dropped_images += 1
                    continue
                return None
            img = self._pending_images[0] if self._pending_images else None
            cut = begin + self.period
            window_end = cut + self.lookahead
            if img is not None and img.stamp <= window_end + TIME_EPS:
                if img.stamp - begin >= self.lookahead - TIME_EPS:
                    return _Boundary(img.stamp, img)
                # sweep still too short to end at this image: skip the image
                self._pending_images.popleft()
                self.dropped_images += 1
                continue
            # no image due inside the wait window; close at one full period
            # once the stream provably moved past the window
            if self._now > window_end + TIME_EPS:
                return _Boundary(cut, None)
            return None

    def _ready(self, end: float, final: bool) -> bool:
        if not final and self._now <= end + TIME_EPS:
            return False  # a point at exactly `end` may still arrive
        if self._saw_imu and not final and self._last_imu_stamp < end - TIME_EPS:
            return False  # hold until IMU covers the interval
        return True

    # -- packet assembly ----------------------------------------------------

    def _emit(self, end: float, image: ImageEvent | None, begin: float) -> SyncedPacket:
        points: list[LidarPoint] = []
        while self._points and self._points[0].stamp <= end + TIME_EPS:
            points.append(self._points.popleft())
        imu = self._collect_imu(begin, end)
        sweep = ReconstructedSweep(points=points, begin=begin, end=end,
                                   aligned_to_image=image is not None)
        self._last_end = end
        self._open_begin = end
        return SyncedPacket(sweep=sweep, image=image, imu=imu)

    def _collect_imu(self, begin: float, end: float) -> list[ImuSample]:
        taken: list[ImuSample] = []
        while self._imu and self._imu[0].stamp < end - TIME_EPS:
            s = self._imu.popleft()
            if s.stamp > begin + TIME_EPS:
                taken.append(s)
            else:
                self._imu_before = s
        boundary = self._boundary_sample(end)
        if boundary is not None:
            taken.append(boundary)
        if taken:
            self._imu_before = taken[-1]
        return taken

    def _boundary_sample(self, end: float) -> ImuSample | None:
        """Sample exactly at the cut stamp, interpolated from its neighbours."""
        if self._imu and abs(self._imu[0].stamp - end) <= TIME_EPS:
            s = self._imu.popleft()
            return ImuSample(end, s.gyro, s.accel)
        after = self._imu[0] if self._imu else None
        before = self._imu_before
        if after is None:
            if before is None:
                return None
            # stream ended short of the cut: hold the last rates
            return ImuSample(end, before.gyro, before.accel)
        if before is None or after.stamp - before.stamp < TIME_EPS:
            return ImuSample(end, after.gyro, after.accel)
        u = (end - before.stamp) / (after.stamp - before.stamp)
        u = min(max(u, 0.0), 1.0)
        gyro = (1.0 - u) * before.gyro + u * after.gyro
        accel = (1.0 - u) * before.accel + u * after.accel
        return ImuSample(end, gyro, accel)
