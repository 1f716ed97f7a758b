"""LiDAR-inertial odometry with image-aligned sweeps and colored mapping.

The package splits along sensor boundaries: ``sweep`` re-cuts the raw point
stream at image stamps, ``lio`` owns all pose estimation, ``vision`` refines
camera parameters and paints the map, ``sim`` fabricates test worlds, and
``pipeline``/``cli`` tie the stages together.
"""

from .geometry import ImuSample, RigidTransform, Rotation
from .lio import LioConfig, NavState
from .sweep import (ImageEvent, LidarPoint, RawSweep, ReconstructedSweep,
                    StreamConfig, SweepReconstructor, SyncedPacket)
from .vision import CameraParams, ImageFrame, VisionConfig
from .voxelmap import VoxelMap

__version__ = "0.1.0"

__all__ = [
    "CameraParams", "ImageEvent", "ImageFrame", "ImuSample", "LidarPoint",
    "LioConfig", "NavState", "RawSweep", "ReconstructedSweep", "RigidTransform",
    "Rotation", "StreamConfig", "SweepReconstructor", "SyncedPacket",
    "VisionConfig", "VoxelMap", "__version__",
]
