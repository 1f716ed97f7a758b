"""File formats: key-value configs, TUM trajectories, PLY clouds, netpbm
images, and the on-disk dataset layout used by the CLI.

A dataset directory looks like:

    calib.txt        sensor layout and rates, flat key = value lines
    imu.csv          stamp,gx,gy,gz,ax,ay,az
    sweeps.csv       file,begin,end  (one raw sweep per row)
    sweeps/*.bin     packed records x,y,z,intensity (f32) + stamp (f64)
    images.csv       file,stamp
    images/*.ppm     binary P6 (or P5 when grayscale)
    gt.txt           optional ground truth, TUM format
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import ImuSample, RigidTransform, Rotation
from .sweep import LidarPoint, RawSweep
from .vision import ImageFrame

POINT_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                        ("intensity", "<f4"), ("stamp", "<f8")])


# ---------------------------------------------------------------------------
# flat key = value configs

def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines; values become floats, vectors, or strings."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        parts = value.split()
        try:
            nums = [float(p) for p in parts]
        except ValueError:
            out[key] = value
            continue
        if len(nums) == 1:
            out[key] = nums[0]
        elif nums:
            out[key] = np.array(nums)
        else:
            out[key] = ""
    return out


def read_config(path) -> dict:
    return parse_config_text(Path(path).read_text())


def format_config(values: dict) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, np.ndarray):
            rendered = " ".join(f"{v:.12g}" for v in np.asarray(value).ravel())
        elif isinstance(value, float):
            rendered = f"{value:.12g}"
        else:
            rendered = str(value)
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"


def write_config(path, values: dict) -> None:
    Path(path).write_text(format_config(values))


def transform_to_vec(tf: RigidTransform) -> np.ndarray:
    """Pose as x y z qx qy qz qw (translation then quaternion, scalar last)."""
    w, x, y, z = tf.rotation.q
    return np.concatenate([tf.translation, [x, y, z, w]])


def vec_to_transform(vec) -> RigidTransform:
    vec = np.asarray(vec, dtype=float).ravel()
    if vec.shape != (7,):
        raise ValueError(f"expected 7 values (x y z qx qy qz qw), got {vec.shape}")
    x, y, z, w = vec[3:]
    return RigidTransform(Rotation(np.array([w, x, y, z])), vec[:3].copy())


# ---------------------------------------------------------------------------
# TUM trajectories

def write_tum(path, stamps, poses: list[RigidTransform]) -> None:
    """One `stamp tx ty tz qx qy qz qw` line per pose, 9 decimal places."""
    lines = []
    for stamp, pose in zip(stamps, poses):
        v = transform_to_vec(pose)
        fields = [f"{stamp:.9f}"] + [f"{x:.9f}" for x in v]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path):
    """Returns (stamps (N,), positions (N, 3), quaternions (N, 4) scalar-first)."""
    stamps, positions, quats = [], [], []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"expected 8 fields per trajectory line, got {len(parts)}")
        vals = [float(p) for p in parts]
        stamps.append(vals[0])
        positions.append(vals[1:4])
        qx, qy, qz, qw = vals[4:]
        quats.append([qw, qx, qy, qz])
    return np.array(stamps), np.array(positions), np.array(quats)


# ---------------------------------------------------------------------------
# PLY point clouds

_PLY_HEADER = """ply
format binary_little_endian 1.0
element vertex {n}
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
end_header
"""


def write_ply(path, positions: np.ndarray, colors: np.ndarray) -> None:
    """Binary little-endian PLY with float32 xyz and uint8 rgb."""
    positions = np.asarray(positions, dtype=np.float32).reshape(-1, 3)
    colors = np.asarray(colors, dtype=float).reshape(-1, 3)
    if len(colors) != len(positions):
        raise ValueError("positions and colors must have matching length")
    rgb = np.clip(np.rint(colors), 0, 255).astype(np.uint8)
    rec = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                    ("r", "u1"), ("g", "u1"), ("b", "u1")])
    data = np.empty(len(positions), dtype=rec)
    data["x"], data["y"], data["z"] = positions.T
    data["r"], data["g"], data["b"] = rgb.T
    with open(path, "wb") as fh:
        fh.write(_PLY_HEADER.format(n=len(positions)).encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path):
    """Reads clouds written by write_ply. Returns (positions, colors uint8)."""
    blob = Path(path).read_bytes()
    marker = b"end_header\n"
    split = blob.find(marker)
    if split < 0:
        raise ValueError("missing PLY header terminator")
    header = blob[:split].decode("ascii").splitlines()
    if not header or header[0] != "ply":
        raise ValueError("not a PLY file")
    n = None
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
    if n is None:
        raise ValueError("missing vertex element")
    body = blob[split + len(marker):]
    rec = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                    ("r", "u1"), ("g", "u1"), ("b", "u1")])
    if len(body) != n * rec.itemsize:
        raise ValueError(f"expected {n * rec.itemsize} payload bytes, got {len(body)}")
    data = np.frombuffer(body, dtype=rec)
    positions = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    colors = np.stack([data["r"], data["g"], data["b"]], axis=1)
    return positions, colors


# ---------------------------------------------------------------------------
# netpbm images (binary P5 / P6)

def write_image_file(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    data = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    if data.ndim == 2:
        magic = b"P5"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def read_image_file(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields = []
    pos = 0
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # with possible '#' comments; pixel data starts right after maxval
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    if magic == b"P5":
        shape, count = (h, w), w * h
    elif magic == b"P6":
        shape, count = (h, w, 3), w * h * 3
    else:
        raise ValueError(f"unsupported magic {magic!r}")
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=pos)
    return data.reshape(shape).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset directories

@dataclass
class Dataset:
    sweeps: list[RawSweep]
    frames: list[ImageFrame]
    imu: list[ImuSample]
    calib: dict
    gt_stamps: np.ndarray | None = None
    gt_positions: np.ndarray | None = None
    gt_quats: np.ndarray | None = None


def sweep_to_records(sweep: RawSweep) -> np.ndarray:
    rec = np.empty(len(sweep.points), dtype=POINT_DTYPE)
    for i, pt in enumerate(sweep.points):
        rec[i] = (pt.position[0], pt.position[1], pt.position[2],
                  pt.intensity, pt.stamp)
    return rec


def records_to_points(rec: np.ndarray) -> list[LidarPoint]:
    return [LidarPoint(position=np.array([r["x"], r["y"], r["z"]], dtype=float),
                       stamp=float(r["stamp"]), intensity=float(r["intensity"]))
            for r in rec]


def write_dataset(root, sweeps: list[RawSweep], frames: list[ImageFrame],
                  imu: list[ImuSample], calib: dict,
                  gt_stamps=None, gt_poses=None) -> None:
    root = Path(root)
    (root / "sweeps").mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(parents=True, exist_ok=True)
    write_config(root / "calib.txt", calib)

    rows = ["stamp,gx,gy,gz,ax,ay,az"]
    for s in imu:
        rows.append(",".join([f"{s.stamp:.9f}"]
                             + [f"{v:.9g}" for v in s.gyro]
                             + [f"{v:.9g}" for v in s.accel]))
    (root / "imu.csv").write_text("\n".join(rows) + "\n")

    index = ["file,begin,end"]
    for i, sweep in enumerate(sweeps):
        name = f"sweeps/{i:06d}.bin"
        sweep_to_records(sweep).tofile(root / name)
        index.append(f"{name},{sweep.begin:.9f},{sweep.end:.9f}")
    (root / "sweeps.csv").write_text("\n".join(index) + "\n")

    index = ["file,stamp"]
    for i, frame in enumerate(frames):
        ext = "pgm" if frame.pixels.ndim == 2 else "ppm"
        name = f"images/{i:06d}.{ext}"
        write_image_file(root / name, frame.pixels)
        index.append(f"{name},{frame.stamp:.9f}")
    (root / "images.csv").write_text("\n".join(index) + "\n")

    if gt_stamps is not None and gt_poses is not None:
        write_tum(root / "gt.txt", gt_stamps, gt_poses)


def read_dataset(root) -> Dataset:
    root = Path(root)
    calib = read_config(root / "calib.txt")

    imu = []
    for line in (root / "imu.csv").read_text().splitlines()[1:]:
        vals = [float(v) for v in line.split(",")]
        imu.append(ImuSample(vals[0], np.array(vals[1:4]), np.array(vals[4:7])))

    sweeps = []
    for line in (root / "sweeps.csv").read_text().splitlines()[1:]:
        name, begin, end = line.split(",")
        rec = np.fromfile(root / name, dtype=POINT_DTYPE)
        sweeps.append(RawSweep(points=records_to_points(rec),
                               begin=float(begin), end=float(end)))

    frames = []
    for line in (root / "images.csv").read_text().splitlines()[1:]:
        name, stamp = line.split(",")
        frames.append(ImageFrame(stamp=float(stamp),
                                 pixels=read_image_file(root / name)))

    ds = Dataset(sweeps=sweeps, frames=frames, imu=imu, calib=calib)
    gt_path = root / "gt.txt"
    if gt_path.exists():
        ds.gt_stamps, ds.gt_positions, ds.gt_quats = read_tum(gt_path)
    return ds
