"""KITTI odometry dataset ingestion: velodyne binaries and pose files."""
import os

import numpy as np

from .errors import MalformedFileError
from .registration import Pose
from .trajectory import Trajectory

# velodyne record: little-endian float32 (x, y, z, intensity)
_RECORD_BYTES = 16


def read_kitti_bin(path):
    """Points from one velodyne scan; intensity is discarded.

    Raises:
        MalformedFileError: file size is not a whole number of records.
    """
    size = os.path.getsize(path)
    if size % _RECORD_BYTES != 0:
        raise MalformedFileError(
            f"{path}: {size} bytes is not a multiple of {_RECORD_BYTES}")
    raw = np.fromfile(path, dtype="<f4").reshape(-1, 4)
    return raw[:, :3].astype(np.float64)


def write_kitti_bin(points, path, intensity=None):
    """Serialize points in the velodyne record layout (testing aid)."""
    points = np.asarray(points, dtype=np.float32)
    out = np.zeros((len(points), 4), dtype="<f4")
    out[:, :3] = points
    if intensity is not None:
        out[:, 3] = intensity
    out.tofile(path)


def read_kitti_poses(path, dt=0.1):
    """Trajectory from a KITTI pose file (12 floats per line, row-major 3x4).

    KITTI pose files carry no timestamps; frames are spaced `dt` apart.
    """
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 12:
                raise MalformedFileError(
                    f"{path}:{lineno + 1}: expected 12 values, got {len(tokens)}")
            vals = np.array([float(v) for v in tokens]).reshape(3, 4)
            poses.append(Pose(rotation=vals[:, :3].copy(),
                              translation=vals[:, 3].copy(),
                              timestamp=lineno * dt))
    return Trajectory(poses)


def list_kitti_scans(bin_dir):
    """Sorted .bin scan paths of a sequence directory."""
    names = sorted(n for n in os.listdir(bin_dir) if n.endswith(".bin"))
    return [os.path.join(bin_dir, n) for n in names]
