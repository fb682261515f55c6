"""Trajectories, trajectory file formats, and the ATE metric."""
import numpy as np

from .errors import RejectedInputError
from .geometry import rotation_to_quaternion


class Trajectory:
    """Ordered pose sequence with strictly increasing timestamps."""

    def __init__(self, poses=None):
        self.poses = []
        for p in poses or []:
            self.append(p)

    def append(self, pose):
        if self.poses and pose.timestamp <= self.poses[-1].timestamp:
            raise RejectedInputError(
                f"timestamps must increase strictly "
                f"({pose.timestamp} after {self.poses[-1].timestamp})")
        self.poses.append(pose)

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    def translations(self):
        return np.array([p.translation for p in self.poses])


def write_kitti_trajectory(traj, path):
    """Row-major 3x4 [R|t], twelve floats per line."""
    with open(path, "w") as f:
        for p in traj:
            m = np.hstack([p.rotation, p.translation[:, None]])
            f.write(" ".join(f"{v:.9e}" for v in m.ravel()) + "\n")


def write_tum_trajectory(traj, path):
    """One 'timestamp tx ty tz qx qy qz qw' line per pose."""
    with open(path, "w") as f:
        for p in traj:
            q = rotation_to_quaternion(p.rotation)
            t = p.translation
            f.write(f"{p.timestamp:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                    f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")


def align_rigid(source, target):
    """Closed-form least-squares rigid transform (R, t): R@source + t ~ target."""
    src_mean = source.mean(axis=0)
    tgt_mean = target.mean(axis=0)
    H = (target - tgt_mean).T @ (source - src_mean)
    U, _, Vt = np.linalg.svd(H)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ S @ Vt
    t = tgt_mean - R @ src_mean
    return R, t


def ate(estimated, ground_truth):
    """Absolute trajectory error: rigid alignment, then translation RMSE.

    Raises:
        RejectedInputError: trajectory lengths differ.
    """
    if len(estimated) != len(ground_truth):
        raise RejectedInputError(
            f"trajectory lengths differ: {len(estimated)} vs {len(ground_truth)}")
    est = estimated.translations()
    gt = ground_truth.translations()
    R, t = align_rigid(est, gt)
    diff = gt - (est @ R.T + t)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
