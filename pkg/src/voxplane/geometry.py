"""Small SO(3)/SE(3) helpers used by registration and the pipeline."""
import math

import numpy as np


def skew(v):
    """Skew-symmetric matrix such that skew(v) @ w == cross(v, w)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def exp_so3(phi):
    """Rodrigues exponential map from a rotation vector to a rotation matrix."""
    phi = np.asarray(phi, dtype=float)
    angle = math.sqrt(float(phi @ phi))
    if angle < 1e-12:
        # second-order series keeps the result orthogonal to machine precision
        K = skew(phi)
        return np.eye(3) + K + 0.5 * (K @ K)
    axis = phi / angle
    K = skew(axis)
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def log_so3(R):
    """Rotation vector of R (inverse of exp_so3)."""
    cos_angle = max(-1.0, min(1.0, (np.trace(R) - 1.0) / 2.0))
    angle = math.acos(cos_angle)
    if angle < 1e-9:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if abs(math.pi - angle) < 1e-6:
        # near pi the off-diagonal form is ill-conditioned; use the symmetric part
        S = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(S), 0.0))
        # fix signs from the largest component
        k = int(np.argmax(axis))
        if axis[k] > 0:
            axis = axis * np.sign(S[k, :] / axis[k])
            axis[k] = abs(axis[k])
        return angle * axis / np.linalg.norm(axis)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return angle / (2.0 * math.sin(angle)) * vee


def rotation_to_quaternion(R):
    """Unit quaternion (qx, qy, qz, qw) for a rotation matrix."""
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        qw = 0.25 * s
        qx = (R[2, 1] - R[1, 2]) / s
        qy = (R[0, 2] - R[2, 0]) / s
        qz = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        qw = (R[2, 1] - R[1, 2]) / s
        qx = 0.25 * s
        qy = (R[0, 1] + R[1, 0]) / s
        qz = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        qw = (R[0, 2] - R[2, 0]) / s
        qx = (R[0, 1] + R[1, 0]) / s
        qy = 0.25 * s
        qz = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        qw = (R[1, 0] - R[0, 1]) / s
        qx = (R[0, 2] + R[2, 0]) / s
        qy = (R[1, 2] + R[2, 1]) / s
        qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    return q / np.linalg.norm(q)


def canonical_normal_sign(n, q):
    """Return n with the sign fixed so that d = -n.q >= 0.

    Ties (d exactly zero) are broken by making the first nonzero
    component of n positive, so that a plane through the origin still
    has a unique representative.
    """
    d = -float(n @ q)
    if d < 0.0:
        return -n
    if d == 0.0:
        for c in n:
            if c != 0.0:
                return n if c > 0.0 else -n
    return n
