"""Per-voxel point moments: count, mean, and scatter.

The accumulator stores raw sums (sum of points and sum of outer
products) rather than the mean/scatter themselves, so that streaming
updates and pooled merges are exact componentwise additions. Mean and
scatter are derived on demand:

    mean    q = sum1 / N
    scatter A = sum2 / N - q q^T

Accumulators are plain value records: safe to move between threads, no
internal sharing, mutation requires exclusive access.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import InsufficientPointsError, RejectedInputError
from .geometry import canonical_normal_sign


@dataclass
class PlaneBasis:
    """Eigenbasis of a scatter matrix, eigenvalues in descending order.

    Columns of U are the eigenvectors u1, u2, u3; the plane normal is
    u3 (smallest eigenvalue), sign-canonicalized so that -n.q >= 0.
    """
    U: np.ndarray
    lam: np.ndarray

    @property
    def normal(self):
        return self.U[:, 2]


@dataclass
class MomentAccumulator:
    """Streaming count / first / second raw moments of a point set."""
    n_points: int = 0
    sum1: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sum2: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def copy(self):
        return MomentAccumulator(self.n_points, self.sum1.copy(), self.sum2.copy())

    def mean(self):
        if self.n_points == 0:
            return np.zeros(3)
        return self.sum1 / self.n_points

    def scatter(self):
        """Second central moment A = sum2/N - q q^T (positive semidefinite)."""
        if self.n_points == 0:
            return np.zeros((3, 3))
        q = self.mean()
        return self.sum2 / self.n_points - np.outer(q, q)


def accumulate_point(acc, p):
    """Add one point to the accumulator (in place; returns acc).

    Raises:
        RejectedInputError: if any coordinate is not finite.
    """
    p = np.asarray(p, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise RejectedInputError(f"point must be a finite 3-vector, got {p!r}")
    acc.sum1 += p
    acc.sum2 += np.outer(p, p)
    acc.n_points += 1
    return acc


def accumulate_points(acc, pts):
    """Add a batch of points via the active kernel backend (in place)."""
    pts = np.ascontiguousarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or not np.all(np.isfinite(pts)):
        raise RejectedInputError("points must be a finite (N, 3) array")
    _kernels.accumulate_moments(acc.sum1, acc.sum2, pts)
    acc.n_points += pts.shape[0]
    return acc


def merge_moments(a, b):
    """Pooled accumulator of two point sets; exact componentwise addition."""
    return MomentAccumulator(
        a.n_points + b.n_points, a.sum1 + b.sum1, a.sum2 + b.sum2)


def plane_basis(acc):
    """Eigendecomposition of the accumulator's scatter matrix.

    Returns a PlaneBasis with descending eigenvalues and the normal
    (third column) sign-canonicalized against the mean.

    Raises:
        InsufficientPointsError: fewer than 3 points accumulated.
    """
    if acc.n_points < 3:
        raise InsufficientPointsError(
            f"plane basis needs >= 3 points, have {acc.n_points}")
    A = acc.scatter()
    w, V = np.linalg.eigh(A)        # ascending
    lam = w[::-1].copy()
    U = V[:, ::-1].copy()
    U[:, 2] = canonical_normal_sign(U[:, 2], acc.mean())
    return PlaneBasis(U=U, lam=lam)
