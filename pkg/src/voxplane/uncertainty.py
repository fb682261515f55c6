"""Point-free plane uncertainty.

A voxel's plane covariance is a sum over every point ever inserted, with
per-point Jacobians that depend on the current eigenbasis. Recomputing
that sum per update would need the full point list; instead three
cumulative statistic families are maintained (all sums over points, so
concatenation of streams is componentwise addition):

    X_{j,k} = sum_i  cov_i[j,k] * p_i p_i^T      6 symmetric 3x3  (36)
    Y_j     = sum_i  cov_i e_j  p_i^T            3 general 3x3    (27)
    Z       = sum_i  cov_i                       1 symmetric 3x3   (6)

for a total of exactly 69 stored scalars, independent of the point
count. ``plane_covariance`` assembles the full 6x6 covariance of the
stacked (normal, center) vector from nothing but these statistics plus
the moment-derived (N, q, U, lam); ``plane_covariance_direct`` is the
brute-force oracle that iterates over an explicit point list and is kept
entirely independent of the assembly path.

Per-point covariances are frozen at insertion time: the statistics bake
in whatever pose estimate produced the world-frame covariance, and old
points are never re-weighted (impossible without the points).
"""
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._kernels.layout import PAIR_BLOCK, STATS_SIZE, unpack_stats, unpack_symmetric
from .errors import (
    InsufficientPointsError,
    RejectedInputError,
    SpectralDegeneracyError,
)
from .geometry import canonical_normal_sign

# relative eigenvalue-gap floor below which the normal sensitivity blows up
GAP_RTOL = 1e-9


@dataclass
class UncertaintyStats:
    """The three cumulative statistic families, packed into 69 scalars."""
    data: np.ndarray = field(default_factory=lambda: np.zeros(STATS_SIZE))

    def copy(self):
        return UncertaintyStats(self.data.copy())

    def x_pair(self, j, k):
        """Dense X_{j,k} (indices 0..2; symmetric in j, k)."""
        b = PAIR_BLOCK[(j, k)]
        return unpack_symmetric(self.data[6 * b: 6 * b + 6])

    def y(self, j):
        """Dense Y_j (index 0..2)."""
        return self.data[36 + 9 * j: 36 + 9 * (j + 1)].reshape(3, 3).copy()

    def z(self):
        """Dense Z."""
        return unpack_symmetric(self.data[63:69])

    def to_array(self):
        """Serialized payload: exactly 69 scalars."""
        return self.data.copy()

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (STATS_SIZE,):
            raise RejectedInputError(
                f"uncertainty payload must have {STATS_SIZE} scalars, got {arr.shape}")
        return cls(arr.copy())


def merge_uncertainty(a, b):
    """Pooled statistics of two point streams (componentwise sum)."""
    return UncertaintyStats(a.data + b.data)


def _check_covs(covs):
    covs = np.ascontiguousarray(covs, dtype=float)
    if covs.ndim != 3 or covs.shape[1:] != (3, 3) or not np.all(np.isfinite(covs)):
        raise RejectedInputError("covariances must be a finite (N, 3, 3) array")
    skew = np.abs(covs - covs.transpose(0, 2, 1)).max(initial=0.0)
    if skew > 1e-9:
        raise RejectedInputError(
            f"point covariance asymmetric beyond tolerance ({skew:.3e} > 1e-09)")
    # exact symmetry keeps X_{j,k} == X_{k,j} true by construction
    return 0.5 * (covs + covs.transpose(0, 2, 1))


def accumulate_uncertainty(stats, p, cov_p):
    """Add one (point, covariance) observation to the statistics (in place)."""
    return accumulate_uncertainty_batch(
        stats, np.asarray(p, dtype=float).reshape(1, 3),
        np.asarray(cov_p, dtype=float).reshape(1, 3, 3))


def accumulate_uncertainty_batch(stats, pts, covs):
    """Batch statistics update via the active kernel backend (in place).

    The moment sums are updated by the same kernel call elsewhere; this
    entry point touches only the 69 statistics scalars.
    """
    pts = np.ascontiguousarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or not np.all(np.isfinite(pts)):
        raise RejectedInputError("points must be a finite (N, 3) array")
    covs = _check_covs(covs)
    if covs.shape[0] != pts.shape[0]:
        raise RejectedInputError("points and covariances must pair up")
    # dummy moment sinks: the kernel fuses moments+stats, callers that
    # track moments separately use voxel-level accumulate instead
    sink1 = np.zeros(3)
    sink2 = np.zeros((3, 3))
    _kernels.accumulate(sink1, sink2, stats.data, pts, covs)
    return stats


@dataclass
class ShapeFactors:
    """Normal-sensitivity factors F_m; F[2] is identically zero."""
    F: np.ndarray  # (3, 3, 3)


def shape_factors(n_points, basis):
    """Factors coupling point perturbations to normal perturbations.

        F_m = (u_m n^T + n u_m^T) / (N (lam3 - lam_m))   for m in {1, 2}
        F_3 = 0

    Raises:
        SpectralDegeneracyError: eigenvalue gap to lam3 below the
            relative floor; the caller should mark the plane invalid.
    """
    if n_points < 1:
        raise InsufficientPointsError("shape factors need at least one point")
    lam = basis.lam
    eps_gap = GAP_RTOL * max(lam[0], 1e-12)
    if lam[0] - lam[2] < eps_gap or lam[1] - lam[2] < eps_gap:
        raise SpectralDegeneracyError(
            f"eigenvalue gap too small for stable normal sensitivity: lam={lam}")
    n = basis.U[:, 2]
    F = np.zeros((3, 3, 3))
    for m in range(2):
        c = 1.0 / (n_points * (lam[2] - lam[m]))
        F[m] = c * (np.outer(basis.U[:, m], n) + np.outer(n, basis.U[:, m]))
    return ShapeFactors(F=F)


@dataclass
class PlaneCovariance:
    """6x6 covariance of the stacked (normal, center) vector."""
    sigma: np.ndarray

    @property
    def nn(self):
        return self.sigma[:3, :3]

    @property
    def nq(self):
        return self.sigma[:3, 3:]

    @property
    def qq(self):
        return self.sigma[3:, 3:]


def plane_covariance(stats, acc, basis):
    """Assemble the plane covariance from fixed-size state only.

    Touches nothing but (X, Y, Z, N, q, U, lam), so the cost is
    independent of how many points were accumulated.

    Raises:
        SpectralDegeneracyError: same gap condition as shape_factors.
    """
    out = np.empty((6, 6))
    status = _kernels.assemble_covariance(
        stats.data, float(acc.n_points),
        np.ascontiguousarray(acc.mean()),
        np.ascontiguousarray(basis.U, dtype=float),
        np.ascontiguousarray(basis.lam, dtype=float), out)
    if status != 0:
        raise SpectralDegeneracyError(
            f"eigenvalue gap too small for covariance assembly: lam={basis.lam}")
    return PlaneCovariance(sigma=out)


def plane_covariance_direct(points, covs):
    """Brute-force oracle: per-point Jacobian propagation.

    Recomputes the plane fit from the full point list, then sums
    J_i cov_i J_i^T over every point by explicit iteration. O(N) per
    call and deliberately independent of the cumulative assembly path.

    Raises:
        InsufficientPointsError: fewer than 3 points.
        SpectralDegeneracyError: degenerate spectrum.
    """
    points = np.asarray(points, dtype=float)
    covs = np.asarray(covs, dtype=float)
    n_pts = points.shape[0]
    if n_pts < 3:
        raise InsufficientPointsError("direct covariance needs >= 3 points")

    q = points.mean(axis=0)
    A = points.T @ points / n_pts - np.outer(q, q)
    w, V = np.linalg.eigh(A)
    lam = w[::-1]
    U = V[:, ::-1].copy()
    U[:, 2] = canonical_normal_sign(U[:, 2], q)
    n = U[:, 2]

    eps_gap = GAP_RTOL * max(lam[0], 1e-12)
    if lam[0] - lam[2] < eps_gap or lam[1] - lam[2] < eps_gap:
        raise SpectralDegeneracyError(f"degenerate spectrum: lam={lam}")

    F = [None, None, np.zeros((3, 3))]
    for m in range(2):
        F[m] = (np.outer(U[:, m], n) + np.outer(n, U[:, m])) / (n_pts * (lam[2] - lam[m]))

    J = np.zeros((6, 3))
    J[3:, :] = np.eye(3) / n_pts
    sigma = np.zeros((6, 6))
    for i in range(n_pts):
        d = points[i] - q
        G = np.vstack([d @ F[0], d @ F[1], d @ F[2]])
        J[:3, :] = U @ G
        sigma += J @ covs[i] @ J.T
    sigma = 0.5 * (sigma + sigma.T)
    return PlaneCovariance(sigma=sigma)
