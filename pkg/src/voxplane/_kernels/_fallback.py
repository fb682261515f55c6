"""Pure-numpy implementations of the hot kernels.

Selected automatically when the compiled extension is unavailable.
Semantics are identical to ``_core``; the update functions mutate their
array arguments in place and assume validated float64 inputs (the public
wrappers in ``moments``/``uncertainty`` do the checking).
"""
import numpy as np

from .layout import TRI_COLS, TRI_ROWS, X_OFFSET, Y_OFFSET, Z_OFFSET, unpack_stats

_ROWS = list(TRI_ROWS)
_COLS = list(TRI_COLS)


def accumulate_moments(sum1, sum2, pts):
    """Add a batch of points to the raw first/second moment sums."""
    sum1 += pts.sum(axis=0)
    sum2 += pts.T @ pts


def accumulate(sum1, sum2, stats, pts, covs):
    """Add a batch of (point, covariance) pairs to moments and statistics."""
    accumulate_moments(sum1, sum2, pts)
    # X blocks: per pair (j,k), sum of cov[j,k] * (p p^T), upper triangle
    w = covs[:, _ROWS, _COLS]                    # (N, 6) pair weights
    pp = pts[:, _ROWS] * pts[:, _COLS]           # (N, 6) packed outer products
    stats[X_OFFSET:X_OFFSET + 36] += (w.T @ pp).ravel()
    # Y blocks: sum of cov[:, j] outer p
    stats[Y_OFFSET:Z_OFFSET] += np.einsum("iaj,ib->jab", covs, pts).ravel()
    # Z: plain covariance sum
    stats[Z_OFFSET:Z_OFFSET + 6] += w.sum(axis=0)


def assemble_covariance(stats, n_points, q, U, lam, out):
    """Assemble the 6x6 plane covariance from fixed-size statistics.

    Returns 0 on success, 1 when the eigenvalue gap to the smallest
    eigenvalue is too small for the sensitivity factors to exist.
    """
    N = float(n_points)
    eps_gap = 1e-9 * max(lam[0], 1e-12)
    if lam[0] - lam[2] < eps_gap or lam[1] - lam[2] < eps_gap:
        return 1
    X, Y, Z = unpack_stats(stats)
    n = U[:, 2]
    F = np.zeros((3, 3, 3))
    for m in range(2):
        c = 1.0 / (N * (lam[2] - lam[m]))
        F[m] = c * (np.outer(U[:, m], n) + np.outer(n, U[:, m]))
    Fq = F @ q                                   # (3, 3), row m = F_m q

    b_pp = np.einsum("nak,jkab,mbj->mn", F, X, F)
    cross = np.einsum("na,jab,mbj->mn", Fq, Y, F)
    b_qq = Fq @ Z @ Fq.T
    B = b_pp - cross - cross.T + b_qq

    sig_nn = U @ B @ U.T
    M = np.einsum("jab,mbj->ma", Y, F) - Fq @ Z
    sig_nq = (U @ M) / N
    sig_qq = Z / (N * N)

    out[:3, :3] = sig_nn
    out[:3, 3:] = sig_nq
    out[3:, :3] = sig_nq.T
    out[3:, 3:] = sig_qq
    out += out.T.copy()
    out *= 0.5
    return 0
