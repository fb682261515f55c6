"""Flat storage layout of the cumulative plane-uncertainty statistics.

A voxel's uncertainty state is one contiguous float64 vector of exactly
69 scalars:

  [ 0:36)  six symmetric 3x3 matrices, one per unordered index pair
           (j,k) in X_PAIRS, each packed as its upper triangle (6 scalars)
  [36:63)  three general 3x3 matrices, row-major (9 scalars each)
  [63:69)  one symmetric 3x3 matrix, upper triangle

Both kernel backends and the serialization code depend on this layout;
change it in one place only.
"""
import numpy as np

STATS_SIZE = 69
X_OFFSET = 0
Y_OFFSET = 36
Z_OFFSET = 63

# unordered index pairs (j, k), j <= k, and the upper-triangle entry order
X_PAIRS = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
TRI_ROWS = (0, 0, 0, 1, 1, 2)
TRI_COLS = (0, 1, 2, 1, 2, 2)

# block index of pair (j, k) for arbitrary order
PAIR_BLOCK = {}
for _b, (_j, _k) in enumerate(X_PAIRS):
    PAIR_BLOCK[(_j, _k)] = _b
    PAIR_BLOCK[(_k, _j)] = _b


def pack_symmetric(m):
    """Upper triangle of a symmetric 3x3 matrix as a length-6 vector."""
    m = np.asarray(m)
    return m[list(TRI_ROWS), list(TRI_COLS)].astype(float)


def unpack_symmetric(v):
    """Symmetric 3x3 matrix from its packed upper triangle."""
    m = np.empty((3, 3))
    for idx, (r, c) in enumerate(zip(TRI_ROWS, TRI_COLS)):
        m[r, c] = v[idx]
        m[c, r] = v[idx]
    return m


def unpack_stats(stats):
    """Expand a 69-vector into (X, Y, Z) dense arrays.

    Returns:
        X: (3, 3, 3, 3) with X[j, k] the symmetric matrix of pair (j, k).
        Y: (3, 3, 3) with Y[j] the j-th general matrix.
        Z: (3, 3) symmetric.
    """
    stats = np.asarray(stats, dtype=float)
    X = np.empty((3, 3, 3, 3))
    for b, (j, k) in enumerate(X_PAIRS):
        m = unpack_symmetric(stats[X_OFFSET + 6 * b: X_OFFSET + 6 * b + 6])
        X[j, k] = m
        X[k, j] = m
    Y = stats[Y_OFFSET:Z_OFFSET].reshape(3, 3, 3).copy()
    Z = unpack_symmetric(stats[Z_OFFSET:Z_OFFSET + 6])
    return X, Y, Z
