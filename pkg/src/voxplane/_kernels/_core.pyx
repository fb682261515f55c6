# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implementations of the hot kernels.

Mirrors ``_fallback`` exactly; see ``layout`` for the statistics vector
layout. The per-point loops here are what make dense scan insertion fast.
"""


def accumulate_moments(double[::1] sum1, double[:, ::1] sum2, double[:, ::1] pts):
    cdef Py_ssize_t i, n = pts.shape[0]
    cdef double px, py, pz
    for i in range(n):
        px = pts[i, 0]; py = pts[i, 1]; pz = pts[i, 2]
        sum1[0] += px; sum1[1] += py; sum1[2] += pz
        sum2[0, 0] += px * px; sum2[0, 1] += px * py; sum2[0, 2] += px * pz
        sum2[1, 0] += py * px; sum2[1, 1] += py * py; sum2[1, 2] += py * pz
        sum2[2, 0] += pz * px; sum2[2, 1] += pz * py; sum2[2, 2] += pz * pz


def accumulate(double[::1] sum1, double[:, ::1] sum2, double[::1] stats,
               double[:, ::1] pts, double[:, :, ::1] covs):
    cdef Py_ssize_t i, j, a, b, off, n = pts.shape[0]
    cdef double px, py, pz, w
    cdef double p[3]
    cdef double pp[6]
    cdef double cw[6]
    for i in range(n):
        px = pts[i, 0]; py = pts[i, 1]; pz = pts[i, 2]
        p[0] = px; p[1] = py; p[2] = pz
        sum1[0] += px; sum1[1] += py; sum1[2] += pz
        sum2[0, 0] += px * px; sum2[0, 1] += px * py; sum2[0, 2] += px * pz
        sum2[1, 0] += py * px; sum2[1, 1] += py * py; sum2[1, 2] += py * pz
        sum2[2, 0] += pz * px; sum2[2, 1] += pz * py; sum2[2, 2] += pz * pz
        # packed outer product of the point with itself
        pp[0] = px * px; pp[1] = px * py; pp[2] = px * pz
        pp[3] = py * py; pp[4] = py * pz; pp[5] = pz * pz
        # pair weights = packed upper triangle of the point covariance
        cw[0] = covs[i, 0, 0]; cw[1] = covs[i, 0, 1]; cw[2] = covs[i, 0, 2]
        cw[3] = covs[i, 1, 1]; cw[4] = covs[i, 1, 2]; cw[5] = covs[i, 2, 2]
        # X blocks
        for j in range(6):
            w = cw[j]
            off = 6 * j
            stats[off] += w * pp[0]
            stats[off + 1] += w * pp[1]
            stats[off + 2] += w * pp[2]
            stats[off + 3] += w * pp[3]
            stats[off + 4] += w * pp[4]
            stats[off + 5] += w * pp[5]
        # Y blocks: Y_j[a, b] += cov[a, j] * p[b]
        for j in range(3):
            off = 36 + 9 * j
            for a in range(3):
                w = covs[i, a, j]
                for b in range(3):
                    stats[off + 3 * a + b] += w * p[b]
        # Z
        stats[63] += cw[0]; stats[64] += cw[1]; stats[65] += cw[2]
        stats[66] += cw[3]; stats[67] += cw[4]; stats[68] += cw[5]


cdef inline void _unpack_sym(double[::1] stats, Py_ssize_t off, double[3][3] m) noexcept:
    m[0][0] = stats[off];     m[0][1] = stats[off + 1]; m[0][2] = stats[off + 2]
    m[1][0] = stats[off + 1]; m[1][1] = stats[off + 3]; m[1][2] = stats[off + 4]
    m[2][0] = stats[off + 2]; m[2][1] = stats[off + 4]; m[2][2] = stats[off + 5]


def assemble_covariance(double[::1] stats, double n_points, double[::1] q,
                        double[:, ::1] U, double[::1] lam, double[:, ::1] out):
    """Fill ``out`` (6x6) from the statistics; returns 0, or 1 on a
    degenerate eigenvalue gap."""
    cdef double N = n_points
    cdef double eps_gap = 1e-9 * (lam[0] if lam[0] > 1e-12 else 1e-12)
    if lam[0] - lam[2] < eps_gap or lam[1] - lam[2] < eps_gap:
        return 1

    cdef double X[3][3][3][3]
    cdef double Y[3][3][3]
    cdef double Z[3][3]
    cdef double F[3][3][3]
    cdef double Fq[3][3]
    cdef double B[3][3]
    cdef double M[3][3]
    cdef double tmp[3][3]
    cdef double blk[3][3]
    cdef Py_ssize_t m, n, j, k, a, b
    cdef double c, s, s2, yv

    # expand the packed statistics
    cdef Py_ssize_t pair = 0
    for j in range(3):
        for k in range(j, 3):
            _unpack_sym(stats, 6 * pair, tmp)
            for a in range(3):
                for b in range(3):
                    X[j][k][a][b] = tmp[a][b]
                    X[k][j][a][b] = tmp[a][b]
            pair += 1
    for j in range(3):
        for a in range(3):
            for b in range(3):
                Y[j][a][b] = stats[36 + 9 * j + 3 * a + b]
    _unpack_sym(stats, 63, Z)

    # sensitivity factors F_m = (u_m n^T + n u_m^T) / (N (lam3 - lam_m)), F_3 = 0
    for m in range(3):
        for a in range(3):
            for b in range(3):
                F[m][a][b] = 0.0
    for m in range(2):
        c = 1.0 / (N * (lam[2] - lam[m]))
        for a in range(3):
            for b in range(3):
                F[m][a][b] = c * (U[a, m] * U[b, 2] + U[a, 2] * U[b, m])
    for m in range(3):
        for a in range(3):
            s = 0.0
            for b in range(3):
                s += F[m][a][b] * q[b]
            Fq[m][a] = s

    # B = b_pp - cross - cross^T + b_qq, rows/cols 3 stay zero
    for m in range(3):
        for n in range(3):
            B[m][n] = 0.0
    for m in range(2):
        for n in range(2):
            s = 0.0
            for j in range(3):
                for k in range(3):
                    # (F_n e_k)^T X_{j,k} (F_m e_j)
                    for a in range(3):
                        for b in range(3):
                            s += F[n][a][k] * X[j][k][a][b] * F[m][b][j]
            # cross terms and the qq term
            for j in range(3):
                for a in range(3):
                    for b in range(3):
                        yv = Y[j][a][b]
                        s -= Fq[n][a] * yv * F[m][b][j]
                        s -= Fq[m][a] * yv * F[n][b][j]
            for a in range(3):
                for b in range(3):
                    s += Fq[m][a] * Z[a][b] * Fq[n][b]
            B[m][n] = s

    # M rows: sum_j Y_j (F_m e_j) - Z F_m q
    for m in range(3):
        for a in range(3):
            M[m][a] = 0.0
    for m in range(2):
        for a in range(3):
            s = 0.0
            for j in range(3):
                for b in range(3):
                    s += Y[j][a][b] * F[m][b][j]
            for b in range(3):
                s -= Fq[m][b] * Z[b][a]
            M[m][a] = s

    # sigma_nn = U B U^T
    for a in range(3):
        for b in range(3):
            s = 0.0
            for m in range(3):
                for n in range(3):
                    s += U[a, m] * B[m][n] * U[b, n]
            blk[a][b] = s
    for a in range(3):
        for b in range(3):
            out[a, b] = 0.5 * (blk[a][b] + blk[b][a])

    # sigma_nq = U M / N
    for a in range(3):
        for b in range(3):
            s = 0.0
            for m in range(3):
                s += U[a, m] * M[m][b]
            s /= N
            out[a, 3 + b] = s
            out[3 + b, a] = s

    # sigma_qq = Z / N^2
    s2 = 1.0 / (N * N)
    for a in range(3):
        for b in range(3):
            out[3 + a, 3 + b] = Z[a][b] * s2
    return 0
