"""Spatially hashed voxel map with a point-free plane lifecycle.

Voxels are created in a buffering state and hold raw points only until
``init_points`` arrive. Finalization then either compacts the voxel into
a point-free planar record (moments + uncertainty statistics + plane
estimate, buffer dropped), subdivides it into octants, or marks it
degenerate. Once planar, a voxel never stores points again: every later
insertion is a constant-size cumulative update.

Concurrency contract: single writer. Insertion, finalization and merging
require exclusive access to the map; plane queries are read-only and may
run concurrently with each other but not with writes.
"""
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import RejectedInputError
from .geometry import canonical_normal_sign, skew
from .moments import MomentAccumulator, plane_basis
from .uncertainty import (
    SpectralDegeneracyError,
    UncertaintyStats,
    plane_covariance,
)

BUFFERING = "buffering"
PLANAR = "planar"
SUBDIVIDED = "subdivided"
MERGED = "merged"
DEGENERATE = "degenerate"

# per-state record-size estimates in bytes (fixed-size payloads only;
# the buffering figure uses the configured buffer bound)
_BASE_BYTES = 88
_MOMENT_BYTES = 10 * 8
_STATS_BYTES = 69 * 8
_PLANE_BYTES = (3 + 3 + 1 + 36 + 1 + 9 + 3) * 8
_POINT_BYTES = (3 + 9) * 8


@dataclass(frozen=True)
class VoxelKey:
    """Root grid index plus the octant path of a sub-voxel."""
    ix: int
    iy: int
    iz: int
    layer: int = 0
    path: tuple = ()


def voxel_key(p, root_size):
    """Root key of the voxel containing p (floor convention, half-open cells)."""
    if root_size <= 0:
        raise RejectedInputError("root voxel size must be positive")
    ix, iy, iz = (int(math.floor(float(c) / root_size)) for c in p)
    return VoxelKey(ix, iy, iz)


def min_voxel_size(root_size, max_layer):
    """Finest cell size reachable by subdivision."""
    return root_size / (2 ** max_layer)


@dataclass
class SensorNoiseModel:
    """Range/bearing noise of the sensor plus optional 6x6 pose covariance."""
    sigma_range: float = 0.02
    sigma_bearing: float = 0.0009
    pose_cov: np.ndarray | None = None

    def __post_init__(self):
        if self.sigma_range <= 0 or self.sigma_bearing <= 0:
            raise RejectedInputError("noise sigmas must be positive")


@dataclass
class MapConfig:
    root_voxel_size: float = 3.0
    max_layer: int = 3
    init_points: int = 10
    eta: float = 0.01
    refresh_every: int = 5
    max_updates: int | None = None


@dataclass
class PlaneEstimate:
    """Plane feature of a compact voxel: geometry plus 6x6 uncertainty."""
    normal: np.ndarray
    center: np.ndarray
    d: float
    covariance: object          # uncertainty.PlaneCovariance
    n_points: int
    basis: object = None        # moments.PlaneBasis, kept for export/merging


def sensor_covariance(p_sensor, model):
    """Range/bearing noise covariance of one sensor-frame point."""
    p = np.asarray(p_sensor, dtype=float)
    r = float(np.linalg.norm(p))
    if r <= 0:
        raise RejectedInputError("zero-range point has no bearing")
    omega = p / r
    oo = np.outer(omega, omega)
    return model.sigma_range ** 2 * oo + (r * model.sigma_bearing) ** 2 * (np.eye(3) - oo)


def point_world_covariance(p_sensor, pose, model):
    """World-frame covariance of one measured point.

    Combines the radial/tangential sensor noise, rotated into the world
    frame, with the propagated pose covariance when the model carries
    one (perturbation order: rotation then translation).
    """
    R = pose.rotation
    cov = R @ sensor_covariance(p_sensor, model) @ R.T
    if model.pose_cov is not None:
        J = np.hstack([-R @ skew(np.asarray(p_sensor, float)), np.eye(3)])
        cov = cov + J @ model.pose_cov @ J.T
    return cov


def point_world_covariance_batch(pts_sensor, pose, model):
    """Vectorized point_world_covariance for an (N, 3) scan."""
    pts = np.asarray(pts_sensor, dtype=float)
    r = np.linalg.norm(pts, axis=1)
    if np.any(r <= 0):
        raise RejectedInputError("zero-range point has no bearing")
    omega = pts / r[:, None]
    oo = np.einsum("ni,nj->nij", omega, omega)
    sig = (model.sigma_range ** 2) * oo \
        + ((r * model.sigma_bearing) ** 2)[:, None, None] * (np.eye(3) - oo)
    R = pose.rotation
    cov = np.einsum("ab,nbc,dc->nad", R, sig, R)
    if model.pose_cov is not None:
        sk = np.zeros((len(pts), 3, 3))
        sk[:, 0, 1] = -pts[:, 2]
        sk[:, 0, 2] = pts[:, 1]
        sk[:, 1, 0] = pts[:, 2]
        sk[:, 1, 2] = -pts[:, 0]
        sk[:, 2, 0] = -pts[:, 1]
        sk[:, 2, 1] = pts[:, 0]
        J = np.concatenate([-np.einsum("ab,nbc->nac", R, sk),
                            np.broadcast_to(np.eye(3), (len(pts), 3, 3))], axis=2)
        cov = cov + np.einsum("nab,bc,ndc->nad", J, model.pose_cov, J)
    return cov


# out-of-plane variance may exceed the sensor-model prediction by this
# factor before the population stops counting as one physical plane
_PLANE_CHI = 9.0


def _is_planar(lam, eta, perp_var=None):
    """Planarity: eigenvalue ratios below eta, and (when the expected
    out-of-plane noise variance is known) an absolute consistency check
    so that near-degenerate mixtures of two faces cannot sneak in as
    overconfident pseudo-planes."""
    if not np.all(np.isfinite(lam)) or lam[0] <= 0.0 or lam[1] <= 0.0:
        return False
    if not ((lam[2] / lam[0] < eta) and (lam[2] / lam[1] < eta)):
        return False
    if perp_var is not None and lam[2] > _PLANE_CHI * perp_var + 1e-12:
        return False
    return True


def _build_plane(acc, stats, basis):
    n = canonical_normal_sign(basis.U[:, 2].copy(), acc.mean())
    basis.U[:, 2] = n
    center = acc.mean()
    return PlaneEstimate(
        normal=n,
        center=center,
        d=-float(n @ center),
        covariance=plane_covariance(stats, acc, basis),
        n_points=acc.n_points,
        basis=basis,
    )


class Voxel:
    """One cell of the map; see module docstring for the lifecycle."""

    __slots__ = ("uid", "layer", "center", "size", "state", "buf_pts", "buf_covs",
                 "acc", "stats", "plane", "children", "redirect", "update_count",
                 "frozen")

    def __init__(self, uid, layer, center, size):
        self.uid = uid
        self.layer = layer
        self.center = center
        self.size = size
        self.state = BUFFERING
        self.buf_pts = []
        self.buf_covs = []
        self.acc = None
        self.stats = None
        self.plane = None
        self.children = None
        self.redirect = None
        self.update_count = 0
        self.frozen = False  # plane uncertainty fixed by the update cap

    def resolve(self):
        """Follow merge redirects to the live voxel, compressing the path."""
        if self.state != MERGED:
            return self
        target = self
        while target.state == MERGED:
            target = target.redirect
        node = self
        while node.state == MERGED:          # path compression
            node.redirect, node = target, node.redirect
        return target

    def octant(self, p):
        # >= keeps cells half-open on the low side, matching the root floor
        return (4 * (p[0] >= self.center[0])
                + 2 * (p[1] >= self.center[1])
                + (p[2] >= self.center[2]))

    def child_center(self, digit):
        off = self.size / 4.0
        return self.center + off * np.array([
            1.0 if digit & 4 else -1.0,
            1.0 if digit & 2 else -1.0,
            1.0 if digit & 1 else -1.0,
        ])


@dataclass
class InsertionReport:
    """Aggregate outcome of one insertion call."""
    n_points: int = 0
    new_voxels: int = 0
    finalized_planar: int = 0
    finalized_subdivided: int = 0
    finalized_degenerate: int = 0
    redirected_points: int = 0
    touched_planar: list = field(default_factory=list)


@dataclass
class MemoryStats:
    """Per-state voxel counts and a fixed-record-size byte estimate."""
    buffering: int = 0
    planar: int = 0
    subdivided: int = 0
    merged: int = 0
    degenerate: int = 0
    redirects: int = 0
    bytes_estimate: int = 0

    @property
    def total_voxels(self):
        return (self.buffering + self.planar + self.subdivided
                + self.merged + self.degenerate)


class VoxelMap:
    """Hash map from root grid cells to voxel octrees."""

    def __init__(self, config=None):
        self.config = config or MapConfig()
        self.roots = {}
        self._next_uid = 0

    def _new_voxel(self, layer, center, size):
        v = Voxel(self._next_uid, layer, center, size)
        self._next_uid += 1
        return v

    # -- insertion ----------------------------------------------------

    def insert_point(self, p_world, cov):
        """Insert a single observation; see insert_batch."""
        return self.insert_batch(
            np.asarray(p_world, float).reshape(1, 3),
            np.asarray(cov, float).reshape(1, 3, 3))

    def insert_batch(self, pts, covs):
        """Route a batch of world points to voxels and update them.

        Points are grouped per root cell so planar voxels receive one
        cumulative kernel call per group instead of per point.
        """
        pts = np.ascontiguousarray(pts, dtype=float)
        covs = np.ascontiguousarray(covs, dtype=float)
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(covs))):
            raise RejectedInputError("insertion requires finite points and covariances")
        report = InsertionReport(n_points=len(pts))
        size = self.config.root_voxel_size
        keys = np.floor(pts / size).astype(np.int64)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        keys = keys[order]
        pts = pts[order]
        covs = covs[order]
        boundaries = np.nonzero(np.any(np.diff(keys, axis=0) != 0, axis=1))[0] + 1
        touched = {}
        for lo, hi in zip(np.r_[0, boundaries], np.r_[boundaries, len(pts)]):
            key = tuple(int(c) for c in keys[lo])
            voxel = self.roots.get(key)
            if voxel is None:
                center = (np.array(key, float) + 0.5) * size
                voxel = self._new_voxel(0, center, size)
                self.roots[key] = voxel
                report.new_voxels += 1
            self._insert_into(voxel, pts[lo:hi], covs[lo:hi], report, touched)
        report.touched_planar = list(touched.values())
        return report

    def _insert_into(self, voxel, pts, covs, report, touched):
        if voxel.state == MERGED:
            target = voxel.resolve()
            report.redirected_points += len(pts)
            self._insert_into(target, pts, covs, report, touched)
        elif voxel.state == BUFFERING:
            voxel.buf_pts.extend(pts)
            voxel.buf_covs.extend(covs)
            if len(voxel.buf_pts) >= self.config.init_points:
                self._finalize(voxel, report, touched)
        elif voxel.state == SUBDIVIDED:
            digits = (4 * (pts[:, 0] >= voxel.center[0])
                      + 2 * (pts[:, 1] >= voxel.center[1])
                      + (pts[:, 2] >= voxel.center[2]))
            for d in np.unique(digits):
                child = voxel.children[d]
                if child is None:
                    child = self._new_voxel(
                        voxel.layer + 1, voxel.child_center(d), voxel.size / 2.0)
                    voxel.children[d] = child
                    report.new_voxels += 1
                sel = digits == d
                self._insert_into(child, pts[sel], covs[sel], report, touched)
        elif voxel.state == DEGENERATE:
            _kernels.accumulate_moments(voxel.acc.sum1, voxel.acc.sum2, pts)
            voxel.acc.n_points += len(pts)
        else:  # PLANAR: the cumulative hot path
            self._update_planar(voxel, pts, covs)
            touched[voxel.uid] = voxel

    def _update_planar(self, voxel, pts, covs):
        cfg = self.config
        n_new = len(pts)
        if cfg.max_updates is not None and not voxel.frozen:
            room = max(0, cfg.max_updates - voxel.update_count)
            if room < n_new:
                voxel.frozen = True
            with_stats = min(room, n_new)
        else:
            with_stats = 0 if voxel.frozen else n_new
        if with_stats:
            _kernels.accumulate(voxel.acc.sum1, voxel.acc.sum2, voxel.stats.data,
                                pts[:with_stats], covs[:with_stats])
            voxel.acc.n_points += with_stats
        if with_stats < n_new:
            # capped: moments keep refreshing, uncertainty stays fixed
            _kernels.accumulate_moments(voxel.acc.sum1, voxel.acc.sum2, pts[with_stats:])
            voxel.acc.n_points += n_new - with_stats
        before = voxel.update_count
        voxel.update_count += n_new
        if (voxel.update_count // cfg.refresh_every) != (before // cfg.refresh_every):
            self._refresh_plane(voxel)

    def _refresh_plane(self, voxel):
        basis = plane_basis(voxel.acc)
        # while statistics track all points, Z/N is the mean point
        # covariance, giving the model-expected out-of-plane variance
        perp_var = None
        if not voxel.frozen and voxel.stats is not None:
            n = basis.U[:, 2]
            perp_var = float(n @ voxel.stats.z() @ n) / voxel.acc.n_points
        if not _is_planar(basis.lam, self.config.eta, perp_var):
            # the accumulated population no longer supports a plane
            # (e.g. a cell straddling two faces that looked planar from
            # its first few points); an overconfident wrong plane would
            # poison registration, so demote instead
            voxel.state = DEGENERATE
            voxel.plane = None
            voxel.stats = None
            voxel.frozen = False
            return
        if voxel.frozen:
            # geometry refreshes from moments; covariance stays as frozen
            n = basis.U[:, 2]
            center = voxel.acc.mean()
            voxel.plane = PlaneEstimate(
                normal=n, center=center, d=-float(n @ center),
                covariance=voxel.plane.covariance,
                n_points=voxel.acc.n_points, basis=basis)
            return
        try:
            voxel.plane = _build_plane(voxel.acc, voxel.stats, basis)
        except SpectralDegeneracyError:
            pass  # keep the previous (stale but valid) estimate

    def _finalize(self, voxel, report, touched):
        """Buffering -> planar | subdivided | degenerate."""
        cfg = self.config
        pts = np.asarray(voxel.buf_pts, dtype=float).reshape(-1, 3)
        covs = np.asarray(voxel.buf_covs, dtype=float).reshape(-1, 3, 3)
        acc = MomentAccumulator()
        _kernels.accumulate_moments(acc.sum1, acc.sum2, pts)
        acc.n_points = len(pts)
        basis = plane_basis(acc)
        n = basis.U[:, 2]
        perp_var = float(np.einsum("i,nij,j->", n, covs, n)) / len(pts)
        if _is_planar(basis.lam, cfg.eta, perp_var):
            stats = UncertaintyStats()
            sink1, sink2 = np.zeros(3), np.zeros((3, 3))
            _kernels.accumulate(sink1, sink2, stats.data, pts, covs)
            try:
                plane = _build_plane(acc, stats, basis)
            except SpectralDegeneracyError:
                voxel.state = DEGENERATE
                voxel.acc = acc
                report.finalized_degenerate += 1
            else:
                voxel.state = PLANAR
                voxel.acc = acc
                voxel.stats = stats
                voxel.plane = plane
                report.finalized_planar += 1
                touched[voxel.uid] = voxel
            voxel.buf_pts = voxel.buf_covs = None
        elif voxel.layer < cfg.max_layer:
            voxel.state = SUBDIVIDED
            voxel.children = [None] * 8
            buf_p, buf_c = pts, covs
            voxel.buf_pts = voxel.buf_covs = None
            report.finalized_subdivided += 1
            self._insert_into(voxel, buf_p, buf_c, report, touched)
        else:
            voxel.state = DEGENERATE
            voxel.acc = acc
            voxel.buf_pts = voxel.buf_covs = None
            report.finalized_degenerate += 1

    # -- queries ------------------------------------------------------

    def query_plane(self, p_world):
        """Planar estimate covering a world point, or None.

        Merge redirects resolve to the reference voxel, so a query in a
        released voxel returns the reference plane.
        """
        p = np.asarray(p_world, dtype=float)
        key = voxel_key(p, self.config.root_voxel_size)
        voxel = self.roots.get((key.ix, key.iy, key.iz))
        while voxel is not None:
            if voxel.state == MERGED:
                voxel = voxel.resolve()
                continue
            if voxel.state == PLANAR:
                return voxel.plane, voxel
            if voxel.state == SUBDIVIDED:
                voxel = voxel.children[voxel.octant(p)]
                continue
            return None
        return None

    def iter_voxels(self):
        """All voxel records, including merged and buffering ones."""
        stack = list(self.roots.values())
        while stack:
            v = stack.pop()
            yield v
            if v.state == SUBDIVIDED:
                stack.extend(c for c in v.children if c is not None)

    def memory_stats(self):
        stats = MemoryStats()
        buffer_bytes = _BASE_BYTES + self.config.init_points * _POINT_BYTES
        for v in self.iter_voxels():
            if v.state == BUFFERING:
                stats.buffering += 1
                stats.bytes_estimate += buffer_bytes
            elif v.state == PLANAR:
                stats.planar += 1
                stats.bytes_estimate += (_BASE_BYTES + _MOMENT_BYTES
                                         + _STATS_BYTES + _PLANE_BYTES)
            elif v.state == SUBDIVIDED:
                stats.subdivided += 1
                stats.bytes_estimate += _BASE_BYTES + 8 * 8
            elif v.state == MERGED:
                stats.merged += 1
                stats.redirects += 1
                stats.bytes_estimate += _BASE_BYTES + 8
            else:
                stats.degenerate += 1
                stats.bytes_estimate += _BASE_BYTES + _MOMENT_BYTES
        return stats


# -- module-level operation aliases ------------------------------------

def insert_point(vmap, p_world, cov):
    return vmap.insert_point(p_world, cov)


def try_finalize(vmap, voxel):
    """Force a finalization attempt on a buffering voxel (test hook)."""
    report = InsertionReport()
    if voxel.state == BUFFERING and len(voxel.buf_pts) >= vmap.config.init_points:
        vmap._finalize(voxel, report, {})
    return report


def query_plane(vmap, p_world):
    return vmap.query_plane(p_world)


def memory_stats(vmap):
    return vmap.memory_stats()


# -- snapshot export ----------------------------------------------------

def _root_color(uid):
    # deterministic, well-spread pseudo-hue per merge root
    h = (uid * 2654435761) & 0xFFFFFFFF
    return (64 + (h & 0x7F), 64 + ((h >> 8) & 0x7F), 64 + ((h >> 16) & 0x7F))


def export_map_ply(vmap, path):
    """Write one colored quad per planar voxel plane (binary PLY).

    Quad extents follow the in-plane eigen spread (2 sigma), so merged
    reference voxels show up as single large patches; colors key on the
    merge-root voxel identity.
    """
    verts = []
    faces = []
    colors = []
    for v in vmap.iter_voxels():
        if v.state != PLANAR or v.plane is None:
            continue
        plane = v.plane
        u1 = plane.basis.U[:, 0]
        u2 = plane.basis.U[:, 1]
        h1 = 2.0 * math.sqrt(max(plane.basis.lam[0], 1e-12))
        h2 = 2.0 * math.sqrt(max(plane.basis.lam[1], 1e-12))
        c = plane.center
        i0 = len(verts)
        verts.extend([c - h1 * u1 - h2 * u2, c + h1 * u1 - h2 * u2,
                      c + h1 * u1 + h2 * u2, c - h1 * u1 + h2 * u2])
        colors.extend([_root_color(v.uid)] * 4)
        faces.append((i0, i0 + 1, i0 + 2, i0 + 3))
    with open(path, "wb") as f:
        f.write(b"ply\nformat binary_little_endian 1.0\n")
        f.write(f"element vertex {len(verts)}\n".encode())
        f.write(b"property float x\nproperty float y\nproperty float z\n")
        f.write(b"property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write(f"element face {len(faces)}\n".encode())
        f.write(b"property list uchar int vertex_indices\nend_header\n")
        for p, rgb in zip(verts, colors):
            f.write(struct.pack("<fffBBB", p[0], p[1], p[2], *rgb))
        for face in faces:
            f.write(struct.pack("<Biiii", 4, *face))
    return len(faces)
