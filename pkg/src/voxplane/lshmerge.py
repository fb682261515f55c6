"""Locality-sensitive hashing of voxel planes and lazy on-demand merging.

Planes are bucketed by five quantized parameters: the normal's spherical
angles (theta, phi), the origin distance d, and two projection
coordinates (u, v) that separate coplanar but distant patches. Voxels
whose planes land in the same bucket are *candidates* for lying on one
physical plane; nothing is merged until a bucket accumulates
``trigger_count`` live voxels, and no global search over the map ever
happens (explicitly no union-find pass).

A committed merge releases the candidate's plane record and leaves a
redirect to the reference voxel; the pooled statistics rebuild the
reference plane so its covariance reflects every point of both voxels.

Runs only inside the exclusive map-update phase.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels.layout import unpack_symmetric
from .errors import InvalidPlaneError
from .moments import merge_moments, plane_basis
from .uncertainty import SpectralDegeneracyError, UncertaintyStats
from .voxelmap import MERGED, PLANAR, _build_plane, _is_planar

# stabilizes decimal bucket boundaries (e.g. 0.30/0.1) against float
# rounding; harmless because bucket edges are arbitrary for an LSH
_QUANT_EPS = 1e-9


@dataclass(frozen=True)
class LshKey:
    kt: int
    kp: int
    kd: int
    ku: int
    kv: int


@dataclass
class MergeConfig:
    trigger_count: int = 3
    eta: float = 0.01
    delta_theta: float = 0.087   # ~5 degrees
    delta_phi: float = 0.087
    delta_d: float = 0.15
    delta_u: float = 6.0         # 2x root voxel size by default
    delta_v: float = 6.0


def _quant(x, width):
    return int(math.floor(x / width + _QUANT_EPS))


def plane_rotation(theta, phi):
    """Two-factor rotation built from the normal's spherical angles."""
    ct, st = math.cos(theta), math.sin(theta)
    cp, sp = math.cos(phi), math.sin(phi)
    rz = np.array([[ct, -st, 0.0], [st, ct, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    return rz @ ry


def plane_lsh_key(plane, cfg):
    """Bucket key of a plane estimate.

    Requires the canonical normal orientation (d = -n.q >= 0), which
    every PlaneEstimate built by the map already satisfies.

    Raises:
        InvalidPlaneError: zero or non-finite normal.
    """
    n = np.asarray(plane.normal, dtype=float)
    if not np.all(np.isfinite(n)) or np.linalg.norm(n) < 1e-12:
        raise InvalidPlaneError("plane normal must be a finite unit vector")
    theta = math.atan2(n[1], n[0])
    if theta < 0.0:
        theta += 2.0 * math.pi
    phi = math.acos(max(-1.0, min(1.0, float(n[2]))))
    if min(phi, math.pi - phi) < cfg.delta_phi:
        # the azimuth chart degenerates at the poles; pin it so that
        # near-horizontal planes hash consistently
        theta = 0.0
    d = -float(n @ plane.center)
    R = plane_rotation(theta, phi)
    rq = R @ plane.center
    return LshKey(
        _quant(theta, cfg.delta_theta),
        _quant(phi, cfg.delta_phi),
        _quant(d, cfg.delta_d),
        _quant(rq[1], cfg.delta_u),
        _quant(rq[2], cfg.delta_v),
    )


class LshBuckets:
    """Bucket table plus a reverse index keeping one live key per voxel."""

    def __init__(self):
        self.buckets = {}      # LshKey -> {uid: voxel}
        self.key_of = {}       # uid -> LshKey

    def live_count(self, key):
        return len(self.buckets.get(key, ()))

    def entries(self, key):
        return list(self.buckets.get(key, {}).values())

    def deregister(self, voxel):
        old = self.key_of.pop(voxel.uid, None)
        if old is not None:
            bucket = self.buckets.get(old)
            if bucket is not None:
                bucket.pop(voxel.uid, None)
                if not bucket:
                    del self.buckets[old]

    def register(self, voxel, cfg):
        """(Re-)register a planar voxel under its current key.

        A previous entry under a different key is tombstoned first.
        Returns the key when its bucket reached the merge trigger,
        otherwise None.
        """
        key = plane_lsh_key(voxel.plane, cfg)
        old = self.key_of.get(voxel.uid)
        if old is not None and old != key:
            self.deregister(voxel)
        self.key_of[voxel.uid] = key
        self.buckets.setdefault(key, {})[voxel.uid] = voxel
        if len(self.buckets[key]) >= cfg.trigger_count:
            return key
        return None


def register_plane(buckets, voxel, cfg):
    return buckets.register(voxel, cfg)


@dataclass
class MergeReport:
    """Outcome of one bucket-merge attempt (or a per-frame aggregate)."""
    key: object = None
    buckets_triggered: int = 0
    candidates_tested: int = 0
    commits: int = 0
    rejects: int = 0
    aborted: bool = False
    reference_uid: int | None = None
    retrigger: object = None

    def __iadd__(self, other):
        self.buckets_triggered += 1
        self.candidates_tested += other.candidates_tested
        self.commits += other.commits
        self.rejects += other.rejects
        self.aborted = self.aborted or other.aborted
        return self


def try_merge_bucket(buckets, vmap, key, cfg):
    """Merge the voxels of one triggered bucket into its reference voxel.

    The reference is the live voxel with the most points. Every other
    candidate is tested on the *pooled* scatter: the merge commits only
    if the pooled eigenvalues still satisfy the planarity criterion, so
    accidentally co-bucketed voxels from different physical planes are
    rejected. All pooling happens on a scratch copy first; if the final
    plane rebuild degenerates the whole bucket is aborted with no state
    change.
    """
    report = MergeReport(key=key)
    live = []
    for voxel in buckets.entries(key):
        if voxel.state == PLANAR:
            live.append(voxel)
        else:
            buckets.deregister(voxel)   # stale entry
    if len(live) < cfg.trigger_count:
        return report
    live.sort(key=lambda v: (-v.acc.n_points, v.uid))
    ref = live[0]
    report.reference_uid = ref.uid

    pooled_acc = ref.acc.copy()
    pooled_stats = ref.stats.data.copy()
    commits = []
    for cand in live[1:]:
        report.candidates_tested += 1
        tentative = merge_moments(pooled_acc, cand.acc)
        tentative_stats = pooled_stats + cand.stats.data
        basis = plane_basis(tentative)
        n = basis.U[:, 2]
        perp_var = float(n @ unpack_symmetric(tentative_stats[63:69]) @ n) \
            / tentative.n_points
        if _is_planar(basis.lam, cfg.eta, perp_var):
            pooled_acc = tentative
            pooled_stats = tentative_stats
            commits.append(cand)
        else:
            report.rejects += 1
    if not commits:
        return report

    stats = UncertaintyStats(pooled_stats)
    try:
        plane = _build_plane(pooled_acc, stats, plane_basis(pooled_acc))
    except SpectralDegeneracyError:
        report.aborted = True
        report.rejects += len(commits)
        report.candidates_tested = len(live) - 1
        return report

    for cand in commits:
        cand.state = MERGED
        cand.redirect = ref
        cand.plane = None           # parameters released
        cand.stats = None
        cand.acc = None
        cand.buf_pts = cand.buf_covs = None
        buckets.deregister(cand)
    ref.acc = pooled_acc
    ref.stats = stats
    ref.plane = plane
    report.commits = len(commits)
    report.retrigger = buckets.register(ref, cfg)
    return report


def register_and_merge(buckets, vmap, voxels, cfg, max_rounds=4):
    """Frame-level driver: register refreshed planes, run triggered merges.

    Work stays proportional to the number of registrations; re-triggers
    caused by a reference's re-registration are followed for a bounded
    number of rounds.
    """
    totals = MergeReport()
    triggered = []
    seen = set()
    for voxel in voxels:
        if voxel.state != PLANAR:
            continue
        key = buckets.register(voxel, cfg)
        if key is not None and key not in seen:
            triggered.append(key)
            seen.add(key)
    rounds = 0
    while triggered and rounds < max_rounds:
        rounds += 1
        retriggers = []
        for key in triggered:
            rep = try_merge_bucket(buckets, vmap, key, cfg)
            totals += rep
            if rep.retrigger is not None and rep.retrigger not in seen:
                retriggers.append(rep.retrigger)
                seen.add(rep.retrigger)
        triggered = retriggers
    return totals
