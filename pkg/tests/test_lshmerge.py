"""Plane hashing, bucket bookkeeping, and on-demand merging."""
import math

import numpy as np
import pytest

from voxplane.errors import InvalidPlaneError
from voxplane.lshmerge import (
    LshBuckets,
    MergeConfig,
    plane_lsh_key,
    register_and_merge,
    register_plane,
    try_merge_bucket,
)
from voxplane.moments import MomentAccumulator, accumulate_points, plane_basis
from voxplane.uncertainty import plane_covariance_direct
from voxplane.voxelmap import MERGED, PLANAR, MapConfig, VoxelMap, query_plane

# shared physical plane: z = 3.0 - 0.15 x - 0.1 y, tilted enough that
# every LSH parameter sits inside a bucket (away from quantization
# boundaries) over the cells used below, gently enough that a 2 m patch
# stays inside its 3 m root cell
PLANE_N = np.array([0.15, 0.1, 1.0]) / np.linalg.norm([0.15, 0.1, 1.0])

# root cells whose patch centers keep all five key parameters mid-bucket
CELLS = [(0, 3), (1, 3), (0, 4), (1, 4)]


def plane_z(x, y):
    return 3.0 - 0.15 * x - 0.1 * y


def patch_on_plane(rng, n, cell_xy, extent=1.0, noise=0.002, cov_scale=0.0004):
    """Noisy patch of the shared plane centered in root cell (i, j, 0)."""
    i, j = cell_xy
    cx, cy = 1.5 + 3.0 * i, 1.5 + 3.0 * j
    center = np.array([cx, cy, plane_z(cx, cy)])
    a = np.cross(PLANE_N, [0.0, 0.0, 1.0])
    a /= np.linalg.norm(a)
    b = np.cross(PLANE_N, a)
    uv = rng.uniform(-extent, extent, (n, 2))
    pts = center + uv[:, :1] * a + uv[:, 1:] * b \
        + noise * rng.standard_normal((n, 1)) * PLANE_N
    covs = np.broadcast_to(cov_scale * np.eye(3), (n, 3, 3)).copy()
    return pts, covs


def build_coplanar_map(rng, cells, points_each=40):
    """Map with one planar voxel per requested root cell, all coplanar."""
    vmap = VoxelMap(MapConfig())
    retained = []
    for cell in cells:
        pts, covs = patch_on_plane(rng, points_each, cell)
        vmap.insert_batch(pts, covs)
        retained.append((pts, covs))
    voxels = [v for v in vmap.iter_voxels() if v.state == PLANAR]
    assert len(voxels) == len(cells)
    return vmap, voxels, retained


def merge_cfg(**kw):
    # coarse proximity buckets: the tests care about orientation/distance
    kw.setdefault("delta_u", 50.0)
    kw.setdefault("delta_v", 50.0)
    return MergeConfig(**kw)


class _Plane:
    def __init__(self, normal, center):
        self.normal = np.asarray(normal, float)
        self.center = np.asarray(center, float)
        self.d = -float(self.normal @ self.center)


class TestLshKey:
    def test_distance_component(self):
        plane = _Plane((0.0, 0.0, 1.0), (0.0, 0.0, -2.0))
        assert plane.d == pytest.approx(2.0)
        key = plane_lsh_key(plane, MergeConfig(delta_d=0.15))
        assert key.kd == math.floor(2.0 / 0.15 + 1e-9)

    def test_theta_floor(self):
        cfg = MergeConfig(delta_theta=0.1)
        n = np.array([math.cos(0.30), math.sin(0.30), 0.0])
        key = plane_lsh_key(_Plane(n, -2.0 * n), cfg)
        assert key.kt == 3

    def test_theta_wraps_before_flooring(self):
        cfg = MergeConfig(delta_theta=0.1)
        n = np.array([math.cos(-0.01), math.sin(-0.01), 0.0])
        key = plane_lsh_key(_Plane(n, -2.0 * n), cfg)
        assert key.kt == math.floor((2.0 * math.pi - 0.01) / 0.1 + 1e-9)

    def test_coplanar_offset_voxels_share_key(self):
        cfg = MergeConfig(delta_u=6.0, delta_v=6.0)
        n = np.array([0.0, 0.0, 1.0])
        a = plane_lsh_key(_Plane(n, (0.5, 0.5, -2.0)), cfg)
        b = plane_lsh_key(_Plane(n, (0.5, 1.5, -2.0)), cfg)  # 1 m apart in-plane
        assert a == b

    def test_map_built_coplanar_voxels_share_key(self):
        rng = np.random.default_rng(30)
        _, voxels, _ = build_coplanar_map(rng, CELLS[:3])
        keys = {plane_lsh_key(v.plane, merge_cfg()) for v in voxels}
        assert len(keys) == 1

    def test_zero_normal_rejected(self):
        with pytest.raises(InvalidPlaneError):
            plane_lsh_key(_Plane((0.0, 0.0, 0.0), (1.0, 0.0, 0.0)), MergeConfig())


class TestRegister:
    def test_first_registration_no_trigger(self):
        rng = np.random.default_rng(31)
        _, voxels, _ = build_coplanar_map(rng, CELLS[:1])
        buckets = LshBuckets()
        assert register_plane(buckets, voxels[0], merge_cfg()) is None

    def test_third_coplanar_registration_triggers(self):
        rng = np.random.default_rng(32)
        _, voxels, _ = build_coplanar_map(rng, CELLS[:3])
        buckets = LshBuckets()
        cfg = merge_cfg(trigger_count=3)
        assert register_plane(buckets, voxels[0], cfg) is None
        assert register_plane(buckets, voxels[1], cfg) is None
        assert register_plane(buckets, voxels[2], cfg) is not None

    def test_drift_tombstones_old_entry(self):
        rng = np.random.default_rng(33)
        _, voxels, _ = build_coplanar_map(rng, CELLS[:1])
        voxel = voxels[0]
        buckets = LshBuckets()
        cfg = merge_cfg()
        register_plane(buckets, voxel, cfg)
        old_key = buckets.key_of[voxel.uid]
        # drift the plane a full d-bucket so the key must change
        voxel.plane.center = voxel.plane.center + 0.2 * voxel.plane.normal
        voxel.plane.d = -float(voxel.plane.normal @ voxel.plane.center)
        register_plane(buckets, voxel, cfg)
        new_key = buckets.key_of[voxel.uid]
        assert new_key != old_key
        assert old_key not in buckets.buckets  # emptied bucket dropped
        assert voxel.uid in buckets.buckets[new_key]

    def test_reregistration_is_idempotent(self):
        rng = np.random.default_rng(34)
        _, voxels, _ = build_coplanar_map(rng, CELLS[:1])
        buckets = LshBuckets()
        cfg = merge_cfg(trigger_count=2)
        register_plane(buckets, voxels[0], cfg)
        trigger = register_plane(buckets, voxels[0], cfg)
        assert trigger is None  # one live entry, not two
        assert buckets.live_count(buckets.key_of[voxels[0].uid]) == 1


class TestMergeBucket:
    def merge_three(self, rng, points=(40, 40, 40)):
        vmap = VoxelMap(MapConfig())
        retained = []
        for cell, n in zip(CELLS[:3], points):
            pts, covs = patch_on_plane(rng, n, cell)
            vmap.insert_batch(pts, covs)
            retained.append((pts, covs))
        voxels = [v for v in vmap.iter_voxels() if v.state == PLANAR]
        assert len(voxels) == 3
        buckets = LshBuckets()
        cfg = merge_cfg(trigger_count=3)
        key = None
        for v in voxels:
            key = register_plane(buckets, v, cfg) or key
        assert key is not None
        report = try_merge_bucket(buckets, vmap, key, cfg)
        return vmap, voxels, retained, report

    def test_three_coplanar_voxels_merge(self):
        rng = np.random.default_rng(35)
        vmap, voxels, retained, report = self.merge_three(rng)
        assert report.commits == 2
        states = sorted(v.state for v in voxels)
        assert states == [MERGED, MERGED, PLANAR]
        ref = next(v for v in voxels if v.state == PLANAR)
        assert ref.acc.n_points == sum(len(p) for p, _ in retained)
        for v in voxels:
            if v.state == MERGED:
                assert v.plane is None and v.stats is None  # released

    def test_reference_is_most_populated(self):
        rng = np.random.default_rng(36)
        vmap, voxels, _, report = self.merge_three(rng, points=(30, 70, 40))
        big = max(voxels, key=lambda v: 0 if v.acc is None else v.acc.n_points)
        assert report.reference_uid == big.uid
        assert big.state == PLANAR

    def test_merged_plane_matches_pooled_point_oracle(self):
        rng = np.random.default_rng(37)
        vmap, voxels, retained, report = self.merge_three(rng)
        assert report.commits == 2
        ref = next(v for v in voxels if v.state == PLANAR)
        all_pts = np.vstack([p for p, _ in retained])
        all_covs = np.vstack([c for _, c in retained])
        pooled = accumulate_points(MomentAccumulator(), all_pts)
        basis = plane_basis(pooled)
        np.testing.assert_allclose(ref.plane.center, pooled.mean(), rtol=1e-8)
        cos = abs(float(ref.plane.normal @ basis.normal))
        assert 1.0 - cos < 1e-10
        direct = plane_covariance_direct(all_pts, all_covs).sigma
        rel = np.linalg.norm(ref.plane.covariance.sigma - direct) / np.linalg.norm(direct)
        assert rel < 1e-8

    def test_committed_merge_respects_planarity_bound(self):
        rng = np.random.default_rng(38)
        vmap, voxels, _, report = self.merge_three(rng)
        assert report.commits > 0
        ref = next(v for v in voxels if v.state == PLANAR)
        lam = plane_basis(ref.acc).lam
        eta = MergeConfig().eta
        assert lam[2] / lam[0] < eta and lam[2] / lam[1] < eta

    def test_perpendicular_stowaway_rejected(self):
        rng = np.random.default_rng(39)
        vmap = VoxelMap(MapConfig())
        for cell in CELLS[:2]:
            pts, covs = patch_on_plane(rng, 40, cell)
            vmap.insert_batch(pts, covs)
        # a perpendicular plane patch confined to its own cell
        perp_n = np.cross(PLANE_N, [0.0, 0.0, 1.0])
        perp_n /= np.linalg.norm(perp_n)
        a = np.cross(perp_n, PLANE_N)
        center = np.array([1.5, 19.5, 1.5])
        uv = rng.uniform(-1.0, 1.0, (40, 2))
        perp_pts = center + uv[:, :1] * PLANE_N + uv[:, 1:] * a \
            + 0.002 * rng.standard_normal((40, 1)) * perp_n
        perp_covs = np.broadcast_to(0.0004 * np.eye(3), (40, 3, 3)).copy()
        vmap.insert_batch(perp_pts, perp_covs)
        voxels = [v for v in vmap.iter_voxels() if v.state == PLANAR]
        assert len(voxels) == 3
        # force all three into one bucket (adversarial co-bucketing)
        buckets = LshBuckets()
        cfg = merge_cfg(trigger_count=3)
        key = plane_lsh_key(voxels[0].plane, cfg)
        for v in voxels:
            buckets.key_of[v.uid] = key
            buckets.buckets.setdefault(key, {})[v.uid] = v
        report = try_merge_bucket(buckets, vmap, key, cfg)
        assert report.commits == 1
        assert report.rejects == 1
        survivors = [v for v in voxels if v.state == PLANAR]
        assert len(survivors) == 2
        # the perpendicular voxel is one of them, untouched
        assert any(abs(float(v.plane.normal @ PLANE_N)) < 0.1 for v in survivors)

    def test_query_through_merged_voxel_hits_reference(self):
        rng = np.random.default_rng(40)
        vmap, voxels, _, _ = self.merge_three(rng)
        ref = next(v for v in voxels if v.state == PLANAR)
        merged = next(v for v in voxels if v.state == MERGED)
        probe = merged.center.copy()
        probe[2] = plane_z(probe[0], probe[1])
        plane, voxel = query_plane(vmap, probe)
        assert voxel is ref
        assert plane is ref.plane


def test_register_and_merge_driver():
    rng = np.random.default_rng(41)
    vmap, voxels, _ = build_coplanar_map(rng, CELLS)
    buckets = LshBuckets()
    cfg = merge_cfg(trigger_count=3)
    totals = register_and_merge(buckets, vmap, voxels, cfg)
    assert totals.commits >= 2
    planar = [v for v in voxels if v.state == PLANAR]
    assert len(planar) == len(voxels) - totals.commits
    # lazy economy: merge attempts stay bounded by registrations
    assert totals.candidates_tested <= len(voxels)
