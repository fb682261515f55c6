"""Voxel keying, lifecycle transitions, queries, and memory accounting."""
import numpy as np
import pytest

from voxplane.errors import RejectedInputError
from voxplane.voxelmap import (
    BUFFERING,
    DEGENERATE,
    MERGED,
    PLANAR,
    SUBDIVIDED,
    MapConfig,
    SensorNoiseModel,
    VoxelMap,
    export_map_ply,
    memory_stats,
    min_voxel_size,
    point_world_covariance,
    point_world_covariance_batch,
    query_plane,
    sensor_covariance,
    voxel_key,
)


class _Pose:
    def __init__(self, R, t):
        self.rotation = R
        self.translation = t


def planar_batch(rng, n, normal=(0, 0, 1), center=(1.5, 1.5, 1.5), extent=1.2,
                 noise=0.002, cov_scale=0.0004):
    """Points on a plane patch inside one voxel, plus small PSD covariances."""
    normal = np.asarray(normal, float)
    normal = normal / np.linalg.norm(normal)
    a = np.cross(normal, [1.0, 0.0, 0.0])
    if np.linalg.norm(a) < 1e-6:
        a = np.cross(normal, [0.0, 1.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(normal, a)
    uv = rng.uniform(-extent, extent, (n, 2))
    pts = (np.asarray(center, float)
           + uv[:, :1] * a + uv[:, 1:] * b
           + noise * rng.standard_normal((n, 1)) * normal)
    covs = np.broadcast_to(cov_scale * np.eye(3), (n, 3, 3)).copy()
    return pts, covs


class TestVoxelKey:
    def test_floor_arithmetic(self):
        k = voxel_key((3.1, -0.2, 0.0), 3.0)
        assert (k.ix, k.iy, k.iz) == (1, -1, 0)

    def test_origin(self):
        k = voxel_key((0.0, 0.0, 0.0), 3.0)
        assert (k.ix, k.iy, k.iz) == (0, 0, 0)

    def test_round_trip_containment(self):
        rng = np.random.default_rng(5)
        size = 2.7
        pts = rng.uniform(-50, 50, (10_000, 3))
        for p in pts:
            k = voxel_key(p, size)
            lo = np.array([k.ix, k.iy, k.iz]) * size
            assert np.all(p >= lo) and np.all(p < lo + size)

    def test_min_voxel_size(self):
        assert min_voxel_size(3.0, 3) == pytest.approx(0.375)


class TestWorldCovariance:
    def test_axis_aligned_split(self):
        model = SensorNoiseModel(sigma_range=0.02, sigma_bearing=0.0009)
        cov = sensor_covariance((1.0, 0.0, 0.0), model)
        np.testing.assert_allclose(
            cov, np.diag([0.02 ** 2, 0.0009 ** 2, 0.0009 ** 2]), atol=1e-18)

    def test_identity_pose_passthrough(self):
        model = SensorNoiseModel()
        p = (1.0, 2.0, -0.5)
        pose = _Pose(np.eye(3), np.zeros(3))
        np.testing.assert_allclose(
            point_world_covariance(p, pose, model), sensor_covariance(p, model))

    def test_rotation_preserves_spectrum(self):
        rng = np.random.default_rng(7)
        model = SensorNoiseModel()
        R = np.linalg.qr(rng.standard_normal((3, 3)))[0]
        if np.linalg.det(R) < 0:
            R[:, 0] *= -1
        p = rng.uniform(-3, 3, 3)
        w_sensor = np.linalg.eigvalsh(sensor_covariance(p, model))
        w_world = np.linalg.eigvalsh(
            point_world_covariance(p, _Pose(R, np.zeros(3)), model))
        np.testing.assert_allclose(w_world, w_sensor, rtol=1e-10)

    def test_zero_range_rejected(self):
        with pytest.raises(RejectedInputError):
            sensor_covariance((0.0, 0.0, 0.0), SensorNoiseModel())

    def test_batch_matches_single(self):
        rng = np.random.default_rng(8)
        model = SensorNoiseModel(pose_cov=0.001 * np.eye(6))
        R = np.linalg.qr(rng.standard_normal((3, 3)))[0]
        pose = _Pose(R, rng.uniform(-1, 1, 3))
        pts = rng.uniform(0.5, 5, (20, 3))
        batch = point_world_covariance_batch(pts, pose, model)
        for i, p in enumerate(pts):
            np.testing.assert_allclose(
                batch[i], point_world_covariance(p, pose, model), rtol=1e-12)


class TestLifecycle:
    def test_insert_into_empty_map(self):
        vmap = VoxelMap(MapConfig())
        report = vmap.insert_point((1.0, 1.0, 1.0), 1e-4 * np.eye(3))
        assert report.new_voxels == 1
        (voxel,) = vmap.roots.values()
        assert voxel.state == BUFFERING
        assert len(voxel.buf_pts) == 1

    def test_planar_finalization(self):
        rng = np.random.default_rng(9)
        vmap = VoxelMap(MapConfig())
        pts, covs = planar_batch(rng, 20)
        report = vmap.insert_batch(pts, covs)
        assert report.finalized_planar == 1
        (voxel,) = vmap.roots.values()
        assert voxel.state == PLANAR
        assert voxel.buf_pts is None  # point-free after compaction
        np.testing.assert_allclose(np.abs(voxel.plane.normal), [0, 0, 1], atol=0.01)

    def test_uniform_cube_subdivides(self):
        rng = np.random.default_rng(10)
        vmap = VoxelMap(MapConfig())
        pts = rng.uniform(0.0, 3.0, (20, 3))
        covs = np.broadcast_to(1e-4 * np.eye(3), (20, 3, 3)).copy()
        report = vmap.insert_batch(pts, covs)
        (voxel,) = vmap.roots.values()
        assert voxel.state == SUBDIVIDED
        assert report.finalized_subdivided >= 1

    def test_max_layer_degenerates(self):
        rng = np.random.default_rng(11)
        vmap = VoxelMap(MapConfig(max_layer=0))
        pts = rng.uniform(0.0, 3.0, (30, 3))
        covs = np.broadcast_to(1e-4 * np.eye(3), (30, 3, 3)).copy()
        vmap.insert_batch(pts, covs)
        (voxel,) = vmap.roots.values()
        assert voxel.state == DEGENERATE

    def test_planar_update_keeps_d_consistent(self):
        rng = np.random.default_rng(12)
        vmap = VoxelMap(MapConfig(refresh_every=1))
        pts, covs = planar_batch(rng, 15)
        vmap.insert_batch(pts, covs)
        (voxel,) = vmap.roots.values()
        for _ in range(10):
            p, c = planar_batch(rng, 1)
            vmap.insert_batch(p, c)
            plane = voxel.plane
            assert abs(plane.d + plane.normal @ plane.center) <= 1e-12
            assert abs(np.linalg.norm(plane.normal) - 1.0) <= 1e-12

    def test_refresh_cadence(self):
        rng = np.random.default_rng(13)
        vmap = VoxelMap(MapConfig(refresh_every=5))
        pts, covs = planar_batch(rng, 10)
        vmap.insert_batch(pts, covs)
        (voxel,) = vmap.roots.values()
        n0 = voxel.plane.n_points
        p, c = planar_batch(rng, 3)
        vmap.insert_batch(p, c)           # 3 < 5: no refresh yet
        assert voxel.plane.n_points == n0
        p, c = planar_batch(rng, 2)
        vmap.insert_batch(p, c)           # crosses the 5-point boundary
        assert voxel.plane.n_points == n0 + 5

    def test_update_cap_freezes_uncertainty(self):
        rng = np.random.default_rng(14)
        vmap = VoxelMap(MapConfig(refresh_every=1, max_updates=5))
        pts, covs = planar_batch(rng, 12)
        vmap.insert_batch(pts, covs)
        (voxel,) = vmap.roots.values()
        p, c = planar_batch(rng, 5)
        vmap.insert_batch(p, c)
        frozen_sigma = voxel.plane.covariance.sigma.copy()
        frozen_stats = voxel.stats.data.copy()
        n_before = voxel.acc.n_points
        p, c = planar_batch(rng, 7)
        vmap.insert_batch(p, c)
        assert voxel.frozen
        np.testing.assert_array_equal(voxel.plane.covariance.sigma, frozen_sigma)
        np.testing.assert_array_equal(voxel.stats.data, frozen_stats)
        assert voxel.acc.n_points == n_before + 7   # moments keep counting
        assert voxel.plane.n_points == n_before + 7  # geometry keeps refreshing


class TestQuery:
    def test_empty_map(self):
        assert query_plane(VoxelMap(), (0.0, 0.0, 0.0)) is None

    def test_point_in_planar_voxel(self):
        rng = np.random.default_rng(15)
        vmap = VoxelMap()
        pts, covs = planar_batch(rng, 25)
        vmap.insert_batch(pts, covs)
        plane, voxel = query_plane(vmap, (1.5, 1.5, 1.5))
        assert voxel.state == PLANAR
        np.testing.assert_allclose(np.abs(plane.normal), [0, 0, 1], atol=0.01)

    def test_buffering_voxel_returns_none(self):
        vmap = VoxelMap()
        vmap.insert_point((1.0, 1.0, 1.0), 1e-4 * np.eye(3))
        assert query_plane(vmap, (1.0, 1.0, 1.0)) is None

    def test_merged_voxel_returns_reference_plane(self):
        rng = np.random.default_rng(16)
        vmap = VoxelMap()
        pts_a, covs_a = planar_batch(rng, 30, center=(1.5, 1.5, 1.5))
        pts_b, covs_b = planar_batch(rng, 20, center=(4.5, 1.5, 1.5))
        vmap.insert_batch(pts_a, covs_a)
        vmap.insert_batch(pts_b, covs_b)
        va = vmap.roots[(0, 0, 0)]
        vb = vmap.roots[(1, 0, 0)]
        # wire a redirect manually; the merge module owns the real procedure
        vb.state = MERGED
        vb.redirect = va
        vb.plane = vb.stats = vb.acc = None
        plane, voxel = query_plane(vmap, (4.5, 1.5, 1.5))
        assert voxel is va
        assert plane is va.plane

    def test_insert_into_merged_updates_reference(self):
        rng = np.random.default_rng(17)
        vmap = VoxelMap(MapConfig(refresh_every=1))
        pts_a, covs_a = planar_batch(rng, 30, center=(1.5, 1.5, 1.5))
        vmap.insert_batch(pts_a, covs_a)
        va = vmap.roots[(0, 0, 0)]
        vb = vmap._new_voxel(0, np.array([4.5, 1.5, 1.5]), 3.0)
        vb.state = MERGED
        vb.redirect = va
        vmap.roots[(1, 0, 0)] = vb
        n_before = va.acc.n_points
        p, c = planar_batch(rng, 4, center=(4.5, 1.5, 1.5))
        report = vmap.insert_batch(p, c)
        assert report.redirected_points == 4
        assert va.acc.n_points == n_before + 4
        assert vb.state == MERGED and vb.plane is None  # record untouched


class TestMemoryStats:
    def test_empty_map_zeroes(self):
        stats = memory_stats(VoxelMap())
        assert stats.total_voxels == 0
        assert stats.bytes_estimate == 0
        assert stats.redirects == 0

    def test_point_free_size_constant(self):
        rng = np.random.default_rng(18)
        sizes = {}
        for n_extra in (100, 100_000):
            vmap = VoxelMap(MapConfig(refresh_every=10 ** 9))
            pts, covs = planar_batch(rng, 20)
            vmap.insert_batch(pts, covs)
            extra, extra_covs = planar_batch(rng, n_extra)
            vmap.insert_batch(extra, extra_covs)
            sizes[n_extra] = memory_stats(vmap).bytes_estimate
        assert sizes[100] == sizes[100_000]

    def test_merged_bucket_bookkeeping(self):
        rng = np.random.default_rng(19)
        vmap = VoxelMap()
        for i in range(5):
            pts, covs = planar_batch(rng, 25, center=(1.5 + 3 * i, 1.5, 1.5))
            vmap.insert_batch(pts, covs)
        voxels = [vmap.roots[(i, 0, 0)] for i in range(5)]
        for v in voxels[1:]:
            v.state = MERGED
            v.redirect = voxels[0]
            v.plane = v.stats = v.acc = None
        stats = memory_stats(vmap)
        assert stats.merged == 4
        assert stats.redirects == 4
        assert stats.planar == 1


def test_redirect_chains_resolve_and_compress():
    rng = np.random.default_rng(20)
    vmap = VoxelMap()
    pts, covs = planar_batch(rng, 25)
    vmap.insert_batch(pts, covs)
    live = vmap.roots[(0, 0, 0)]
    chain = [live]
    for i in range(30):
        v = vmap._new_voxel(0, np.array([1.5 + 3 * (i + 1), 1.5, 1.5]), 3.0)
        v.state = MERGED
        v.redirect = chain[-1]
        chain.append(v)
    assert chain[-1].resolve() is live
    # compression: every chain node now points straight at the live voxel
    assert all(v.redirect is live for v in chain[1:])


def test_random_merge_sequences_never_cycle():
    # merging only redirects a live voxel onto another live voxel, so any
    # sequence of such operations keeps resolve() terminating
    rng = np.random.default_rng(21)
    vmap = VoxelMap()
    voxels = []
    for i in range(40):
        pts, _ = planar_batch(rng, 1, center=(1.5 + 3 * i, 1.5, 1.5))
        v = vmap._new_voxel(0, pts[0], 3.0)
        v.state = PLANAR
        voxels.append(v)
    live = set(range(40))
    for _ in range(39):
        a, b = rng.choice(sorted(live), 2, replace=False)
        voxels[a].state = MERGED
        voxels[a].redirect = voxels[b]
        live.discard(a)
    for v in voxels:
        assert v.resolve().state == PLANAR


def test_streamed_synthetic_scan_recovers_normal():
    # scan a single floor patch and stream it into the map point by point
    from voxplane.registration import Pose
    from voxplane.synth import Rectangle, ScanSpec, Scene, simulate_scan
    floor = Scene(planes=[Rectangle(
        center=np.array([1.5, 1.5, 0.5]), normal=np.array([0.0, 0.0, 1.0]),
        axis1=np.array([1.0, 0.0, 0.0]), extent1=2.0, extent2=2.0)])
    pose = Pose(np.eye(3), np.array([1.5, 1.5, 2.5]))
    pts, covs = simulate_scan(floor, pose, ScanSpec(
        rays_per_scan=2000, fov=np.radians(120.0), seed=23))
    assert len(pts) > 200
    world = pose.transform(pts)
    covs_w = covs  # identity rotation
    vmap = VoxelMap(MapConfig())
    for p, c in zip(world, covs_w):
        vmap.insert_point(p, c)
    plane, _ = query_plane(vmap, (1.5, 1.5, 0.5))
    angle = np.arccos(min(1.0, abs(float(plane.normal @ np.array([0, 0, 1.0])))))
    assert np.degrees(angle) < 0.5


def test_export_ply(tmp_path):
    rng = np.random.default_rng(22)
    vmap = VoxelMap()
    for i in range(3):
        pts, covs = planar_batch(rng, 25, center=(1.5 + 3 * i, 1.5, 1.5))
        vmap.insert_batch(pts, covs)
    out = tmp_path / "map.ply"
    n_quads = export_map_ply(vmap, out)
    assert n_quads == 3
    head = out.read_bytes()[:200]
    assert head.startswith(b"ply\n")
    assert b"element vertex 12" in head
    assert b"element face 3" in head
