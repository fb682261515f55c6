"""Odometry loop orchestration, per-frame stats, and benchmarks.

Each frame runs: predict -> estimate pose -> transform scan to world ->
world covariances -> map insertion -> plane registration and lazy
merging -> stats row. Runs are deterministic for a given config and
seed (Philox-generated scans, sequential frame loop).
"""
import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DegenerateRegistrationError
from .geometry import exp_so3, log_so3
from .kitti import list_kitti_scans, read_kitti_bin
from .lshmerge import LshBuckets, register_and_merge
from .moments import MomentAccumulator, plane_basis
from .registration import Pose, estimate_pose, predict
from .synth import ScanSpec, generate_scene, simulate_scan
from .trajectory import Trajectory, ate  # noqa: F401  (ate re-exported for CLI)
from .uncertainty import UncertaintyStats, plane_covariance, plane_covariance_direct
from .voxelmap import VoxelMap, point_world_covariance_batch

STATS_HEADER = [
    "frame", "timestamp", "est_ms", "map_ms", "n_residuals", "iterations",
    "converged", "planar", "buffering", "subdivided", "merged", "degenerate",
    "bytes_estimate", "merge_buckets", "merge_tested", "merge_commits",
    "merge_rejects",
]


@dataclass
class FrameStats:
    frame: int
    timestamp: float
    est_ms: float
    map_ms: float
    n_residuals: int
    iterations: int
    converged: bool
    planar: int
    buffering: int
    subdivided: int
    merged: int
    degenerate: int
    bytes_estimate: int
    merge_buckets: int
    merge_tested: int
    merge_commits: int
    merge_rejects: int

    def row(self):
        return [getattr(self, name) for name in STATS_HEADER]


def write_stats_csv(stats, path):
    """Append-only CSV with a fixed header, one row per frame."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(STATS_HEADER)
        for s in stats:
            writer.writerow(s.row())


# -- frame sources -------------------------------------------------------

def constant_twist_poses(n_frames, dt=0.1, speed=0.5, yaw_rate_deg=1.8,
                         height=1.5, dwell=5):
    """Circular constant-velocity trajectory (exact for the predictor).

    The first `dwell` frames hold still: the platform boots at rest, so
    the map reaches full-rank plane coverage before motion starts.
    """
    step_R = exp_so3(np.array([0.0, 0.0, math.radians(yaw_rate_deg)]))
    step_t = np.array([speed * dt, 0.0, 0.0])
    poses = [Pose(np.eye(3), np.array([0.0, 0.0, height]), 0.0)]
    for k in range(1, n_frames):
        prev = poses[-1]
        if k < dwell:
            poses.append(Pose(prev.rotation.copy(), prev.translation.copy(), k * dt))
        else:
            poses.append(Pose(prev.rotation @ step_R,
                              prev.translation + prev.rotation @ step_t,
                              k * dt))
    return poses


class SynthSource:
    """Frames simulated from a synthetic scene along a ground-truth path."""

    def __init__(self, config, kind="box-room", dims=(10.0, 8.0, 3.0)):
        self.scene = generate_scene(kind, dims)
        self.gt_poses = constant_twist_poses(config.run.frames)
        self.noise = config.noise
        self.rays = config.scan.rays
        self.fov = math.radians(config.scan.fov_deg)
        self.max_range = config.scan.max_range
        self.seed = config.run.seed

    def __len__(self):
        return len(self.gt_poses)

    def frame(self, k):
        spec = ScanSpec(rays_per_scan=self.rays, fov=self.fov,
                        max_range=self.max_range, noise=self.noise,
                        seed=self.seed * 1_000_003 + k)
        pts, covs = simulate_scan(self.scene, self.gt_poses[k], spec)
        return pts, covs, self.gt_poses[k].timestamp

    def ground_truth(self):
        return Trajectory([p.copy() for p in self.gt_poses])


class KittiSource:
    """Frames read from a KITTI velodyne directory."""

    def __init__(self, config, bin_dir, dt=0.1):
        self.paths = list_kitti_scans(bin_dir)
        if config.run.frames > 0:
            self.paths = self.paths[:config.run.frames]
        self.stride = max(1, config.run.scan_stride)
        self.noise = config.noise
        self.dt = dt

    def __len__(self):
        return len(self.paths)

    def frame(self, k):
        pts = read_kitti_bin(self.paths[k])[::self.stride]
        # drop returns too close to the sensor (ego hits, zero ranges)
        r2 = np.einsum("ni,ni->n", pts, pts)
        pts = pts[r2 > 1.0]
        rr = np.sqrt(r2[r2 > 1.0])
        omega = pts / rr[:, None]
        oo = np.einsum("ni,nj->nij", omega, omega)
        covs = self.noise.sigma_range ** 2 * oo \
            + ((rr * self.noise.sigma_bearing) ** 2)[:, None, None] * (np.eye(3) - oo)
        return pts, covs, k * self.dt

    def ground_truth(self):
        return None


# -- odometry loop -------------------------------------------------------

@dataclass
class OdometryResult:
    trajectory: Trajectory
    stats: list
    vmap: VoxelMap
    buckets: LshBuckets = None


def run_odometry(config, source, velocity_smoothing=0.7):
    """Run the full odometry pipeline over a frame source.

    Prediction uses an exponentially smoothed inter-frame twist: exact
    for constant-velocity motion, but it does not double per-frame
    estimate noise the way raw two-pose extrapolation would, which is
    what keeps the estimate/map feedback loop stable.
    """
    vmap = VoxelMap(config.map)
    buckets = LshBuckets()
    traj = Trajectory()
    stats = []
    poses = []
    beta = velocity_smoothing
    vel_rot = np.zeros(3)
    vel_t = np.zeros(3)

    for k in range(len(source)):
        pts, covs, timestamp = source.frame(k)
        t0 = time.perf_counter()
        n_residuals = 0
        iterations = 0
        converged = True
        if k == 0:
            pose = Pose(np.eye(3), np.zeros(3), timestamp)
        else:
            prev = poses[-1]
            init = Pose(prev.rotation @ exp_so3(vel_rot),
                        prev.translation + prev.rotation @ vel_t, timestamp)
            try:
                pose, report = estimate_pose(vmap, pts, covs, init, config.solver)
                n_residuals = report.n_residuals
                iterations = len(report.iterations)
                converged = report.converged
                rel_R = prev.rotation.T @ pose.rotation
                rel_t = prev.rotation.T @ (pose.translation - prev.translation)
                vel_rot = beta * vel_rot + (1.0 - beta) * log_so3(rel_R)
                vel_t = beta * vel_t + (1.0 - beta) * rel_t
            except DegenerateRegistrationError:
                pose = init  # coast on the smoothed motion
                converged = False
        t1 = time.perf_counter()

        world = pose.transform(pts)
        covs_world = point_world_covariance_batch(pts, pose, config.noise)
        report = vmap.insert_batch(world, covs_world)
        if config.merging:
            merge_totals = register_and_merge(
                buckets, vmap, report.touched_planar, config.merge)
        else:
            merge_totals = None
        t2 = time.perf_counter()

        mem = vmap.memory_stats()
        stats.append(FrameStats(
            frame=k, timestamp=timestamp,
            est_ms=(t1 - t0) * 1e3, map_ms=(t2 - t1) * 1e3,
            n_residuals=n_residuals, iterations=iterations, converged=converged,
            planar=mem.planar, buffering=mem.buffering,
            subdivided=mem.subdivided, merged=mem.merged,
            degenerate=mem.degenerate, bytes_estimate=mem.bytes_estimate,
            merge_buckets=merge_totals.buckets_triggered if merge_totals else 0,
            merge_tested=merge_totals.candidates_tested if merge_totals else 0,
            merge_commits=merge_totals.commits if merge_totals else 0,
            merge_rejects=merge_totals.rejects if merge_totals else 0,
        ))
        poses.append(pose)
        traj.append(pose)
    return OdometryResult(trajectory=traj, stats=stats, vmap=vmap, buckets=buckets)


# -- update-cost benchmark -----------------------------------------------

class RetainedPointsUpdater:
    """Non-cumulative baseline: keeps every point, recomputes per update."""

    def __init__(self):
        self.points = []
        self.covs = []
        self.sigma = None

    def add(self, p, cov):
        self.points.append(np.asarray(p, float))
        self.covs.append(np.asarray(cov, float))
        self.sigma = plane_covariance_direct(
            np.asarray(self.points), np.asarray(self.covs)).sigma


class CumulativeUpdater:
    """Point-free path: constant-size statistics plus a fixed assembly."""

    def __init__(self):
        self.acc = MomentAccumulator()
        self.stats = UncertaintyStats()
        self.sigma = None

    def add_batch(self, pts, covs):
        _kernels.accumulate(self.acc.sum1, self.acc.sum2, self.stats.data, pts, covs)
        self.acc.n_points += len(pts)

    def add(self, p, cov):
        self.add_batch(p.reshape(1, 3), cov.reshape(1, 3, 3))
        self.sigma = plane_covariance(
            self.stats, self.acc, plane_basis(self.acc)).sigma


def _bench_instance(rng, n):
    pts = np.column_stack([
        rng.uniform(-1.4, 1.4, n),
        rng.uniform(-1.4, 1.4, n),
        0.01 * rng.standard_normal(n),
    ])
    S = rng.standard_normal((n, 3, 3)) * 0.01
    covs = S @ S.transpose(0, 2, 1) + 1e-8 * np.eye(3)
    return pts, covs


@dataclass
class BenchRow:
    path: str           # cumulative-<backend> | retained-oracle
    n_accumulated: int
    per_point_us: float


@dataclass
class BenchResult:
    rows: list = field(default_factory=list)
    cumulative_ratio: float = float("nan")   # 1e5 vs 1e2 per-point latency
    oracle_slope: float = float("nan")       # log-log latency growth
    sigma_rel_err: float = float("nan")      # cumulative vs oracle agreement

    def table(self):
        lines = [f"{'path':<22}{'N':>9}{'us/point':>12}"]
        for r in self.rows:
            lines.append(f"{r.path:<22}{r.n_accumulated:>9}{r.per_point_us:>12.2f}")
        lines.append(f"cumulative 1e5/1e2 latency ratio: {self.cumulative_ratio:.3f}")
        lines.append(f"retained-oracle log-log slope:    {self.oracle_slope:.3f}")
        lines.append(f"sigma relative error (paths):     {self.sigma_rel_err:.2e}")
        return "\n".join(lines)


def _time_updates(updater, pts, covs, reps):
    start = time.perf_counter()
    for i in range(reps):
        updater.add(pts[i], covs[i])
    return (time.perf_counter() - start) / reps * 1e6


def bench_update(cumulative_sizes=(100, 100_000), oracle_sizes=(100, 1000, 10_000),
                 seed=0, backends=None):
    """Per-point update latency: cumulative path vs retained-points oracle.

    The cumulative figure includes the plane refresh (basis + covariance
    assembly) after every point, the worst-case cadence.
    """
    rng = np.random.default_rng(seed)
    result = BenchResult()
    backends = backends or _kernels.available_backends()

    warm_pts, warm_covs = _bench_instance(rng, max(cumulative_sizes))
    probe_pts, probe_covs = _bench_instance(rng, 256)

    per_backend = {}
    for name, mod in backends.items():
        latencies = {}
        for n in cumulative_sizes:
            upd = CumulativeUpdater()
            upd.add_batch(warm_pts[:n], warm_covs[:n])
            reps = 200 if n <= 1000 else 100

            # route single-point adds through the chosen backend
            def add(p, cov, upd=upd, mod=mod):
                sink1 = upd.acc.sum1
                mod.accumulate(sink1, upd.acc.sum2, upd.stats.data,
                               p.reshape(1, 3), cov.reshape(1, 3, 3))
                upd.acc.n_points += 1
                basis = plane_basis(upd.acc)
                out = np.empty((6, 6))
                mod.assemble_covariance(
                    upd.stats.data, float(upd.acc.n_points),
                    np.ascontiguousarray(upd.acc.mean()),
                    np.ascontiguousarray(basis.U),
                    np.ascontiguousarray(basis.lam), out)
                upd.sigma = out
            start = time.perf_counter()
            for i in range(reps):
                add(probe_pts[i % 256], probe_covs[i % 256])
            us = (time.perf_counter() - start) / reps * 1e6
            latencies[n] = us
            result.rows.append(BenchRow(f"cumulative-{name}", n, us))
        per_backend[name] = latencies

    fast = per_backend.get("compiled", per_backend["python"])
    result.cumulative_ratio = fast[max(cumulative_sizes)] / fast[min(cumulative_sizes)]

    oracle_lat = {}
    for n in oracle_sizes:
        upd = RetainedPointsUpdater()
        pts, covs = _bench_instance(rng, n + 8)
        upd.points = [p for p in pts[:n]]
        upd.covs = [c for c in covs[:n]]
        reps = 8 if n <= 1000 else 4
        us = _time_updates(upd, pts[n:], covs[n:], reps)
        oracle_lat[n] = us
        result.rows.append(BenchRow("retained-oracle", n, us))
    logs_n = np.log10(np.array(list(oracle_lat.keys()), float))
    logs_t = np.log10(np.array(list(oracle_lat.values()), float))
    result.oracle_slope = float(np.polyfit(logs_n, logs_t, 1)[0])

    # both paths must produce the same covariance
    pts, covs = _bench_instance(rng, 1000)
    cum = CumulativeUpdater()
    cum.add_batch(pts[:-1], covs[:-1])
    cum.add(pts[-1], covs[-1])
    direct = plane_covariance_direct(pts, covs).sigma
    result.sigma_rel_err = float(
        np.linalg.norm(cum.sigma - direct) / np.linalg.norm(direct))
    return result


# -- oracle equivalence sweep ---------------------------------------------

def oracle_check(n_instances=1000, seed=0, n_range=(3, 500), tol=1e-8):
    """Random-instance equivalence of cumulative assembly vs direct sums.

    Returns (max_relative_error, n_checked). Instances with degenerate
    spectra are resampled so both paths stay defined.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    while checked < n_instances:
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        pts = np.column_stack([
            rng.uniform(-2, 2, n),
            rng.uniform(-2, 2, n),
            0.05 * rng.standard_normal(n),
        ])
        R = np.linalg.qr(rng.standard_normal((3, 3)))[0]
        pts = pts @ R.T + rng.uniform(-10, 10, 3)
        S = rng.standard_normal((n, 3, 3)) * rng.uniform(0.001, 0.05)
        covs = S @ S.transpose(0, 2, 1)
        acc = MomentAccumulator()
        stats = UncertaintyStats()
        _kernels.accumulate(acc.sum1, acc.sum2, stats.data, pts, covs)
        acc.n_points = n
        basis = plane_basis(acc)
        lam = basis.lam
        if lam[1] - lam[2] < 1e-6 * max(lam[0], 1e-12):
            continue  # too close to degenerate for a meaningful check
        fast = plane_covariance(stats, acc, basis).sigma
        direct = plane_covariance_direct(pts, covs).sigma
        rel = float(np.linalg.norm(fast - direct) / max(np.linalg.norm(direct), 1e-300))
        worst = max(worst, rel)
        checked += 1
        if rel > tol:
            break
    return worst, checked
