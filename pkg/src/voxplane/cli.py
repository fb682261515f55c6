"""Command-line surface: run, synth, bench-update, oracle-check, export-map."""
import argparse
import math
import sys

from . import KERNEL_BACKEND
from .config import RunConfig
from .errors import VoxplaneError
from .kitti import read_kitti_poses
from .pipeline import (
    KittiSource,
    SynthSource,
    ate,
    bench_update,
    oracle_check,
    run_odometry,
    write_stats_csv,
)
from .synth import ScanSpec, generate_scene, save_scene, simulate_scan, write_scan_ply
from .trajectory import write_kitti_trajectory, write_tum_trajectory
from .voxelmap import export_map_ply

SYNTH_KINDS = ("box-room", "corridor", "two-planes")
DEFAULT_DIMS = {"box-room": (10.0, 8.0, 3.0), "corridor": (20.0, 4.0, 3.0),
                "two-planes": (8.0, 4.0, 4.0)}


def _load_config(args):
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    if getattr(args, "no_merge", False):
        cfg.merging = False
    if getattr(args, "frames", None):
        cfg.run.frames = args.frames
    return cfg


def _make_source(cfg, args):
    if args.dataset == "kitti":
        if not args.bin_dir:
            raise VoxplaneError("--bin-dir is required for --dataset kitti")
        return KittiSource(cfg, args.bin_dir)
    if args.dataset in SYNTH_KINDS:
        return SynthSource(cfg, kind=args.dataset, dims=DEFAULT_DIMS[args.dataset])
    raise VoxplaneError(
        f"unknown dataset {args.dataset!r} (choose kitti or one of {SYNTH_KINDS})")


def _cmd_run(args):
    cfg = _load_config(args)
    source = _make_source(cfg, args)
    result = run_odometry(cfg, source)
    traj = result.trajectory
    print(f"frames: {len(traj)}  kernel backend: {KERNEL_BACKEND}")
    mem = result.vmap.memory_stats()
    print(f"voxels: planar={mem.planar} merged={mem.merged} "
          f"buffering={mem.buffering} subdivided={mem.subdivided} "
          f"degenerate={mem.degenerate} bytes~{mem.bytes_estimate}")
    if args.out_traj:
        write_kitti_trajectory(traj, args.out_traj + ".kitti.txt")
        write_tum_trajectory(traj, args.out_traj + ".tum.txt")
        print(f"trajectories: {args.out_traj}.kitti.txt, {args.out_traj}.tum.txt")
    if args.stats:
        write_stats_csv(result.stats, args.stats)
        print(f"stats: {args.stats}")
    gt = None
    if args.gt:
        gt = read_kitti_poses(args.gt)
        gt.poses = gt.poses[:len(traj)]
    elif isinstance(source, SynthSource):
        gt = source.ground_truth()
    if gt is not None and len(gt) == len(traj):
        print(f"ATE: {ate(traj, gt):.4f} m")
    if args.export_map:
        n = export_map_ply(result.vmap, args.export_map)
        print(f"map: {args.export_map} ({n} plane quads)")
    return 0


def _cmd_synth(args):
    cfg = _load_config(args)
    kind = args.dataset if args.dataset in SYNTH_KINDS else "box-room"
    scene = generate_scene(kind, DEFAULT_DIMS[kind])
    if args.out_scene:
        save_scene(scene, args.out_scene)
        print(f"scene: {args.out_scene}")
    if args.out_ply:
        from .registration import Pose
        import numpy as np
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1.5]))
        pts, _ = simulate_scan(scene, pose, ScanSpec(
            rays_per_scan=cfg.scan.rays, fov=math.radians(cfg.scan.fov_deg),
            max_range=cfg.scan.max_range, noise=cfg.noise, seed=cfg.run.seed))
        write_scan_ply(pts, args.out_ply)
        print(f"scan: {args.out_ply} ({len(pts)} points)")
    return 0


def _cmd_bench_update(args):
    sizes = tuple(int(s) for s in args.sizes.split(","))
    oracle_sizes = tuple(int(s) for s in args.oracle_sizes.split(","))
    result = bench_update(cumulative_sizes=sizes, oracle_sizes=oracle_sizes,
                          seed=args.seed or 0)
    print(result.table())
    return 0


def _cmd_oracle_check(args):
    worst, checked = oracle_check(n_instances=args.instances, seed=args.seed or 0)
    ok = worst <= 1e-8
    print(f"instances: {checked}  max relative error: {worst:.3e}  "
          f"{'PASS' if ok else 'FAIL'} (tol 1e-8)")
    return 0 if ok else 1


def _cmd_export_map(args):
    cfg = _load_config(args)
    source = _make_source(cfg, args)
    result = run_odometry(cfg, source)
    n = export_map_ply(result.vmap, args.out)
    print(f"map: {args.out} ({n} plane quads)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="voxplane",
        description="Point-free probabilistic voxel-plane odometry")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        p.add_argument("--config", help="plain-text key=value config file")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--frames", type=int, help="override run.frames")
        p.add_argument("--no-merge", action="store_true",
                       help="disable on-demand voxel merging")
        if dataset:
            p.add_argument("--dataset", default="box-room",
                           help="kitti | box-room | corridor | two-planes")
            p.add_argument("--bin-dir", help="KITTI velodyne directory")
            p.add_argument("--gt", help="KITTI ground-truth pose file")

    p = sub.add_parser("run", help="run odometry and report ATE")
    common(p)
    p.add_argument("--out-traj", help="trajectory output prefix (.kitti.txt/.tum.txt)")
    p.add_argument("--stats", help="per-frame stats CSV path")
    p.add_argument("--export-map", help="write the final map as PLY")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("synth", help="generate a scene file and a sample scan")
    common(p)
    p.add_argument("--out-scene", help="scene description output path")
    p.add_argument("--out-ply", help="sample scan PLY output path")
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("bench-update", help="per-point update cost benchmark")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", default="100,100000",
                   help="accumulated sizes for the cumulative path")
    p.add_argument("--oracle-sizes", default="100,1000,10000",
                   help="accumulated sizes for the retained-points oracle")
    p.set_defaults(fn=_cmd_bench_update)

    p = sub.add_parser("oracle-check", help="cumulative vs direct covariance sweep")
    p.add_argument("--instances", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_oracle_check)

    p = sub.add_parser("export-map", help="run odometry, export the map as PLY")
    common(p)
    p.add_argument("--out", required=True, help="output PLY path")
    p.set_defaults(fn=_cmd_export_map)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except VoxplaneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
