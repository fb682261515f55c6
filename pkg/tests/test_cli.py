"""CLI verbs exercised end to end through main()."""
import numpy as np

from voxplane.cli import main
from voxplane.kitti import read_kitti_poses


def test_run_synth_writes_outputs(tmp_path, capsys):
    out = tmp_path / "traj"
    stats = tmp_path / "stats.csv"
    ply = tmp_path / "map.ply"
    code = main(["run", "--dataset", "box-room", "--frames", "15", "--seed", "3",
                 "--out-traj", str(out), "--stats", str(stats),
                 "--export-map", str(ply)])
    assert code == 0
    text = capsys.readouterr().out
    assert "ATE:" in text
    kitti = read_kitti_poses(str(out) + ".kitti.txt")
    assert len(kitti) == 15
    assert (tmp_path / "traj.tum.txt").read_text().count("\n") == 15
    assert stats.read_text().startswith("frame,")
    assert ply.read_bytes().startswith(b"ply\n")


def test_run_no_merge_flag(tmp_path, capsys):
    code = main(["run", "--dataset", "box-room", "--frames", "12", "--no-merge"])
    assert code == 0
    assert "merged=0" in capsys.readouterr().out


def test_synth_verb(tmp_path):
    scene = tmp_path / "scene.txt"
    ply = tmp_path / "scan.ply"
    code = main(["synth", "--dataset", "corridor",
                 "--out-scene", str(scene), "--out-ply", str(ply)])
    assert code == 0
    assert "plane " in scene.read_text()
    assert ply.read_bytes().startswith(b"ply\n")


def test_bench_update_verb(capsys):
    code = main(["bench-update", "--sizes", "50,500", "--oracle-sizes", "50,150"])
    assert code == 0
    out = capsys.readouterr().out
    assert "us/point" in out
    assert "slope" in out


def test_oracle_check_verb(capsys):
    code = main(["oracle-check", "--instances", "25"])
    assert code == 0
    assert "PASS" in capsys.readouterr().out


def test_export_map_verb(tmp_path):
    out = tmp_path / "map.ply"
    code = main(["export-map", "--dataset", "box-room", "--frames", "12",
                 "--out", str(out)])
    assert code == 0
    assert out.exists()


def test_config_file_respected(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("run.frames = 8\nscan.rays = 300\n")
    code = main(["run", "--dataset", "box-room", "--config", str(cfg)])
    assert code == 0
    assert "frames: 8" in capsys.readouterr().out


def test_unknown_dataset_fails(capsys):
    code = main(["run", "--dataset", "moon-base", "--frames", "5"])
    assert code == 2
    assert "error:" in capsys.readouterr().err
