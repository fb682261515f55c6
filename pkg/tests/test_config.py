"""Config parsing: dotted keys, derived defaults, unknown-key rejection."""
import pytest

from voxplane.config import RunConfig
from voxplane.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg.map.root_voxel_size == 3.0
    assert cfg.map.max_layer == 3
    assert cfg.map.init_points == 10
    assert cfg.map.eta == 0.01
    assert cfg.noise.sigma_range == 0.02
    assert cfg.noise.sigma_bearing == 0.0009
    assert cfg.merge.trigger_count == 3
    assert cfg.merging is True
    assert cfg.map.max_updates is None
    # derived: bucket widths follow the root voxel size, eta is shared
    assert cfg.merge.delta_u == 6.0
    assert cfg.merge.delta_v == 6.0
    assert cfg.merge.eta == cfg.map.eta


def test_file_roundtrip(tmp_path):
    cfg = RunConfig()
    cfg.run.frames = 42
    path = tmp_path / "run.cfg"
    path.write_text(cfg.to_text())
    back = RunConfig.from_file(path)
    assert back.run.frames == 42
    assert back.map.root_voxel_size == cfg.map.root_voxel_size


def test_parse_values_and_comments(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# comment line\n"
        "map.root_voxel_size = 2.0\n"
        "merge.enabled = false   # trailing comment\n"
        "run.frames = 17\n"
        "map.max_updates = 50\n")
    cfg = RunConfig.from_file(path)
    assert cfg.map.root_voxel_size == 2.0
    assert cfg.merging is False
    assert cfg.run.frames == 17
    assert cfg.map.max_updates == 50
    assert cfg.merge.delta_u == 4.0  # derived from the smaller root size


def test_explicit_widths_not_overridden(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("map.root_voxel_size = 2.0\nmerge.delta_u = 9.0\n")
    cfg = RunConfig.from_file(path)
    assert cfg.merge.delta_u == 9.0
    assert cfg.merge.delta_v == 4.0


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("map.voxel_sixe = 3.0\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(path)


def test_bad_value_rejected(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("run.frames = soon\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(path)


def test_missing_equals_rejected(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("map.root_voxel_size 3.0\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(path)


def test_zero_max_updates_means_unlimited(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("map.max_updates = 0\n")
    cfg = RunConfig.from_file(path)
    assert cfg.map.max_updates is None


def test_rng_is_pinned(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("run.rng = mersenne\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(path)
