"""Run configuration: plain-text key-value files with dotted sections.

Unknown keys are hard errors so that typos cannot silently fall back to
defaults. The random generator is pinned by name (philox, counter-based)
so seeded runs reproduce byte for byte.
"""
from dataclasses import dataclass, field

from .errors import ConfigError
from .lshmerge import MergeConfig
from .registration import SolverConfig
from .voxelmap import MapConfig, SensorNoiseModel


@dataclass
class ScanConfig:
    rays: int = 800
    fov_deg: float = 70.0
    max_range: float = 60.0


@dataclass
class RunParams:
    frames: int = 200
    seed: int = 0
    scan_stride: int = 1
    rng: str = "philox"


def _parse_bool(raw):
    if raw.lower() in ("true", "on", "yes", "1"):
        return True
    if raw.lower() in ("false", "off", "no", "0"):
        return False
    raise ValueError(raw)


# key -> (section attr or None for top level, field, parser)
_SCHEMA = {
    "map.root_voxel_size": ("map", "root_voxel_size", float),
    "map.max_layer": ("map", "max_layer", int),
    "map.init_points": ("map", "init_points", int),
    "map.eta": ("map", "eta", float),
    "map.refresh_every": ("map", "refresh_every", int),
    "map.max_updates": ("map", "max_updates", int),      # 0 means unlimited
    "noise.sigma_range": ("noise", "sigma_range", float),
    "noise.sigma_bearing": ("noise", "sigma_bearing", float),
    "merge.enabled": (None, "merging", _parse_bool),
    "merge.trigger_count": ("merge", "trigger_count", int),
    "merge.eta": ("merge", "eta", float),
    "merge.delta_theta": ("merge", "delta_theta", float),
    "merge.delta_phi": ("merge", "delta_phi", float),
    "merge.delta_d": ("merge", "delta_d", float),
    "merge.delta_u": ("merge", "delta_u", float),
    "merge.delta_v": ("merge", "delta_v", float),
    "solver.max_iters": ("solver", "max_iters", int),
    "solver.tol": ("solver", "tol", float),
    "solver.gate_sigma": ("solver", "gate_sigma", float),
    "solver.min_residuals": ("solver", "min_residuals", int),
    "scan.rays": ("scan", "rays", int),
    "scan.fov_deg": ("scan", "fov_deg", float),
    "scan.max_range": ("scan", "max_range", float),
    "run.frames": ("run", "frames", int),
    "run.seed": ("run", "seed", int),
    "run.scan_stride": ("run", "scan_stride", int),
    "run.rng": ("run", "rng", str),
}


@dataclass
class RunConfig:
    map: MapConfig = field(default_factory=MapConfig)
    noise: SensorNoiseModel = field(default_factory=SensorNoiseModel)
    merge: MergeConfig = field(default_factory=MergeConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    run: RunParams = field(default_factory=RunParams)
    merging: bool = True

    def __post_init__(self):
        self._finish(set())

    def _finish(self, explicit):
        # derived defaults: planarity threshold shared with the map,
        # proximity bucket widths twice the root voxel size
        if "merge.eta" not in explicit:
            self.merge.eta = self.map.eta
        if "merge.delta_u" not in explicit:
            self.merge.delta_u = 2.0 * self.map.root_voxel_size
        if "merge.delta_v" not in explicit:
            self.merge.delta_v = 2.0 * self.map.root_voxel_size
        if self.map.max_updates is not None and self.map.max_updates <= 0:
            self.map.max_updates = None
        if self.noise.sigma_range <= 0 or self.noise.sigma_bearing <= 0:
            raise ConfigError("noise sigmas must be positive")
        if any(w <= 0 for w in (self.merge.delta_theta, self.merge.delta_phi,
                                self.merge.delta_d, self.merge.delta_u,
                                self.merge.delta_v)):
            raise ConfigError("merge bucket widths must be positive")
        if self.merge.trigger_count < 2:
            raise ConfigError("merge.trigger_count must be at least 2")
        if self.run.rng != "philox":
            raise ConfigError(
                f"run.rng must be 'philox' (the pinned portable generator), "
                f"got {self.run.rng!r}")

    @classmethod
    def from_file(cls, path):
        cfg = cls()
        explicit = set()
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, _, raw = line.partition("=")
                key = key.strip()
                raw = raw.strip()
                if key not in _SCHEMA:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                section, attr, parse = _SCHEMA[key]
                try:
                    value = parse(raw)
                except ValueError:
                    raise ConfigError(
                        f"{path}:{lineno}: bad value {raw!r} for {key}") from None
                target = cfg if section is None else getattr(cfg, section)
                setattr(target, attr, value)
                explicit.add(key)
        cfg._finish(explicit)
        return cfg

    def to_text(self):
        lines = []
        for key, (section, attr, _) in _SCHEMA.items():
            target = self if section is None else getattr(self, section)
            value = getattr(target, attr)
            if key == "map.max_updates" and value is None:
                value = 0
            if key == "merge.enabled":
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"
