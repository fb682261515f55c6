"""Synthetic planar scenes and a deterministic LiDAR scan simulator.

Scenes are collections of bounded rectangles; scans are ray casts from a
sensor pose with range/bearing Gaussian noise injected exactly per the
declared sensor noise model. All randomness comes from numpy's Philox
generator (counter-based, portable), so a given seed reproduces scans
byte for byte across runs and platforms.
"""
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MalformedFileError
from .voxelmap import SensorNoiseModel

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass
class Rectangle:
    """Bounded plane patch: center, unit normal, two in-plane half-extents."""
    center: np.ndarray
    normal: np.ndarray
    axis1: np.ndarray
    extent1: float
    extent2: float

    @property
    def axis2(self):
        return np.cross(self.normal, self.axis1)


@dataclass
class Scene:
    planes: list
    name: str = "scene"


@dataclass
class ScanSpec:
    """Deterministic scan recipe; `noise=None` casts exact rays."""
    rays_per_scan: int = 800
    fov: float = math.radians(70.0)
    max_range: float = 60.0
    noise: SensorNoiseModel | None = field(default_factory=SensorNoiseModel)
    seed: int = 0


def _rect(center, normal, axis1, e1, e2):
    center = np.asarray(center, dtype=float)
    normal = np.asarray(normal, dtype=float)
    normal = normal / np.linalg.norm(normal)
    axis1 = np.asarray(axis1, dtype=float)
    axis1 = axis1 / np.linalg.norm(axis1)
    return Rectangle(center, normal, axis1, float(e1), float(e2))


def generate_scene(kind, dims):
    """Deterministic scene of one of the built-in kinds.

    box-room: closed box spanning [-L/2, L/2] x [-W/2, W/2] x [0, H],
    normals inward. corridor: two walls plus floor and ceiling, open
    ends. two-planes: floor patch and a perpendicular wall.
    """
    dims = tuple(float(d) for d in dims)
    if any(d <= 0 for d in dims):
        raise ConfigError("scene dimensions must be positive")
    if kind == "box-room":
        L, W, H = dims
        return Scene(name=f"box-room-{L:g}x{W:g}x{H:g}", planes=[
            _rect((0, 0, 0), (0, 0, 1), (1, 0, 0), L / 2, W / 2),        # floor
            _rect((0, 0, H), (0, 0, -1), (1, 0, 0), L / 2, W / 2),       # ceiling
            _rect((-L / 2, 0, H / 2), (1, 0, 0), (0, 1, 0), W / 2, H / 2),
            _rect((L / 2, 0, H / 2), (-1, 0, 0), (0, 1, 0), W / 2, H / 2),
            _rect((0, -W / 2, H / 2), (0, 1, 0), (1, 0, 0), L / 2, H / 2),
            _rect((0, W / 2, H / 2), (0, -1, 0), (1, 0, 0), L / 2, H / 2),
        ])
    if kind == "corridor":
        L, W, H = dims
        return Scene(name=f"corridor-{L:g}x{W:g}x{H:g}", planes=[
            _rect((0, 0, 0), (0, 0, 1), (1, 0, 0), L / 2, W / 2),
            _rect((0, 0, H), (0, 0, -1), (1, 0, 0), L / 2, W / 2),
            _rect((0, -W / 2, H / 2), (0, 1, 0), (1, 0, 0), L / 2, H / 2),
            _rect((0, W / 2, H / 2), (0, -1, 0), (1, 0, 0), L / 2, H / 2),
        ])
    if kind == "two-planes":
        L, W, _ = dims if len(dims) == 3 else (*dims, dims[-1])
        return Scene(name=f"two-planes-{L:g}x{W:g}", planes=[
            _rect((0, 0, 0), (0, 0, 1), (1, 0, 0), L / 2, W / 2),
            _rect((L / 2, 0, W / 2), (-1, 0, 0), (0, 1, 0), W / 2, W / 2),
        ])
    raise ConfigError(f"unknown scene kind: {kind!r}")


def ray_directions(spec):
    """Unit ray directions in the sensor frame (spiral over the fov band)."""
    i = np.arange(spec.rays_per_scan, dtype=float)
    el = -spec.fov / 2.0 + spec.fov * (i + 0.5) / spec.rays_per_scan
    az = np.mod(i * _GOLDEN_ANGLE, 2.0 * math.pi)
    ce = np.cos(el)
    return np.column_stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)])


def _cast(scene, origin, dirs_world, max_range):
    """Nearest rectangle hit per ray; returns hit mask and ranges."""
    n_rays = len(dirs_world)
    best_t = np.full(n_rays, np.inf)
    for rect in scene.planes:
        denom = dirs_world @ rect.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((rect.center - origin) @ rect.normal) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        hit = np.isfinite(t) & (t > 1e-9) & (t <= max_range)
        if not np.any(hit):
            continue
        x = origin + np.where(hit, t, 0.0)[:, None] * dirs_world
        rel = x - rect.center
        hit &= np.abs(rel @ rect.axis1) <= rect.extent1
        hit &= np.abs(rel @ rect.axis2) <= rect.extent2
        better = hit & (t < best_t)
        best_t[better] = t[better]
    mask = np.isfinite(best_t)
    return mask, best_t


def simulate_scan(scene, pose, spec):
    """Ray-cast one scan; returns (points, covariances) in the sensor frame.

    Noise is injected along the exact radial/tangential decomposition the
    noise model declares, and each point's returned covariance is that
    model evaluated at the measured return. Empty scans (no hits) are
    valid and return (0, 3)/(0, 3, 3) arrays.
    """
    dirs = ray_directions(spec)
    dirs_world = dirs @ pose.rotation.T
    mask, t = _cast(scene, pose.translation, dirs_world, spec.max_range)
    dirs = dirs[mask]
    r = t[mask]
    n_hits = len(r)
    if n_hits == 0:
        return np.zeros((0, 3)), np.zeros((0, 3, 3))

    if spec.noise is not None:
        rng = np.random.Generator(np.random.Philox(spec.seed))
        # tangent frame per ray: t1 horizontal-ish, t2 completes it
        helper = np.where(np.abs(dirs[:, 2:3]) < 0.9,
                          np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
        t1 = np.cross(dirs, helper)
        t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
        t2 = np.cross(dirs, t1)
        dr = rng.normal(0.0, spec.noise.sigma_range, n_hits)
        db = rng.normal(0.0, spec.noise.sigma_bearing, (n_hits, 2))
        pts = (r + dr)[:, None] * dirs + (r * db[:, 0])[:, None] * t1 \
            + (r * db[:, 1])[:, None] * t2
        rr = np.linalg.norm(pts, axis=1)
        omega = pts / rr[:, None]
        oo = np.einsum("ni,nj->nij", omega, omega)
        covs = spec.noise.sigma_range ** 2 * oo \
            + ((rr * spec.noise.sigma_bearing) ** 2)[:, None, None] * (np.eye(3) - oo)
    else:
        pts = r[:, None] * dirs
        covs = np.zeros((n_hits, 3, 3))
    return pts, covs


# -- scene files and scan export -----------------------------------------

def save_scene(scene, path):
    """Plain-text declarative scene description."""
    with open(path, "w") as f:
        f.write(f"name {scene.name}\n")
        for r in scene.planes:
            vals = (*r.center, *r.normal, *r.axis1, r.extent1, r.extent2)
            f.write("plane " + " ".join(f"{v:.17g}" for v in vals) + "\n")


def load_scene(path):
    planes = []
    name = "scene"
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tag, rest = line.split(None, 1)
            if tag == "name":
                name = rest.strip()
            elif tag == "plane":
                vals = [float(v) for v in rest.split()]
                if len(vals) != 11:
                    raise MalformedFileError(
                        f"{path}:{lineno}: plane line needs 11 numbers, got {len(vals)}")
                planes.append(_rect(vals[0:3], vals[3:6], vals[6:9], vals[9], vals[10]))
            else:
                raise MalformedFileError(f"{path}:{lineno}: unknown record {tag!r}")
    return Scene(planes=planes, name=name)


def write_scan_ply(points, path):
    """Binary PLY point export for scan inspection."""
    points = np.asarray(points, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(b"ply\nformat binary_little_endian 1.0\n")
        f.write(f"element vertex {len(points)}\n".encode())
        f.write(b"property float x\nproperty float y\nproperty float z\nend_header\n")
        for p in points:
            f.write(struct.pack("<fff", p[0], p[1], p[2]))
