"""Scan-to-map pose estimation.

Constant-motion prediction plus uncertainty-weighted point-to-plane
Gauss-Newton on SE(3). Each residual's variance combines the point's
world-frame noise projected onto the plane normal with the plane's own
parameter uncertainty, so well-observed planes pull harder than fresh
ones. Residuals outside the gate are dropped.

Residual construction is pure per point and could run in parallel over
the scan; the 6x6 solve and the pose update are sequential, and the map
is strictly read-only during estimation.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRegistrationError
from .geometry import exp_so3

_RANK_RTOL = 1e-4


@dataclass
class Pose:
    """Rigid sensor-to-world transform with a timestamp."""
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0

    def transform(self, pts):
        return np.asarray(pts, dtype=float) @ self.rotation.T + self.translation

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def copy(self):
        return Pose(self.rotation.copy(), self.translation.copy(), self.timestamp)


def predict(prev, prev2):
    """Constant-motion extrapolation of the previous relative transform.

    With no second pose (first frames) the prediction is the previous
    pose itself.
    """
    if prev2 is None:
        return prev.copy()
    dt = prev.timestamp - prev2.timestamp
    R_rel = prev2.rotation.T @ prev.rotation
    t_rel = prev2.rotation.T @ (prev.translation - prev2.translation)
    return Pose(
        rotation=prev.rotation @ R_rel,
        translation=prev.translation + prev.rotation @ t_rel,
        timestamp=prev.timestamp + dt,
    )


@dataclass
class Residual:
    """One point-to-plane measurement."""
    r: float
    variance: float
    jacobian: np.ndarray  # (6,) over (rotation, translation) perturbations


def point_residual(plane, p_world, cov_world, p_sensor, rotation):
    """Residual of a single point against a plane estimate.

    The variance term propagates both the point noise (through the
    normal) and the plane-parameter covariance (through the residual's
    plane jacobian [(p - q)^T, -n^T]).
    """
    n = plane.normal
    p_world = np.asarray(p_world, dtype=float)
    r = float(n @ (p_world - plane.center))
    j_plane = np.concatenate([p_world - plane.center, -n])
    variance = float(n @ cov_world @ n + j_plane @ plane.covariance.sigma @ j_plane)
    jac = np.concatenate([np.cross(p_sensor, rotation.T @ n), n])
    return Residual(r=r, variance=variance, jacobian=jac)


@dataclass
class SolverConfig:
    max_iters: int = 10
    tol: float = 1e-6
    gate_sigma: float = 3.0
    min_residuals: int = 10
    max_step_halvings: int = 4
    # gate schedule per association pass: multiplier on the statistical
    # gate plus an absolute floor in meters, wide at first so the cost
    # stays smooth far from the optimum. The last pass has no floor, so
    # the accepted set satisfies the pure gate_sigma criterion; it is
    # then frozen so the solve settles on one well-defined quadratic
    # instead of bouncing between association configurations
    gate_anneal: tuple = (3.0, 1.7, 1.3, 1.1, 1.0)
    gate_floor: tuple = (0.5, 0.15, 0.05, 0.015, 0.0)

    @property
    def reassociate_iters(self):
        return len(self.gate_anneal)


@dataclass
class IterationStats:
    n_residuals: int
    cost_before: float
    cost_after: float
    step_scale: float
    accepted: bool


@dataclass
class RegistrationReport:
    iterations: list = field(default_factory=list)
    converged: bool = False
    n_residuals: int = 0
    singular_values: np.ndarray | None = None
    rank: int = 0

    @property
    def rank_deficient(self):
        return self.rank < 6


def _correspondences(vmap, pts_world):
    """Plane lookup per point; returns indices and stacked plane data."""
    idx = []
    normals = []
    centers = []
    sigmas = []
    query = vmap.query_plane
    for i in range(len(pts_world)):
        hit = query(pts_world[i])
        if hit is None:
            continue
        plane = hit[0]
        idx.append(i)
        normals.append(plane.normal)
        centers.append(plane.center)
        sigmas.append(plane.covariance.sigma)
    if not idx:
        return (np.empty(0, int), np.empty((0, 3)),
                np.empty((0, 3)), np.empty((0, 6, 6)))
    return np.array(idx), np.array(normals), np.array(centers), np.array(sigmas)


def estimate_pose(vmap, pts_sensor, covs_sensor, init, cfg=None):
    """Refine a pose by weighted point-to-plane Gauss-Newton.

    Returns (pose, report). Raises DegenerateRegistrationError when too
    few gated correspondences exist; callers fall back to the motion
    prediction.
    """
    cfg = cfg or SolverConfig()
    pts_sensor = np.asarray(pts_sensor, dtype=float)
    covs_sensor = np.asarray(covs_sensor, dtype=float)
    R = init.rotation.copy()
    t = init.translation.copy()
    report = RegistrationReport()
    gate2 = cfg.gate_sigma ** 2
    H = np.zeros((6, 6))

    frozen = None
    for iteration in range(cfg.max_iters):
        if frozen is None or iteration < cfg.reassociate_iters:
            pts_world = pts_sensor @ R.T + t
            idx, normals, centers, sigmas = _correspondences(vmap, pts_world)
            if len(idx) < cfg.min_residuals:
                raise DegenerateRegistrationError(
                    f"only {len(idx)} plane correspondences (need {cfg.min_residuals})")
            p_s = pts_sensor[idx]
            cov_w = np.einsum("ab,nbc,dc->nad", R, covs_sensor[idx], R)
            diff = pts_world[idx] - centers
            r = np.einsum("ni,ni->n", normals, diff)
            j_plane = np.concatenate([diff, -normals], axis=1)
            variance = np.einsum("ni,nij,nj->n", normals, cov_w, normals) \
                + np.einsum("ni,nij,nj->n", j_plane, sigmas, j_plane)
            variance = np.maximum(variance, 1e-30)
            stage = min(iteration, len(cfg.gate_anneal) - 1)
            anneal = cfg.gate_anneal[stage]
            floor = cfg.gate_floor[stage] if stage < len(cfg.gate_floor) else 0.0
            keep = r * r <= np.maximum(
                (anneal * anneal) * gate2 * variance, floor * floor)
            n_keep = int(keep.sum())
            if n_keep < cfg.min_residuals:
                raise DegenerateRegistrationError(
                    f"only {n_keep} residuals inside the {cfg.gate_sigma}-sigma gate")
            p_s = p_s[keep]
            normals = normals[keep]
            centers = centers[keep]
            r = r[keep]
            # widened passes admit marginal matches whose plain
            # inverse-variance weight would dwarf everything else, so
            # they carry a geometric variance slack matched to the gate
            # floor; the final pass uses the exact 1/variance weights on
            # the strictly gated set
            slack = floor / 3.0
            w = 1.0 / (variance[keep] + slack * slack)
            frozen = (p_s, normals, centers, w)
        else:
            p_s, normals, centers, w = frozen
            n_keep = len(r)
            r = np.einsum("ni,ni->n", normals, p_s @ R.T + t - centers)

        J = np.concatenate([np.cross(p_s, normals @ R), normals], axis=1)
        Jw = J * w[:, None]
        H = J.T @ Jw
        g = Jw.T @ r
        cost_before = float(w @ (r * r))
        # minimum-norm solve: zero the update along unobservable
        # directions instead of sliding down the information null space
        evals, evecs = np.linalg.eigh(H)
        good = evals > evals[-1] * _RANK_RTOL
        delta = -evecs[:, good] @ ((evecs[:, good].T @ g) / evals[good])

        if float(np.linalg.norm(delta)) < cfg.tol:
            report.iterations.append(IterationStats(
                n_keep, cost_before, cost_before, 0.0, True))
            report.converged = True
            report.n_residuals = n_keep
            break

        # step halving on the frozen correspondence/weight set
        scale = 1.0
        accepted = False
        cost_after = cost_before
        for _ in range(cfg.max_step_halvings + 1):
            R_new = R @ exp_so3(scale * delta[:3])
            t_new = t + scale * delta[3:]
            r_new = np.einsum("ni,ni->n", normals, p_s @ R_new.T + t_new - centers)
            cost_after = float(w @ (r_new * r_new))
            if cost_after <= cost_before:
                accepted = True
                break
            scale *= 0.5
        report.iterations.append(IterationStats(
            n_keep, cost_before, cost_after if accepted else cost_before,
            scale if accepted else 0.0, accepted))
        report.n_residuals = n_keep
        if not accepted:
            break
        R, t = R_new, t_new
        if float(np.linalg.norm(scale * delta)) < cfg.tol:
            report.converged = True
            break

    sv = np.linalg.svd(H, compute_uv=False) if H.any() else np.zeros(6)
    report.singular_values = sv
    report.rank = int(np.sum(sv > sv.max() * _RANK_RTOL)) if sv.max() > 0 else 0
    return Pose(R, t, init.timestamp), report
