"""Quasi-static square peg / square hole contact simulator.

World frame is the hole frame: origin at the centre of the hole mouth, z up,
hole walls at x = +-hole_side/2 and y = +-hole_side/2, hole floor at
z = -hole_depth.  The peg frame origin is the centre of the peg's bottom
face with the peg axis along +z of the peg frame.

Contacts are penalty contacts evaluated at sample points on the peg
(corners plus edge subsamples).  The peg is a velocity-commanded admittance:
each step integrates the commanded twist and then deflects the pose along
the contact wrench through a diagonal admittance, solved implicitly so the
deflection stays stable regardless of how many sample points touch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .se3 import Pose6, Twist6, Wrench6, rpy_to_matrix, wrap_angle


class NonFinite(RuntimeError):
    """Raised when integration produces NaN or Inf."""


@dataclass(frozen=True)
class PegHoleGeometry:
    peg_side: float = 0.020
    peg_length: float = 0.060
    hole_side: float = 0.021
    hole_depth: float = 0.030
    chamfer: float = 0.0

    def __post_init__(self):
        for name in ("peg_side", "peg_length", "hole_side", "hole_depth"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not self.chamfer >= 0:
            raise ValueError("chamfer must be >= 0")
        if not self.hole_side > self.peg_side:
            raise ValueError("hole_side must exceed peg_side (positive clearance)")

    @property
    def clearance(self) -> float:
        return self.hole_side - self.peg_side


@dataclass(frozen=True)
class ContactParams:
    mu: float = 0.2
    k_n: float = 1.0e4
    b_n: float = 50.0
    f_cap: float = 50.0
    # peg admittance: deflection velocity per unit contact force / torque
    admittance_lin: float = 5.0e-4
    admittance_ang: float = 2.5
    edge_samples: int = 3

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")
        if not self.k_n > 0:
            raise ValueError("k_n must be > 0")
        if not self.b_n >= 0:
            raise ValueError("b_n must be >= 0")
        if not self.f_cap > 0:
            raise ValueError("f_cap must be > 0")
        if not (self.admittance_lin > 0 and self.admittance_ang > 0):
            raise ValueError("admittances must be > 0")
        if self.edge_samples < 0:
            raise ValueError("edge_samples must be >= 0")

    @property
    def max_penetration(self) -> float:
        return self.f_cap / self.k_n


@dataclass(frozen=True)
class ContactPoint:
    point: np.ndarray
    normal: np.ndarray
    depth: float


@dataclass(frozen=True)
class SimState:
    peg_pose: Pose6 = field(default_factory=Pose6)
    peg_twist: Twist6 = field(default_factory=Twist6)
    time: float = 0.0
    last_wrench: Wrench6 = field(default_factory=Wrench6)


@dataclass(frozen=True)
class InitRanges:
    lateral_offset: float = 0.002
    axial_height: tuple[float, float] = (0.008, 0.015)
    incline_lo: float = 0.1
    incline_hi: float = 0.15
    yaw: float = 0.02

    def __post_init__(self):
        if self.lateral_offset < 0 or self.yaw < 0:
            raise ValueError("lateral_offset and yaw must be >= 0")
        lo, hi = self.axial_height
        if lo > hi:
            raise ValueError("axial_height must be an ordered (lo, hi) pair")
        if not 0 <= self.incline_lo <= self.incline_hi:
            raise ValueError("need 0 <= incline_lo <= incline_hi")


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def peg_sample_points(geom: PegHoleGeometry, edge_samples: int = 3) -> np.ndarray:
    """Corners plus ``edge_samples`` interior points per edge, peg frame, (N, 3)."""
    h = geom.peg_side / 2.0
    L = geom.peg_length
    corners = np.array(
        [[sx * h, sy * h, sz] for sz in (0.0, L) for sx, sy in ((-1, -1), (1, -1), (1, 1), (-1, 1))]
    )
    if edge_samples == 0:
        return corners
    edges = [(i, (i + 1) % 4) for i in range(4)]
    edges += [(4 + i, 4 + (i + 1) % 4) for i in range(4)]
    edges += [(i, i + 4) for i in range(4)]
    t = np.arange(1, edge_samples + 1) / (edge_samples + 1)
    extra = [corners[i] + t[:, None] * (corners[j] - corners[i]) for i, j in edges]
    return np.vstack([corners, *extra])


def bottom_corners(geom: PegHoleGeometry) -> np.ndarray:
    h = geom.peg_side / 2.0
    return np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])


def to_world(pose_arr: np.ndarray, local: np.ndarray) -> np.ndarray:
    R = rpy_to_matrix(pose_arr[3], pose_arr[4], pose_arr[5])
    return local @ R.T + pose_arr[:3]


def penetration(points: np.ndarray, geom: PegHoleGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Depth (N,) and outward unit normal (N, 3) of world points vs. the hole block.

    Depth is the shorter of the exit through the top plane and the exit into
    the hole cavity; at the lip this picks the smaller-depth contact.
    Non-penetrating points get depth 0.
    """
    a = geom.hole_side / 2.0
    D = geom.hole_depth
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    closest = np.stack([np.minimum(np.maximum(x, -a), a), np.minimum(np.maximum(y, -a), a),
                        np.minimum(np.maximum(z, -D), 0.0)], axis=1)
    diff = closest - points
    d_box = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    d_top = -z
    use_top = d_top <= d_box
    depth = np.where(use_top, d_top, d_box)
    normal = np.zeros_like(points)
    normal[:, 2] = 1.0
    side = ~use_top & (d_box > 0)
    normal[side] = diff[side] / d_box[side, None]

    if geom.chamfer > 0:
        c = geom.chamfer
        r2 = math.sqrt(0.5)
        sx = (np.abs(x) - (a + c + z)) * r2
        sy = (np.abs(y) - (a + c + z)) * r2
        d_ch = np.maximum(np.maximum(sx, sy), np.maximum(-c - z, z))
        d_ch = np.maximum(d_ch, 0.0)
        band = (z > -c) & (z < 0)
        use_ch = band & (d_ch < depth)
        depth = np.where(use_ch, d_ch, depth)
        nx = np.where(sx >= sy, -np.sign(x), 0.0)
        ny = np.where(sx >= sy, 0.0, -np.sign(y))
        n_ch = np.stack([nx, ny, np.ones_like(x)], axis=1) * r2
        normal[use_ch] = n_ch[use_ch]

    inside = (z < 0) & (d_box > 0)
    depth = np.where(inside, depth, 0.0)
    return depth, normal


def _contact_arrays(pose_arr, geom, local):
    pts = to_world(pose_arr, local)
    # only points below the top plane can penetrate; skip the rest
    pts = pts[pts[:, 2] < 0.0]
    if len(pts) == 0:
        return pts, np.zeros((0, 3)), np.zeros(0)
    depth, normal = penetration(pts, geom)
    hit = depth > 0
    return pts[hit], normal[hit], depth[hit]


def contact_query(pose: Pose6, geom: PegHoleGeometry, samples: np.ndarray | None = None,
                  edge_samples: int = 3) -> list[ContactPoint]:
    """One contact per penetrating peg sample point; empty list in free space.

    ``samples`` overrides the default peg-frame sample set.
    """
    local = peg_sample_points(geom, edge_samples) if samples is None else np.asarray(samples, float)
    pts, nrm, dep = _contact_arrays(pose.to_array(), geom, local)
    return [ContactPoint(p, n, float(d)) for p, n, d in zip(pts, nrm, dep)]


def insertion_depth(pose: Pose6, geom: PegHoleGeometry) -> float:
    """Depth of the lowest bottom corner below the mouth, if over the opening.

    Corners pressed into a wall by up to half the clearance still count as
    over the opening.
    """
    pts = to_world(pose.to_array(), bottom_corners(geom))
    a = geom.hole_side / 2.0 + geom.clearance / 2.0
    if np.any(np.abs(pts[:, :2]) > a):
        return 0.0
    return max(0.0, -float(pts[:, 2].min()))


def sample_initial_pose(rng: np.random.Generator, ranges: InitRanges) -> Pose6:
    lat = ranges.lateral_offset
    x, y = rng.uniform(-lat, lat, size=2)
    z = rng.uniform(*ranges.axial_height)
    mags = rng.uniform(ranges.incline_lo, ranges.incline_hi, size=2)
    signs = rng.choice([-1.0, 1.0], size=2)
    gamma = rng.uniform(-ranges.yaw, ranges.yaw)
    return Pose6(x, y, z, mags[0] * signs[0], mags[1] * signs[1], gamma)


# ---------------------------------------------------------------------------
# forces
# ---------------------------------------------------------------------------

def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise a x b for (3,) or (N, 3) operands; np.cross is slow on tiny arrays."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def _point_velocities(twist: np.ndarray, r: np.ndarray) -> np.ndarray:
    # RPY rates treated as world angular velocity (small-angle regime)
    return twist[:3] + _cross(twist[3:], r)


def contact_forces(pts, normals, depths, twist, origin, params: ContactParams):
    """Per-contact normal magnitudes (N,), tangential forces (N, 3) and summed wrench (6,)."""
    if len(depths) == 0:
        return np.zeros(0), np.zeros((0, 3)), np.zeros(6)
    r = pts - origin
    v = _point_velocities(twist, r)
    vn = np.einsum("ij,ij->i", v, normals)
    # damping only resists compression, so a penetrating point always pushes
    rate = np.maximum(-vn, 0.0)
    fn = np.clip(params.k_n * depths + params.b_n * rate, 0.0, params.f_cap)
    vt = v - vn[:, None] * normals
    slip = np.sqrt(np.einsum("ij,ij->i", vt, vt))
    # force that cancels the slip through the admittance within one step, shared by contacts
    viscous = slip / (params.admittance_lin * len(depths))
    ft_mag = np.minimum(params.mu * fn, viscous)
    with np.errstate(invalid="ignore", divide="ignore"):
        ft = np.where(slip[:, None] > 0, -vt * (ft_mag / slip)[:, None], 0.0)
    f = fn[:, None] * normals + ft
    wrench = np.concatenate([f.sum(axis=0), _cross(r, f).sum(axis=0)])
    return fn, ft, wrench


def contact_wrench(contacts: list[ContactPoint], twist: Twist6, params: ContactParams,
                   pose: Pose6) -> Wrench6:
    if not contacts:
        return Wrench6.zero()
    pts = np.array([c.point for c in contacts])
    nrm = np.array([c.normal for c in contacts])
    dep = np.array([c.depth for c in contacts])
    _, _, w = contact_forces(pts, nrm, dep, twist.to_array(), pose.to_array()[:3], params)
    return Wrench6.from_array(w)


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

class ContactSim:
    """Stateless stepping engine bound to one geometry / parameter set."""

    def __init__(self, geom: PegHoleGeometry, params: ContactParams):
        self.geom = geom
        self.params = params
        self.local = peg_sample_points(geom, params.edge_samples)

    def contacts(self, pose_arr):
        return _contact_arrays(pose_arr, self.geom, self.local)

    def _deflect(self, pose_arr, cmd, dt):
        pts, nrm, dep = self.contacts(pose_arr)
        if len(dep) == 0:
            return pose_arr
        p = self.params
        origin = pose_arr[:3]
        _, _, w0 = contact_forces(pts, nrm, dep, cmd, origin, p)
        r = pts - origin
        # normal Jacobian rows: d(depth)/d(pose) = -[n, r x n]
        rows = np.hstack([nrm, _cross(r, nrm)])
        K = p.k_n * rows.T @ rows
        m = dt * np.array([p.admittance_lin] * 3 + [p.admittance_ang] * 3)
        delta = np.linalg.solve(np.eye(6) + m[:, None] * K, m * w0)
        return pose_arr + delta

    def _project(self, pose_arr):
        """Push the deepest point out until the penetration bound holds.

        Returns the pose and its contact arrays so the caller can reuse them.
        """
        bound = self.params.max_penetration
        for _ in range(50):
            hits = self.contacts(pose_arr)
            dep = hits[2]
            if len(dep) == 0 or dep.max() <= bound:
                return pose_arr, hits
            i = int(np.argmax(dep))
            pose_arr = pose_arr.copy()
            pose_arr[:3] += hits[1][i] * (dep[i] - bound + 1e-9)
        return pose_arr, self.contacts(pose_arr)

    def step_array(self, pose_arr: np.ndarray, cmd: np.ndarray, dt: float):
        """Array-level step: returns (new_pose, twist, wrench) as (6,) arrays."""
        pred = pose_arr + cmd * dt
        projected, hits = self._project(self._deflect(pred, cmd, dt))
        new = projected.copy()
        new[3:] = wrap_angle(new[3:])
        delta = new - pose_arr
        delta[3:] = wrap_angle(delta[3:])
        twist = delta / dt
        if not np.array_equal(new, projected):
            hits = self.contacts(new)
        pts, nrm, dep = hits
        _, _, wrench = contact_forces(pts, nrm, dep, twist, new[:3], self.params)
        if not (np.all(np.isfinite(new)) and np.all(np.isfinite(wrench))):
            raise NonFinite("simulator state became non-finite")
        return new, twist, wrench

    def step(self, state: SimState, command: Twist6, dt: float) -> tuple[SimState, Wrench6]:
        if not dt > 0:
            raise ValueError("dt must be > 0")
        cmd = command.to_array() if isinstance(command, Twist6) else np.asarray(command, float)
        if not np.all(np.isfinite(cmd)):
            raise NonFinite("command is not finite")
        new, twist, wrench = self.step_array(state.peg_pose.to_array(), cmd, dt)
        w = Wrench6.from_array(wrench)
        return SimState(Pose6.from_array(new), Twist6.from_array(twist), state.time + dt, w), w


def step(state: SimState, command: Twist6, dt: float, geom: PegHoleGeometry,
         params: ContactParams) -> tuple[SimState, Wrench6]:
    return ContactSim(geom, params).step(state, command, dt)
