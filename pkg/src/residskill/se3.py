"""6-DoF pose, twist and wrench values.

Orientation is a fixed-axis roll-pitch-yaw triple (rotations about world X,
then Y, then Z).  Angles are stored wrapped to (-pi, pi].
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, fields

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    return a - TWO_PI * np.ceil((a - math.pi) / TWO_PI)


@functools.cache
def _names(cls) -> tuple[str, ...]:
    return tuple(f.name for f in fields(cls))


def _check_finite(obj) -> None:
    for name in _names(type(obj)):
        if not math.isfinite(getattr(obj, name)):
            raise ValueError(f"{type(obj).__name__}.{name} is not finite")


class _Vec6:
    """Shared array conversion for the three 6-vector types."""

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in _names(type(self))], dtype=np.float64)

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (6,):
            raise ValueError(f"expected 6 components, got shape {a.shape}")
        return cls(*(float(v) for v in a))

    @classmethod
    def zero(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def __iter__(self):
        return iter(self.to_array())


@dataclass(frozen=True)
class Pose6(_Vec6):
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        _check_finite(self)
        for name in ("alpha", "beta", "gamma"):
            object.__setattr__(self, name, float(wrap_angle(getattr(self, name))))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def rotation(self) -> np.ndarray:
        return rpy_to_matrix(self.alpha, self.beta, self.gamma)


@dataclass(frozen=True)
class Twist6(_Vec6):
    vx: float = 0.0
    vy: float = 0.0
    vz: float = 0.0
    walpha: float = 0.0
    wbeta: float = 0.0
    wgamma: float = 0.0

    def __post_init__(self):
        _check_finite(self)


@dataclass(frozen=True)
class Wrench6(_Vec6):
    fx: float = 0.0
    fy: float = 0.0
    fz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    def __post_init__(self):
        _check_finite(self)

    @property
    def force(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.fz])


def rpy_to_matrix(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """R = Rz(gamma) @ Ry(beta) @ Rx(alpha)."""
    ca, sa = math.cos(alpha), math.sin(alpha)
    cb, sb = math.cos(beta), math.sin(beta)
    cg, sg = math.cos(gamma), math.sin(gamma)
    return np.array(
        [
            [cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa],
            [sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa],
            [-sb, cb * sa, cb * ca],
        ]
    )


def pose_error_array(goal: np.ndarray, current: np.ndarray) -> np.ndarray:
    e = goal - current
    e[3:] = wrap_angle(e[3:])
    return e


def pose_error(goal: Pose6, current: Pose6) -> Pose6:
    """Componentwise goal - current, angular part re-wrapped."""
    return Pose6.from_array(pose_error_array(goal.to_array(), current.to_array()))


def norm_blocks(xe, xd, fe) -> np.ndarray:
    """Euclidean norms of the pose-error, twist and wrench 6-vectors."""
    return np.array(
        [
            np.linalg.norm(np.asarray(xe, dtype=np.float64)),
            np.linalg.norm(np.asarray(xd, dtype=np.float64)),
            np.linalg.norm(np.asarray(fe, dtype=np.float64)),
        ]
    )


def tilt_angle(alpha: float, beta: float) -> float:
    """Angle between the peg axis and world z for a roll/pitch pair."""
    # z-axis of R is (cg sb ca + sg sa, sg sb ca - cg sa, cb ca); its z part is independent of gamma
    c = math.cos(alpha) * math.cos(beta)
    return math.acos(max(-1.0, min(1.0, c)))
