"""Hybrid force-motion control law with residual composition.

    u_nom = (I - S) (Kp_x * Xe + Kd_x * Xdot) + S (Kp_f * Fe + Ki_f * int(Fe))
    u     = sat(u_nom + u_rl)

All gain matrices and S are diagonal and handled as 6-vectors.  ``Xdot`` is
the velocity error (goal velocity zero, so the caller passes minus the
measured twist), which makes the derivative term damp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NegativeGain(ValueError):
    pass


def _vec6(v, name: str) -> np.ndarray:
    if isinstance(v, np.ndarray) and v.shape == (6,) and v.dtype == np.float64:
        a = v.copy()  # fast path for the per-tick calls
    else:
        a = np.broadcast_to(np.asarray(v, dtype=np.float64), (6,)).copy()
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    return a


@dataclass(frozen=True)
class SelectionMatrix:
    sigma: np.ndarray

    def __post_init__(self):
        s = _vec6(self.sigma, "sigma")
        if np.any(s < 0) or np.any(s > 1):
            raise ValueError("selection entries must lie in [0, 1]")
        object.__setattr__(self, "sigma", s)


@dataclass(frozen=True)
class GainSet:
    kp_x: np.ndarray
    kd_x: np.ndarray
    kp_f: np.ndarray
    ki_f: np.ndarray

    def __post_init__(self):
        for name in ("kp_x", "kd_x", "kp_f", "ki_f"):
            v = _vec6(getattr(self, name), name)
            if np.any(v < 0):
                raise NegativeGain(f"{name} has negative entries")
            object.__setattr__(self, name, v)


def derive_gains(kp_x, kp_f) -> GainSet:
    """Critically damped motion gains and 1 % integral force gains."""
    kp_x = _vec6(kp_x, "kp_x")
    kp_f = _vec6(kp_f, "kp_f")
    if np.any(kp_x < 0) or np.any(kp_f < 0):
        raise NegativeGain("proportional gains must be >= 0")
    return GainSet(kp_x, 2.0 * np.sqrt(kp_x), kp_f, 0.01 * kp_f)


DEFAULT_INTEGRAL_CLAMP = np.array([10.0, 10.0, 10.0, 2.0, 2.0, 2.0])
DEFAULT_COMMAND_BOUNDS = np.array([0.05, 0.05, 0.05, 0.5, 0.5, 0.5])


@dataclass(frozen=True)
class ForceIntegral:
    accum: np.ndarray = field(default_factory=lambda: np.zeros(6))
    clamp: np.ndarray = field(default_factory=lambda: DEFAULT_INTEGRAL_CLAMP.copy())

    def __post_init__(self):
        clamp = _vec6(self.clamp, "clamp")
        if np.any(clamp < 0):
            raise ValueError("integral clamp must be >= 0")
        object.__setattr__(self, "clamp", clamp)
        object.__setattr__(self, "accum", np.clip(_vec6(self.accum, "accum"), -clamp, clamp))


def nominal_command(xe, xdot, fe, integ: ForceIntegral, sigma: SelectionMatrix,
                    g: GainSet) -> np.ndarray:
    s = sigma.sigma
    motion = g.kp_x * np.asarray(xe, float) + g.kd_x * np.asarray(xdot, float)
    force = g.kp_f * np.asarray(fe, float) + g.ki_f * integ.accum
    return (1.0 - s) * motion + s * force


def update_integral(integ: ForceIntegral, fe, dt: float) -> ForceIntegral:
    if not dt > 0:
        raise ValueError("dt must be > 0")
    accum = np.clip(integ.accum + np.asarray(fe, float) * dt, -integ.clamp, integ.clamp)
    return ForceIntegral(accum, integ.clamp)


def compose(u_nom, u_rl, bounds=DEFAULT_COMMAND_BOUNDS) -> np.ndarray:
    """Residual composition u_nom + u_rl, saturated to +-bounds per axis."""
    b = _vec6(bounds, "bounds")
    return np.clip(np.asarray(u_nom, float) + np.asarray(u_rl, float), -b, b)


def saturate(u, bounds=DEFAULT_COMMAND_BOUNDS) -> np.ndarray:
    b = _vec6(bounds, "bounds")
    return np.clip(np.asarray(u, float), -b, b)
