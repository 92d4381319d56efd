"""Skills with pre-, invariant and post-conditions, composed into chains.

A skill is the tuple (pre, inv, post, behaviour).  ``tick`` advances a
skill's execution status against the current world; ``run_composite`` drives
an ordered chain of skills, delegating the actual motion to a caller-supplied
``execute`` function that resolves each skill's behaviour reference.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .contact import PegHoleGeometry, SimState, insertion_depth
from .se3 import Pose6, tilt_angle, wrap_angle

INF = math.inf


@dataclass(frozen=True)
class World:
    state: SimState
    geom: PegHoleGeometry


# ---------------------------------------------------------------------------
# conditions
# ---------------------------------------------------------------------------
# Each condition also describes the box it accepts in the feature space
# (peg x, peg y, tilt, height, insertion depth, force magnitude); the boxes
# are what composite construction uses to reject disjoint chains.  The boxes
# are outer bounds, so overlap is necessary but not sufficient for chaining.

_FEATURES = ("x", "y", "tilt", "height", "depth", "force")


def _box(**bounds) -> dict[str, tuple[float, float]]:
    box = {k: (-INF, INF) for k in _FEATURES}
    box.update(bounds)
    return box


@dataclass(frozen=True)
class PoseWithin:
    """Peg within lateral / tilt tolerance of ``target`` and tip at most
    ``height`` above the target plane."""

    target: Pose6
    lateral: float
    tilt: float
    height: float

    def __post_init__(self):
        if not (self.lateral > 0 and self.tilt > 0 and self.height > -INF):
            raise ValueError("PoseWithin tolerances must be > 0")

    def holds(self, world: World) -> bool:
        p = world.state.peg_pose
        lat = max(abs(p.x - self.target.x), abs(p.y - self.target.y))
        rel_a = float(wrap_angle(p.alpha - self.target.alpha))
        rel_b = float(wrap_angle(p.beta - self.target.beta))
        return (lat <= self.lateral and tilt_angle(rel_a, rel_b) <= self.tilt
                and p.z - self.target.z <= self.height)

    def region(self):
        t = self.target
        return _box(x=(t.x - self.lateral, t.x + self.lateral), y=(t.y - self.lateral, t.y + self.lateral),
                    tilt=(0.0, self.tilt), height=(-INF, t.z + self.height))


@dataclass(frozen=True)
class ForceBelow:
    limit: float

    def __post_init__(self):
        if not self.limit > 0:
            raise ValueError("ForceBelow limit must be > 0")

    def holds(self, world: World) -> bool:
        return float(np.linalg.norm(world.state.last_wrench.force)) < self.limit

    def region(self):
        return _box(force=(0.0, self.limit))


@dataclass(frozen=True)
class DepthAtLeast:
    depth: float

    def __post_init__(self):
        if not self.depth > 0:
            raise ValueError("DepthAtLeast depth must be > 0")

    def holds(self, world: World) -> bool:
        return insertion_depth(world.state.peg_pose, world.geom) >= self.depth

    def region(self):
        return _box(depth=(self.depth, INF), height=(-INF, -self.depth))


@dataclass(frozen=True)
class Conjunction:
    parts: tuple

    def __post_init__(self):
        if not self.parts:
            raise ValueError("Conjunction needs at least one part")
        object.__setattr__(self, "parts", tuple(self.parts))

    def holds(self, world: World) -> bool:
        return all(c.holds(world) for c in self.parts)

    def region(self):
        box = _box()
        for c in self.parts:
            for k, (lo, hi) in c.region().items():
                blo, bhi = box[k]
                box[k] = (max(lo, blo), min(hi, bhi))
        return box


def regions_overlap(a, b) -> bool:
    ra, rb = a.region(), b.region()
    for k in _FEATURES:
        lo = max(ra[k][0], rb[k][0])
        hi = min(ra[k][1], rb[k][1])
        if lo > hi:
            return False
    return True


# ---------------------------------------------------------------------------
# execution status
# ---------------------------------------------------------------------------

class StatusKind(enum.Enum):
    INACTIVE = "inactive"
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"


class FailReason(enum.Enum):
    PRE_UNSATISFIED = "pre_unsatisfied"
    INVARIANT_VIOLATED = "invariant_violated"
    TIMEOUT = "timeout"
    NON_FINITE = "non_finite"


@dataclass(frozen=True)
class ExecutionStatus:
    kind: StatusKind
    child: int | None = None
    reason: FailReason | None = None

    @property
    def terminal(self) -> bool:
        return self.kind in (StatusKind.SUCCEEDED, StatusKind.FAILED)

    def __repr__(self):
        if self.kind is StatusKind.RUNNING:
            return f"Running({self.child})"
        if self.kind is StatusKind.FAILED:
            return f"Failed({self.reason.value})"
        return self.kind.value.capitalize()


INACTIVE = ExecutionStatus(StatusKind.INACTIVE)
SUCCEEDED = ExecutionStatus(StatusKind.SUCCEEDED)


def running(child: int | None = None) -> ExecutionStatus:
    return ExecutionStatus(StatusKind.RUNNING, child=child)


def failed(reason: FailReason) -> ExecutionStatus:
    return ExecutionStatus(StatusKind.FAILED, reason=reason)


# ---------------------------------------------------------------------------
# skills
# ---------------------------------------------------------------------------

@dataclass
class Skill:
    name: str
    pre: object
    inv: object
    post: object
    behavior: str = "nominal"
    timeout: float = 15.0
    status: ExecutionStatus = field(default=INACTIVE)
    elapsed: float = 0.0

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError("timeout must be > 0")
        if not (self.behavior == "nominal" or self.behavior.startswith("residual")):
            raise ValueError(f"unresolvable behaviour reference {self.behavior!r}")

    def reset(self) -> None:
        self.status = INACTIVE
        self.elapsed = 0.0


def _world_finite(world: World) -> bool:
    s = world.state
    return bool(np.all(np.isfinite(s.peg_pose.to_array()))
                and np.all(np.isfinite(s.last_wrench.to_array())))


def tick(skill: Skill, world: World, dt: float) -> ExecutionStatus:
    """Advance ``skill`` by one evaluation against ``world``.

    The first tick checks the pre-condition.  Every tick then checks the
    invariant, the post-condition and the timeout, in that order.  Terminal
    states are sticky.
    """
    if skill.status.terminal:
        return skill.status
    if not _world_finite(world):
        skill.status = failed(FailReason.NON_FINITE)
        return skill.status
    if skill.status.kind is StatusKind.INACTIVE:
        if not skill.pre.holds(world):
            skill.status = failed(FailReason.PRE_UNSATISFIED)
            return skill.status
        skill.status = running()
    else:
        skill.elapsed += dt
    if not skill.inv.holds(world):
        skill.status = failed(FailReason.INVARIANT_VIOLATED)
    elif skill.post.holds(world):
        skill.status = SUCCEEDED
    elif skill.elapsed > skill.timeout:
        skill.status = failed(FailReason.TIMEOUT)
    return skill.status


class ChainError(ValueError):
    pass


class NoEntryPoint(RuntimeError):
    pass


@dataclass
class CompositeSkill:
    children: list[Skill]

    def __post_init__(self):
        if not self.children:
            raise ChainError("a composite skill needs at least one child")
        for i, (a, b) in enumerate(zip(self.children, self.children[1:])):
            if not regions_overlap(a.post, b.pre):
                raise ChainError(f"post of child {i} ({a.name}) cannot establish pre of {b.name}")


Execute = Callable[[Skill, World, float], World]


def run_composite(comp: CompositeSkill, world: World, start_index: int, execute: Execute,
                  dt: float, max_ticks: int = 1_000_000):
    """Run children from ``start_index``; return (trace, final world).

    ``execute(skill, world, dt)`` applies the skill's behaviour for one tick.
    """
    if not 0 <= start_index < len(comp.children):
        raise IndexError("start_index out of range")
    trace: list[ExecutionStatus] = []
    ticks = 0
    for i in range(start_index, len(comp.children)):
        child = comp.children[i]
        child.reset()
        while True:
            st = tick(child, world, dt)
            if st.kind is StatusKind.FAILED:
                trace.append(st)
                return trace, world
            if st.kind is StatusKind.SUCCEEDED:
                break
            trace.append(running(i))
            world = execute(child, world, dt)
            ticks += 1
            if ticks >= max_ticks:
                trace.append(failed(FailReason.TIMEOUT))
                return trace, world
    trace.append(SUCCEEDED)
    return trace, world


def resume_index(comp: CompositeSkill, world: World) -> int:
    """Largest child index whose pre-condition holds in ``world``."""
    for i in range(len(comp.children) - 1, -1, -1):
        if comp.children[i].pre.holds(world):
            return i
    raise NoEntryPoint("no child's pre-condition holds")


# ---------------------------------------------------------------------------
# goal blending
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlendState:
    alpha_smooth: float
    x_align: Pose6
    x_insert: Pose6
    gated: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha_smooth <= 1.0:
            raise ValueError("alpha_smooth must lie in [0, 1]")


def blend_goal(b: BlendState) -> Pose6:
    """(1 - a) * x_align + a * x_insert, angles along the shortest arc."""
    a = b.alpha_smooth
    p0, p1 = b.x_align.to_array(), b.x_insert.to_array()
    if a == 0.0:
        return b.x_align
    if a == 1.0:
        return b.x_insert
    out = (1.0 - a) * p0 + a * p1
    out[3:] = p0[3:] + a * wrap_angle(p1[3:] - p0[3:])
    return Pose6.from_array(out)


def advance_alpha(b: BlendState, world: World, dt: float, align_post, ramp_depth: float) -> BlendState:
    """Depth-driven ramp of the blend weight, gated on the alignment post-condition."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    gated = b.gated or align_post.holds(world)
    if not gated:
        return b
    progress = insertion_depth(world.state.peg_pose, world.geom) / ramp_depth
    alpha = max(b.alpha_smooth, min(1.0, progress))
    return replace(b, alpha_smooth=alpha, gated=True)


# ---------------------------------------------------------------------------
# default assembly chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SkillConfig:
    align_tilt: float = 0.02
    align_height: float = 0.002
    insert_fraction: float = 0.9
    f_col: float = 50.0
    ramp_depth: float = 0.005
    timeout: float = 15.0
    workspace_lateral: float = 0.01
    workspace_tilt: float = 0.3
    workspace_height: float = 0.05
    goal_noise_lin: float = 5e-4
    goal_noise_ang: float = 0.01

    def __post_init__(self):
        for name in ("align_tilt", "align_height", "f_col", "ramp_depth", "timeout",
                     "workspace_lateral", "workspace_tilt", "workspace_height"):
            if not getattr(self, name) > 0:
                raise ValueError(f"skill.{name} must be > 0")
        if not 0 < self.insert_fraction <= 1:
            raise ValueError("skill.insert_fraction must lie in (0, 1]")
        if self.goal_noise_lin < 0 or self.goal_noise_ang < 0:
            raise ValueError("goal noise must be >= 0")


def align_post(geom: PegHoleGeometry, cfg: SkillConfig, hole: Pose6 = Pose6()) -> PoseWithin:
    return PoseWithin(hole, geom.clearance / 2.0, cfg.align_tilt, cfg.align_height)


def assembly_chain(geom: PegHoleGeometry, cfg: SkillConfig, behavior: str = "nominal",
                   hole: Pose6 = Pose6()) -> CompositeSkill:
    """Alignment followed by insertion; alignment's post is insertion's pre."""
    inv = ForceBelow(cfg.f_col)
    aligned = align_post(geom, cfg, hole)
    workspace = PoseWithin(hole, cfg.workspace_lateral, cfg.workspace_tilt, cfg.workspace_height)
    inserted = DepthAtLeast(cfg.insert_fraction * geom.hole_depth)
    align = Skill("align", workspace, inv, aligned, behavior, cfg.timeout)
    insert = Skill("insert", aligned, inv, inserted, behavior, cfg.timeout)
    return CompositeSkill([align, insert])


def sequence_names(trace: Sequence[ExecutionStatus]) -> list[str]:
    return [repr(s) for s in trace]
