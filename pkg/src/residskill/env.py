"""Learning-facing peg-in-hole environment.

One policy step holds an action for ``n_inner`` control ticks.  Each tick
evaluates the hybrid law with the action's gains and selection, offsets the
motion goal by the residual pose, composes and saturates the command, passes
it through the robot's first-order velocity tracking and steps the contact
simulator.  The composite align -> insert skill is ticked alongside and its
events drive the sparse reward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import controller as ctl
from .contact import (ContactParams, ContactSim, InitRanges, NonFinite, PegHoleGeometry,
                      SimState, sample_initial_pose)
from .se3 import Pose6, Twist6, Wrench6, norm_blocks, pose_error_array
from .skills import (BlendState, FailReason, SkillConfig, StatusKind, World, advance_alpha,
                     align_post, assembly_chain, blend_goal, resume_index, tick)

FRAME_DIM = 18
ACTION_DIM = 24


# ---------------------------------------------------------------------------
# configuration records
# ---------------------------------------------------------------------------

def _six(v) -> tuple:
    a = np.broadcast_to(np.asarray(v, dtype=np.float64), (6,))
    return tuple(float(x) for x in a)


@dataclass(frozen=True)
class ActionBounds:
    xa_lin: float = 0.005
    xa_ang: float = 0.05
    kp_x: tuple = (10.0, 400.0)
    kp_f: tuple = (1.0, 40.0)

    def __post_init__(self):
        if not (self.xa_lin > 0 and self.xa_ang > 0):
            raise ValueError("residual pose bounds must be > 0")
        for name in ("kp_x", "kp_f"):
            lo, hi = getattr(self, name)
            if not 0 <= lo < hi:
                raise ValueError(f"{name} bounds need 0 <= lo < hi")

    def lows_highs(self) -> tuple[np.ndarray, np.ndarray]:
        xa = np.array([self.xa_lin] * 3 + [self.xa_ang] * 3)
        lo = np.concatenate([-xa, np.full(6, self.kp_x[0]), np.full(6, self.kp_f[0]), np.zeros(6)])
        hi = np.concatenate([xa, np.full(6, self.kp_x[1]), np.full(6, self.kp_f[1]), np.ones(6)])
        return lo, hi


@dataclass(frozen=True)
class RewardWeights:
    w: tuple = (-5.0, -0.001, -0.005)
    r_insert: float = 500.0
    r_align: float = 50.0
    r_collision: float = -80.0

    def __post_init__(self):
        vals = list(self.w) + [self.r_insert, self.r_align, self.r_collision]
        if len(self.w) != 3 or not all(math.isfinite(v) for v in vals):
            raise ValueError("reward weights must be three finite values plus finite magnitudes")


@dataclass(frozen=True)
class NoiseConfig:
    sigma_pose: float = 1e-4
    sigma_twist: float = 1e-3
    sigma_wrench: float = 0.5

    def __post_init__(self):
        if min(self.sigma_pose, self.sigma_twist, self.sigma_wrench) < 0:
            raise ValueError("noise sigmas must be >= 0")


@dataclass(frozen=True)
class ControlConfig:
    kp_x: tuple = (200.0,) * 6
    kp_f: tuple = (20.0,) * 6
    sigma: tuple = (0.0, 0.0, 1.0, 0.0, 0.0, 0.0)
    force_target: tuple = (0.0, 0.0, 5.0, 0.0, 0.0, 0.0)
    # command produced per unit of force-branch gain and newton (newton-metre)
    force_unit: tuple = (1e-4, 1e-4, 1e-4, 0.5, 0.5, 0.5)
    integral_clamp: tuple = tuple(ctl.DEFAULT_INTEGRAL_CLAMP)
    command_bounds: tuple = tuple(ctl.DEFAULT_COMMAND_BOUNDS)
    vel_tau: float = 0.05

    def __post_init__(self):
        for name in ("kp_x", "kp_f", "sigma", "force_target", "force_unit",
                     "integral_clamp", "command_bounds"):
            object.__setattr__(self, name, _six(getattr(self, name)))
        if min(self.kp_x + self.kp_f) < 0:
            raise ValueError("ctrl gains must be >= 0")
        if not all(0 <= s <= 1 for s in self.sigma):
            raise ValueError("ctrl.sigma entries must lie in [0, 1]")
        if min(self.force_unit) <= 0 or min(self.command_bounds) <= 0 or min(self.integral_clamp) < 0:
            raise ValueError("ctrl force_unit and command_bounds must be > 0, clamps >= 0")
        if not self.vel_tau > 0:
            raise ValueError("ctrl.vel_tau must be > 0")


@dataclass(frozen=True)
class EnvConfig:
    history: int = 4
    control_hz: float = 500.0
    policy_hz: float = 40.0
    timeout: float = 15.0
    bounds: ActionBounds = field(default_factory=ActionBounds)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    # per-channel scaling of the flattened observation handed to the learner
    obs_scale: tuple = (1000.0, 1000.0, 1000.0, 10.0, 10.0, 10.0,
                        100.0, 100.0, 100.0, 1.0, 1.0, 1.0,
                        0.1, 0.1, 0.1, 10.0, 10.0, 10.0)

    def __post_init__(self):
        if self.history < 1:
            raise ValueError("env.history must be >= 1")
        if not (self.control_hz > 0 and self.policy_hz > 0 and self.timeout > 0):
            raise ValueError("env rates and timeout must be > 0")
        if len(self.obs_scale) != FRAME_DIM:
            raise ValueError("env.obs_scale needs 18 entries")

    @property
    def dt(self) -> float:
        return 1.0 / self.control_hz

    @property
    def n_inner(self) -> int:
        return int(round(self.control_hz / self.policy_hz))


@dataclass(frozen=True)
class AssemblyConfig:
    geom: PegHoleGeometry = field(default_factory=PegHoleGeometry)
    contact: ContactParams = field(default_factory=ContactParams)
    init: InitRanges = field(default_factory=InitRanges)
    ctrl: ControlConfig = field(default_factory=ControlConfig)
    skill: SkillConfig = field(default_factory=SkillConfig)
    env: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self):
        lo, hi = self.env.bounds.lows_highs()
        nom = np.concatenate([np.zeros(6), self.ctrl.kp_x, self.ctrl.kp_f, self.ctrl.sigma])
        if np.any(nom < lo) or np.any(nom > hi):
            raise ValueError("ctrl gains must lie inside env.bounds so the zero residual is the nominal")


# ---------------------------------------------------------------------------
# observation / action
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    stack: np.ndarray  # (l, 18), oldest first

    @classmethod
    def fresh(cls, frame, history: int) -> "Observation":
        f = np.asarray(frame, dtype=np.float64)
        return cls(np.tile(f, (history, 1)))

    def flat(self) -> np.ndarray:
        return self.stack.reshape(-1)


def push_frame(obs: Observation, frame) -> Observation:
    f = np.asarray(frame, dtype=np.float64)
    if f.shape != (FRAME_DIM,) or not np.all(np.isfinite(f)):
        raise ValueError("frame must be 18 finite values")
    return Observation(np.vstack([obs.stack[1:], f[None, :]]))


@dataclass(frozen=True)
class Action:
    x_a: np.ndarray
    kp_x: np.ndarray
    kp_f: np.ndarray
    sigma: np.ndarray

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.x_a, self.kp_x, self.kp_f, self.sigma])

    @classmethod
    def from_array(cls, a) -> "Action":
        a = np.asarray(a, dtype=np.float64)
        return cls(a[0:6].copy(), a[6:12].copy(), a[12:18].copy(), a[18:24].copy())


def decode_action(raw, bounds: ActionBounds = ActionBounds()) -> Action:
    """Affine map of 24 values in [-1, 1] onto the action bounds."""
    r = np.clip(np.asarray(raw, dtype=np.float64), -1.0, 1.0)
    if r.shape != (ACTION_DIM,):
        raise ValueError(f"raw action must have {ACTION_DIM} entries")
    lo, hi = bounds.lows_highs()
    return Action.from_array(lo + (r + 1.0) * 0.5 * (hi - lo))


def encode_action(action: Action, bounds: ActionBounds = ActionBounds()) -> np.ndarray:
    lo, hi = bounds.lows_highs()
    return np.clip(2.0 * (action.to_array() - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def residual_action(raw, nominal: Action, bounds: ActionBounds = ActionBounds()) -> Action:
    """Nominal action plus a policy residual in [-1, 1]^24.

    One unit of residual spans half of a channel's bound interval, so this is
    the same as adding ``raw`` to the nominal's normalised encoding, but a
    zero residual returns the nominal values exactly (no decode round trip).
    """
    r = np.clip(np.asarray(raw, dtype=np.float64), -1.0, 1.0)
    if r.shape != (ACTION_DIM,):
        raise ValueError(f"raw residual must have {ACTION_DIM} entries")
    lo, hi = bounds.lows_highs()
    return Action.from_array(np.clip(nominal.to_array() + r * (0.5 * (hi - lo)), lo, hi))


def nominal_action(ctrl: ControlConfig) -> Action:
    return Action(np.zeros(6), np.array(ctrl.kp_x), np.array(ctrl.kp_f), np.array(ctrl.sigma))


# ---------------------------------------------------------------------------
# rewards / noise
# ---------------------------------------------------------------------------

def sparse_reward(insert: bool, align: bool, collision: bool, wt: RewardWeights = RewardWeights()) -> float:
    return wt.r_insert * insert + wt.r_align * align + wt.r_collision * collision


def dense_reward(xe, xdot, fe, wt: RewardWeights = RewardWeights()) -> float:
    return float(np.dot(np.asarray(wt.w), norm_blocks(xe, xdot, fe)))


def inject_noise(frame, cfg: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise on the pose, twist and wrench channel groups."""
    f = np.array(frame, dtype=np.float64)
    sig = np.repeat([cfg.sigma_pose, cfg.sigma_twist, cfg.sigma_wrench], 6)
    # always draw, so the random stream does not depend on which sigmas are zero
    return f + sig * rng.standard_normal(FRAME_DIM)


# ---------------------------------------------------------------------------
# environment
# ---------------------------------------------------------------------------

@dataclass
class EpisodeInfo:
    aligned: bool = False
    inserted: bool = False
    collision: bool = False
    timeout: bool = False
    failure: str | None = None
    return_dense: float = 0.0
    return_sparse: float = 0.0
    steps: int = 0
    sim_time: float = 0.0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class AssemblyEnv:
    """Composite align -> insert peg-in-hole task with a residual action interface."""

    def __init__(self, cfg: AssemblyConfig = AssemblyConfig(), *, misaligned: bool = True,
                 goal_noise: bool = True):
        self.cfg = cfg
        self.sim = ContactSim(cfg.geom, cfg.contact)
        self.misaligned = misaligned
        self.goal_noise = goal_noise
        self.nominal = nominal_action(cfg.ctrl)
        self._obs_scale = np.tile(np.asarray(cfg.env.obs_scale), cfg.env.history)
        self._f_target = np.asarray(cfg.ctrl.force_target)
        self._unit = np.asarray(cfg.ctrl.force_unit)
        self._bounds = np.asarray(cfg.ctrl.command_bounds)
        self.obs_dim = FRAME_DIM * cfg.env.history
        self.act_dim = ACTION_DIM
        self.rng = np.random.default_rng(0)

    # -- episode setup ------------------------------------------------------
    def reset(self, seed: int | None = None, pose: Pose6 | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        c = self.cfg
        rng = self.rng
        if pose is None:
            if self.misaligned:
                pose = sample_initial_pose(rng, c.init)
            else:
                lo, hi = c.init.axial_height
                pose = Pose6(0.0, 0.0, 0.5 * (lo + hi))
        # perceived hole pose; always drawn so the streams of both modes match
        n_lin = rng.standard_normal(3) * c.skill.goal_noise_lin
        n_ang = rng.standard_normal(3) * c.skill.goal_noise_ang
        if not self.goal_noise:
            n_lin[:] = 0.0
            n_ang[:] = 0.0
        hole = np.concatenate([n_lin, n_ang])
        self.initial_pose = pose
        x_align = hole.copy()
        x_align[2] += -0.001
        x_insert = hole.copy()
        x_insert[2] += -c.geom.hole_depth
        self.blend = BlendState(0.0, Pose6.from_array(x_align), Pose6.from_array(x_insert))
        self.state = SimState(pose, Twist6(), 0.0, Wrench6())
        self.pose = pose.to_array()
        self.twist = np.zeros(6)
        self.wrench = np.zeros(6)
        self.v_robot = np.zeros(6)
        self.integ = ctl.ForceIntegral(np.zeros(6), np.asarray(c.ctrl.integral_clamp))
        self.chain = assembly_chain(c.geom, c.skill)
        self.align_cond = align_post(c.geom, c.skill)
        world = World(self.state, c.geom)
        try:
            self.child = resume_index(self.chain, world)
        except Exception:
            self.child = 0
        for s in self.chain.children:
            s.reset()
        self.info = EpisodeInfo()
        self.done = False
        self._events = {"align": False, "insert": False, "collision": False}
        self._tick_skill(world, 0.0)
        noisy = inject_noise(self._frame(), c.env.noise, rng)
        self.obs = Observation.fresh(noisy, c.env.history)
        return self.observation()

    def observation(self) -> np.ndarray:
        return self.obs.flat() * self._obs_scale

    # -- signals ------------------------------------------------------------
    def _goal(self) -> np.ndarray:
        return blend_goal(self.blend).to_array()

    def _frame(self) -> np.ndarray:
        xe = pose_error_array(self._goal(), self.pose)
        return np.concatenate([xe, self.twist, self.wrench - self._f_target])

    # -- skill bookkeeping --------------------------------------------------
    def _tick_skill(self, world: World, dt: float) -> None:
        """Tick the active chain child; record align / insert / failure events."""
        info = self.info
        if self.done:
            return
        if not info.aligned and self.align_cond.holds(world):
            info.aligned = True
            self._events["align"] = True
        skill = self.chain.children[self.child]
        st = tick(skill, world, dt)
        if st.kind is StatusKind.SUCCEEDED:
            if self.child + 1 < len(self.chain.children):
                self.child += 1
                st = tick(self.chain.children[self.child], world, 0.0)
            if st.kind is StatusKind.SUCCEEDED:
                info.inserted = True
                self._events["insert"] = True
                self.done = True
        if st.kind is StatusKind.FAILED:
            self.done = True
            if st.reason is FailReason.INVARIANT_VIOLATED:
                info.collision = True
                self._events["collision"] = True
            elif st.reason is FailReason.TIMEOUT:
                info.timeout = True
            info.failure = st.reason.value

    # -- stepping -----------------------------------------------------------
    def step(self, raw_residual) -> tuple[np.ndarray, float, bool, dict]:
        """Residual interface: see ``residual_action``."""
        return self.step_action(residual_action(raw_residual, self.nominal, self.cfg.env.bounds))

    def step_action(self, action: Action) -> tuple[np.ndarray, float, bool, dict]:
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        c = self.cfg
        dt = c.env.dt
        gains = ctl.derive_gains(action.kp_x, np.asarray(action.kp_f) * self._unit)
        sigma = ctl.SelectionMatrix(action.sigma)
        u_rl = (1.0 - sigma.sigma) * gains.kp_x * np.asarray(action.x_a)
        lag = dt / c.ctrl.vel_tau
        self._events = {"align": False, "insert": False, "collision": False}
        for _ in range(c.env.n_inner):
            xe = pose_error_array(self._goal(), self.pose)
            fe = self.wrench - self._f_target
            u_nom = ctl.nominal_command(xe, -self.twist, fe, self.integ, sigma, gains)
            u = ctl.compose(u_nom, u_rl, self._bounds)
            self.v_robot = self.v_robot + lag * (u - self.v_robot)
            try:
                self.pose, self.twist, self.wrench = self.sim.step_array(self.pose, self.v_robot, dt)
            except NonFinite:
                self.done = True
                self.info.failure = FailReason.NON_FINITE.value
                break
            self.integ = ctl.update_integral(self.integ, self.wrench - self._f_target, dt)
            self.state = SimState(Pose6.from_array(self.pose), Twist6.from_array(self.twist),
                                  self.state.time + dt, Wrench6.from_array(self.wrench))
            world = World(self.state, c.geom)
            self.blend = advance_alpha(self.blend, world, dt, self.align_cond, c.skill.ramp_depth)
            self._tick_skill(world, dt)
            if self.state.time >= c.env.timeout - 1e-12 and not self.done:
                self.done = True
                self.info.timeout = True
                self.info.failure = FailReason.TIMEOUT.value
            if self.done:
                break
        frame = self._frame() if np.all(np.isfinite(self.pose)) else np.zeros(FRAME_DIM)
        self.obs = push_frame(self.obs, inject_noise(frame, c.env.noise, self.rng))
        wt = c.env.reward
        r_dense = dense_reward(frame[:6], frame[6:12], frame[12:], wt)
        r_sparse = sparse_reward(self._events["insert"], self._events["align"],
                                 self._events["collision"], wt)
        self.info.return_dense += r_dense
        self.info.return_sparse += r_sparse
        self.info.steps += 1
        self.info.sim_time = self.state.time
        info = self.info.as_dict()
        info["events"] = dict(self._events)
        info["r_dense"] = r_dense
        info["r_sparse"] = r_sparse
        info["success"] = self.info.inserted
        return self.observation(), r_dense + r_sparse, self.done, info
