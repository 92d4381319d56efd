"""Run configuration: one YAML file with sim / ctrl / skill / env / rl sections.

Every section is parsed into a frozen dataclass; unknown keys are rejected
and values are validated by the dataclasses' own checks.  ``dump_config``
writes a fully resolved snapshot that ``load_config`` reads back to an
equal ``RunConfig``.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .contact import ContactParams, InitRanges, PegHoleGeometry
from .env import ActionBounds, AssemblyConfig, ControlConfig, EnvConfig, NoiseConfig, RewardWeights
from .sac import SACHyper
from .skills import SkillConfig

SEED_ENV = "RESIDSKILL_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimSection:
    peg_side: float = PegHoleGeometry.peg_side
    peg_length: float = PegHoleGeometry.peg_length
    hole_side: float = PegHoleGeometry.hole_side
    hole_depth: float = PegHoleGeometry.hole_depth
    chamfer: float = PegHoleGeometry.chamfer
    mu: float = ContactParams.mu
    k_n: float = ContactParams.k_n
    b_n: float = ContactParams.b_n
    f_cap: float = ContactParams.f_cap
    admittance_lin: float = ContactParams.admittance_lin
    admittance_ang: float = ContactParams.admittance_ang
    edge_samples: int = ContactParams.edge_samples
    init: InitRanges = field(default_factory=InitRanges)

    def __post_init__(self):
        self.geometry()
        self.contact()

    def geometry(self) -> PegHoleGeometry:
        return PegHoleGeometry(**{f.name: getattr(self, f.name) for f in fields(PegHoleGeometry)})

    def contact(self) -> ContactParams:
        return ContactParams(**{f.name: getattr(self, f.name) for f in fields(ContactParams)})


@dataclass(frozen=True)
class EnvSection:
    history: int = EnvConfig.history
    control_hz: float = EnvConfig.control_hz
    policy_hz: float = EnvConfig.policy_hz
    timeout: float = EnvConfig.timeout
    misaligned: bool = True
    goal_noise: bool = True
    bounds: ActionBounds = field(default_factory=ActionBounds)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    obs_scale: tuple = EnvConfig.obs_scale

    def __post_init__(self):
        self.env_config()

    def env_config(self) -> EnvConfig:
        return EnvConfig(**{f.name: getattr(self, f.name) for f in fields(EnvConfig)})


@dataclass(frozen=True)
class RLSection(SACHyper):
    total_steps: int = 100_000
    record_wallclock: bool = False

    def __post_init__(self):
        super().__post_init__()
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    def hyper(self) -> SACHyper:
        return SACHyper(**{f.name: getattr(self, f.name) for f in fields(SACHyper)})


@dataclass(frozen=True)
class RunConfig:
    sim: SimSection = field(default_factory=SimSection)
    ctrl: ControlConfig = field(default_factory=ControlConfig)
    skill: SkillConfig = field(default_factory=SkillConfig)
    env: EnvSection = field(default_factory=EnvSection)
    rl: RLSection = field(default_factory=RLSection)
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        if not isinstance(self.output_dir, str) or not self.output_dir:
            raise ValueError("output_dir must be a non-empty string")
        self.assembly()

    def assembly(self) -> AssemblyConfig:
        return AssemblyConfig(geom=self.sim.geometry(), contact=self.sim.contact(), init=self.sim.init,
                              ctrl=self.ctrl, skill=self.skill, env=self.env.env_config())


# ---------------------------------------------------------------------------

def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def build(cls, data, path: str = ""):
    """Construct dataclass ``cls`` from a mapping, recursing into nested sections."""
    where = path or "<root>"
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls) if f.init}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        tp = hints.get(key)
        if dataclasses.is_dataclass(tp):
            kwargs[key] = build(tp, value, sub)
        else:
            kwargs[key] = _tuplify(value)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [to_dict(x) for x in obj]
    return obj


def parse_config(text: str, environ: typing.Mapping[str, str] | None = None) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"<root>: invalid YAML: {' '.join(str(exc).split())}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"<root>: expected a mapping, got {type(data).__name__}")
    data = dict(data)
    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV):
        try:
            data["seed"] = int(environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"seed: {SEED_ENV}={environ[SEED_ENV]!r} is not an integer") from exc
    return build(RunConfig, data)


def load_config(path, environ: typing.Mapping[str, str] | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"<root>: cannot read {path}: {exc.strerror}") from exc
    return parse_config(text, environ)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
