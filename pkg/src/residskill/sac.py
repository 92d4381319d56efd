"""Soft actor-critic with twin critics and automatic temperature tuning.

Everything is float64 numpy; gradients come from ``mlp.backward``.  The
policy is a tanh-squashed diagonal Gaussian whose log standard deviation is
clamped to [-20, 2].
"""

from __future__ import annotations

import csv
import io
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .contact import NonFinite
from .mlp import Adam, MLPParams, backward, forward_cache, init_mlp, mlp_forward, polyak

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG2 = math.log(2.0)


class BadCheckpoint(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, checkpoint: Path | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class SACHyper:
    lr: float = 1e-4
    batch: int = 400
    gamma: float = 0.99
    tau: float = 0.005
    target_entropy: float = -24.0
    buffer_size: int = 1_000_000
    hidden: tuple[int, ...] = (400, 400, 200)
    warmup: int = 1000
    eval_every: int = 5000
    n_eval: int = 10
    init_alpha: float = 1.0
    updates_per_step: int = 1
    warmup_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        checks = [
            ("lr", self.lr > 0, "must be > 0"),
            ("batch", self.batch > 0, "must be > 0"),
            ("gamma", 0 < self.gamma < 1, "must lie in (0, 1)"),
            ("tau", 0 < self.tau <= 1, "must lie in (0, 1]"),
            ("buffer_size", self.buffer_size >= self.batch, "must be >= batch"),
            ("warmup", self.warmup >= 0, "must be >= 0"),
            ("hidden", len(self.hidden) > 0 and min(self.hidden) > 0, "must be non-empty positive sizes"),
            ("init_alpha", self.init_alpha > 0, "must be > 0"),
            ("updates_per_step", self.updates_per_step >= 1, "must be >= 1"),
            ("eval_every", self.eval_every >= 0, "must be >= 0"),
            ("n_eval", self.n_eval >= 1, "must be >= 1"),
            ("warmup_scale", 0.0 <= self.warmup_scale <= 1.0, "must lie in [0, 1]"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ValueError(f"{name} {msg}")


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions."""

    def __init__(self, obs_dim: int, act_dim: int, capacity: int):
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, obs_dim))
        self.d = np.zeros(capacity)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s2, done) -> None:
        i = self.ptr
        self.s[i], self.a[i], self.r[i], self.s2[i], self.d[i] = s, a, r, s2, float(done)
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator):
        if self.size == 0:
            raise ValueError("cannot sample an empty buffer")
        idx = rng.integers(0, self.size, size=n)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.d[idx]


def _softplus(x):
    return np.logaddexp(0.0, x)


def squash(mean: np.ndarray, raw_log_std: np.ndarray, eps: np.ndarray):
    """Reparameterised tanh-Gaussian sample.

    Returns (action, log_prob, cache) where ``cache`` carries what
    ``squash_backward`` needs.
    """
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    u = mean + std * eps
    a = np.tanh(u)
    # log(1 - tanh(u)^2) written stably
    log_det = 2.0 * (_LOG2 - u - _softplus(-2.0 * u))
    logp = np.sum(-0.5 * eps * eps - log_std - _HALF_LOG_2PI - log_det, axis=-1)
    return a, logp, (raw_log_std, std, eps, a)


def squash_backward(cache, d_a: np.ndarray, d_logp: np.ndarray):
    """Gradients w.r.t. (mean, raw_log_std) given upstream d/da and d/dlogp."""
    raw_log_std, std, eps, a = cache
    d_logp = d_logp[..., None]
    d_u = d_a * (1.0 - a * a) + d_logp * 2.0 * a
    d_mean = d_u
    d_log_std = d_u * std * eps - d_logp
    inside = (raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX)
    return d_mean, d_log_std * inside


class Agent:
    """Actor, twin critics, their targets and the log temperature."""

    def __init__(self, obs_dim: int, act_dim: int, hyper: SACHyper = SACHyper(), seed: int = 0):
        self.obs_dim, self.act_dim, self.hyper = obs_dim, act_dim, hyper
        rng = np.random.default_rng(seed)
        h = list(hyper.hidden)
        self.actor = init_mlp([obs_dim] + h + [2 * act_dim], rng, last_scale=1e-2)
        self.q1 = init_mlp([obs_dim + act_dim] + h + [1], rng)
        self.q2 = init_mlp([obs_dim + act_dim] + h + [1], rng)
        self.q1_targ = self.q1.copy()
        self.q2_targ = self.q2.copy()
        self.log_alpha = np.array([math.log(hyper.init_alpha)])
        self.actor_opt = Adam(self.actor.arrays(), hyper.lr)
        self.critic_opt = Adam(self.q1.arrays() + self.q2.arrays(), hyper.lr)
        self.alpha_opt = Adam([self.log_alpha], hyper.lr)
        self.n_updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    def _heads(self, out: np.ndarray):
        return out[..., : self.act_dim], out[..., self.act_dim:]

    def act(self, obs, rng: np.random.Generator | None = None, deterministic: bool = False) -> np.ndarray:
        mean, raw_ls = self._heads(mlp_forward(self.actor, np.asarray(obs, dtype=np.float64)))
        if deterministic:
            return np.tanh(mean)
        if rng is None:
            raise ValueError("stochastic action needs an rng")
        eps = rng.standard_normal(mean.shape)
        return squash(mean, raw_ls, eps)[0]

    def sample_action(self, obs, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Stochastic squashed action and its log-density."""
        mean, raw_ls = self._heads(mlp_forward(self.actor, np.asarray(obs, dtype=np.float64)))
        a, logp, _ = squash(mean, raw_ls, rng.standard_normal(mean.shape))
        return a, logp

    def q_values(self, obs, act):
        x = np.concatenate([obs, act], axis=-1)
        return mlp_forward(self.q1, x)[..., 0], mlp_forward(self.q2, x)[..., 0]

    # -- losses with their gradients (pure: parameters are not modified) ----
    def temperature_loss(self, logp: np.ndarray, log_alpha: float | None = None):
        """J(log a) = -mean(log a * (logp + target_entropy)); returns (loss, dJ/dlog a)."""
        la = self.log_alpha[0] if log_alpha is None else log_alpha
        k = logp + self.hyper.target_entropy
        return float(-np.mean(la * k)), float(-np.mean(k))

    def critic_target(self, batch, eps_next: np.ndarray, alpha: float) -> np.ndarray:
        _, _, r, s2, d = batch
        m2, ls2 = self._heads(mlp_forward(self.actor, s2))
        a2, logp2, _ = squash(m2, ls2, eps_next)
        x2 = np.concatenate([s2, a2], axis=1)
        q_next = np.minimum(mlp_forward(self.q1_targ, x2), mlp_forward(self.q2_targ, x2))[:, 0]
        return r + self.hyper.gamma * (1.0 - d) * (q_next - alpha * logp2)

    def critic_loss(self, batch, y: np.ndarray):
        """0.5 * (MSE(Q1, y) + MSE(Q2, y)); returns (loss, grads of q1 + grads of q2)."""
        s, a = batch[0], batch[1]
        n = s.shape[0]
        x = np.concatenate([s, a], axis=1)
        q1, c1 = forward_cache(self.q1, x)
        q2, c2 = forward_cache(self.q2, x)
        e1, e2 = q1[:, 0] - y, q2[:, 0] - y
        loss = 0.5 * (np.mean(e1 * e1) + np.mean(e2 * e2))
        g1, _ = backward(self.q1, c1, (e1 / n)[:, None])
        g2, _ = backward(self.q2, c2, (e2 / n)[:, None])
        return float(loss), g1 + g2

    def actor_loss(self, s: np.ndarray, eps: np.ndarray, alpha: float):
        """mean(alpha * logp - min(Q1, Q2)) at reparameterised samples.

        Returns (loss, actor grads, logp).
        """
        n = s.shape[0]
        out, cache = forward_cache(self.actor, s)
        mean, raw_ls = self._heads(out)
        a_pi, logp, sq = squash(mean, raw_ls, eps)
        xp = np.concatenate([s, a_pi], axis=1)
        qp1, cp1 = forward_cache(self.q1, xp)
        qp2, cp2 = forward_cache(self.q2, xp)
        use1 = (qp1[:, 0] <= qp2[:, 0])[:, None]
        q_min = np.where(use1, qp1, qp2)[:, 0]
        loss = float(np.mean(alpha * logp - q_min))
        dq = -np.ones((n, 1)) / n
        _, dx1 = backward(self.q1, cp1, dq * use1, need_params=False, need_input=True)
        _, dx2 = backward(self.q2, cp2, dq * ~use1, need_params=False, need_input=True)
        d_a = (dx1 + dx2)[:, self.obs_dim:]
        d_mean, d_ls = squash_backward(sq, d_a, np.full(n, alpha / n))
        grads, _ = backward(self.actor, cache, np.concatenate([d_mean, d_ls], axis=1))
        return loss, grads, logp

    # -- optimiser steps ----------------------------------------------------
    def temperature_update(self, logp: np.ndarray) -> float:
        loss, g = self.temperature_loss(logp)
        self.alpha_opt.step([np.array([g])])
        return loss

    def critic_update(self, batch, eps_next: np.ndarray, alpha: float) -> float:
        loss, grads = self.critic_loss(batch, self.critic_target(batch, eps_next, alpha))
        self.critic_opt.step(grads)
        return loss

    def actor_update(self, s: np.ndarray, eps: np.ndarray, alpha: float) -> float:
        loss, grads, _ = self.actor_loss(s, eps, alpha)
        self.actor_opt.step(grads)
        return loss

    def update(self, batch, rng: np.random.Generator) -> dict:
        """One step on temperature, critics and actor (in that order), then polyak.

        The actor's policy sample is drawn once and shared by the temperature
        and actor losses; all three use the temperature from before this step.
        """
        s = batch[0]
        eps = rng.standard_normal((s.shape[0], self.act_dim))
        eps_next = rng.standard_normal((s.shape[0], self.act_dim))
        alpha = self.alpha
        mean, raw_ls = self._heads(mlp_forward(self.actor, s))
        logp_pi = squash(mean, raw_ls, eps)[1]
        t_loss = self.temperature_update(logp_pi)
        c_loss = self.critic_update(batch, eps_next, alpha)
        a_loss = self.actor_update(s, eps, alpha)
        polyak(self.q1_targ, self.q1, self.hyper.tau)
        polyak(self.q2_targ, self.q2, self.hyper.tau)
        self.n_updates += 1

        stats = {"critic_loss": c_loss, "actor_loss": a_loss, "temperature_loss": t_loss,
                 "alpha": self.alpha, "entropy": float(-np.mean(logp_pi))}
        if not all(math.isfinite(v) for v in stats.values()):
            raise NonFinite(f"non-finite loss at update {self.n_updates}: {stats}")
        return stats

    # checkpoint helpers
    def networks(self) -> list[MLPParams]:
        temp = MLPParams([self.log_alpha.reshape(1, 1).copy()], [np.zeros(1)])
        return [self.actor, self.q1, self.q2, self.q1_targ, self.q2_targ, temp]

    def load_networks(self, nets: Sequence[MLPParams]) -> None:
        mine = self.networks()
        if len(nets) != len(mine) or any(a.sizes != b.sizes for a, b in zip(nets, mine)):
            raise BadCheckpoint("checkpoint shapes do not match this agent")
        for dst, src in zip(mine[:-1], nets[:-1]):
            for x, y in zip(dst.arrays(), src.arrays()):
                x[...] = y
        self.log_alpha[0] = nets[-1].weights[0][0, 0]


# ---------------------------------------------------------------- checkpoint

MAGIC = b"RSKL"
FORMAT_VERSION = 1


def encode_networks(nets: Sequence[MLPParams]) -> bytes:
    """Serialise networks: magic, u32 version, u32 network count, then per
    network a u32 layer count and per layer u32 (in, out) followed by the
    row-major little-endian f64 weight block and the bias block."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(nets)))
    for net in nets:
        buf.write(struct.pack("<I", len(net.weights)))
        for w, b in zip(net.weights, net.biases):
            buf.write(struct.pack("<II", *w.shape))
            buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return buf.getvalue()


def decode_networks(data: bytes) -> list[MLPParams]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise BadCheckpoint("checkpoint is truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise BadCheckpoint("bad magic bytes")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise BadCheckpoint(f"unsupported checkpoint version {version}")
    nets = []
    for _ in range(count):
        (layers,) = struct.unpack("<I", take(4))
        if layers == 0:
            raise BadCheckpoint("network with no layers")
        ws, bs = [], []
        for _ in range(layers):
            n_in, n_out = struct.unpack("<II", take(8))
            ws.append(np.frombuffer(take(8 * n_in * n_out), dtype="<f8").reshape(n_in, n_out).astype(np.float64))
            bs.append(np.frombuffer(take(8 * n_out), dtype="<f8").astype(np.float64))
        try:
            nets.append(MLPParams(ws, bs))
        except ValueError as exc:
            raise BadCheckpoint(str(exc)) from exc
    if pos != len(view):
        raise BadCheckpoint("trailing bytes after checkpoint")
    return nets


def save_checkpoint(agent: Agent, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_networks(agent.networks()))
    tmp.replace(path)
    return path


def read_checkpoint(path) -> list[MLPParams]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise BadCheckpoint(f"cannot read checkpoint: {exc}") from exc
    return decode_networks(data)


def load_agent(path, hyper: SACHyper = SACHyper()) -> Agent:
    """Rebuild an agent whose dimensions are taken from the checkpoint."""
    nets = read_checkpoint(path)
    if len(nets) != 6:
        raise BadCheckpoint(f"expected 6 networks, found {len(nets)}")
    actor = nets[0]
    obs_dim, act_dim = actor.sizes[0], actor.sizes[-1] // 2
    hidden = tuple(actor.sizes[1:-1])
    agent = Agent(obs_dim, act_dim, SACHyper(**{**asdict(hyper), "hidden": hidden}))
    agent.load_networks(nets)
    return agent


# ---------------------------------------------------------------- training


class Env(Protocol):
    obs_dim: int
    act_dim: int

    def reset(self, seed: int | None = None) -> np.ndarray: ...

    def step(self, action) -> tuple[np.ndarray, float, bool, dict]: ...


@dataclass
class MetricsRow:
    step: int
    episode: int
    return_dense: float
    return_sparse: float
    success_align: int
    success_insert: int
    collision: int
    episode_len: int
    wallclock_s: float


METRIC_FIELDS = [f.name for f in fields(MetricsRow)]
LOSS_FIELDS = ["step", "critic_loss", "actor_loss", "alpha", "entropy"]
EVAL_FIELDS = ["step", "episodes", "success_rate", "mean_return"]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class _CsvLog:
    def __init__(self, path: Path, header: list[str]):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.w.writerow(header)

    def row(self, values) -> None:
        self.w.writerow([_fmt(v) for v in values])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def run_episode(env: Env, policy: Callable[[np.ndarray], np.ndarray], seed: int, max_steps: int = 100_000):
    """Roll out one episode; returns (total reward, last info, steps)."""
    obs = env.reset(seed=seed)
    total, info, t = 0.0, {}, 0
    done = False
    while not done and t < max_steps:
        obs, r, done, info = env.step(policy(obs))
        total += r
        t += 1
    return total, info, t


def evaluate(agent: Agent, env: Env, seeds: Sequence[int]) -> tuple[float, float]:
    """Deterministic evaluation; returns (success rate, mean return)."""
    succ, rets = 0, []
    for sd in seeds:
        ret, info, _ = run_episode(env, lambda o: agent.act(o, deterministic=True), int(sd))
        succ += int(bool(info.get("success", False)))
        rets.append(ret)
    return succ / max(len(seeds), 1), float(np.mean(rets)) if rets else 0.0


@dataclass
class TrainResult:
    agent: Agent
    episode_returns: list[float] = field(default_factory=list)
    best_success: float = -1.0
    steps: int = 0


def train(env: Env, hyper: SACHyper, total_steps: int, seed: int, out_dir=None,
          eval_env: Env | None = None, record_wallclock: bool = False) -> TrainResult:
    """Off-policy training loop.

    The first ``hyper.warmup`` steps take uniform random actions (scaled by
    ``warmup_scale``) and perform no updates.  When ``out_dir`` is given the
    latest and best checkpoints plus CSV logs are written there.  With
    ``record_wallclock`` false the wallclock column is written as 0 so reruns
    are byte-identical.
    """
    ss = np.random.SeedSequence(seed)
    init_seed, act_seed, upd_seed, ep_seed, ev_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(5))
    agent = Agent(env.obs_dim, env.act_dim, hyper, seed=init_seed)
    act_rng = np.random.default_rng(act_seed)
    upd_rng = np.random.default_rng(upd_seed)
    ep_rng = np.random.default_rng(ep_seed)
    eval_seeds = np.random.default_rng(ev_seed).integers(0, 2**31 - 1, size=hyper.n_eval)
    buf = ReplayBuffer(env.obs_dim, env.act_dim, min(hyper.buffer_size, max(total_steps, hyper.batch)))
    result = TrainResult(agent)

    out = Path(out_dir) if out_dir is not None else None
    logs = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logs = {"metrics": _CsvLog(out / "metrics.csv", METRIC_FIELDS),
                "losses": _CsvLog(out / "losses.csv", LOSS_FIELDS),
                "evals": _CsvLog(out / "evals.csv", EVAL_FIELDS)}
    t0 = time.perf_counter()

    def wall() -> float:
        return round(time.perf_counter() - t0, 3) if record_wallclock else 0.0

    try:
        obs = env.reset(seed=int(ep_rng.integers(0, 2**31 - 1)))
        ep, ep_ret, ep_sparse, ep_len = 0, 0.0, 0.0, 0
        for step in range(1, total_steps + 1):
            if step <= hyper.warmup:
                a = hyper.warmup_scale * act_rng.uniform(-1.0, 1.0, size=env.act_dim)
            else:
                a = agent.act(obs, act_rng)
            obs2, r, done, info = env.step(a)
            timeout = bool(info.get("timeout", False))
            buf.add(obs, a, r, obs2, done and not timeout)
            obs = obs2
            ep_ret += r
            ep_sparse += float(info.get("r_sparse", 0.0))
            ep_len += 1

            if step > hyper.warmup and len(buf) >= hyper.batch:
                for _ in range(hyper.updates_per_step):
                    try:
                        stats = agent.update(buf.sample(hyper.batch, upd_rng), upd_rng)
                    except NonFinite as exc:
                        ck = save_checkpoint(agent, out / "partial.ckpt") if out is not None else None
                        raise TrainingDiverged(str(exc), ck) from exc
                if "losses" in logs and step % 1000 == 0:
                    logs["losses"].row([step, stats["critic_loss"], stats["actor_loss"],
                                        stats["alpha"], stats["entropy"]])

            if done:
                result.episode_returns.append(ep_ret)
                if "metrics" in logs:
                    logs["metrics"].row([step, ep, ep_ret, ep_sparse, int(bool(info.get("aligned", False))),
                                         int(bool(info.get("success", False))),
                                         int(bool(info.get("collision", False))), ep_len, wall()])
                ep += 1
                ep_ret, ep_sparse, ep_len = 0.0, 0.0, 0
                obs = env.reset(seed=int(ep_rng.integers(0, 2**31 - 1)))

            if out is not None and hyper.eval_every > 0 and step % hyper.eval_every == 0:
                rate, mret = evaluate(agent, eval_env if eval_env is not None else env, eval_seeds)
                logs["evals"].row([step, len(eval_seeds), rate, mret])
                save_checkpoint(agent, out / "latest.ckpt")
                if rate > result.best_success:
                    result.best_success = rate
                    save_checkpoint(agent, out / "best.ckpt")
                if eval_env is None:
                    obs = env.reset(seed=int(ep_rng.integers(0, 2**31 - 1)))
                    ep_ret, ep_sparse, ep_len = 0.0, 0.0, 0
        result.steps = total_steps
        if out is not None:
            save_checkpoint(agent, out / "latest.ckpt")
            if not (out / "best.ckpt").exists():
                save_checkpoint(agent, out / "best.ckpt")
    finally:
        for lg in logs.values():
            lg.close()
    return result


# ---------------------------------------------------------------- toy task


class PointMass1D:
    """Drive a unit point mass to the origin.

    State is (x, v); the action is a force in [-1, 1].  Reward is
    exp(-(x / 0.1)^2) per step, so a random policy collects little.
    """

    obs_dim = 2
    act_dim = 1

    def __init__(self, dt: float = 0.1, horizon: int = 50, gain: float = 1.0):
        self.dt, self.horizon, self.gain = dt, horizon, gain
        self.rng = np.random.default_rng(0)
        self.state = np.zeros(2)
        self.t = 0

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = np.array([self.rng.uniform(-1.0, 1.0), 0.0])
        self.t = 0
        return self.state.copy()

    def step(self, action):
        f = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
        x, v = self.state
        v = v + self.gain * f * self.dt
        x = x + v * self.dt
        self.state = np.array([x, v])
        self.t += 1
        r = float(np.exp(-(x / 0.1) ** 2))
        done = self.t >= self.horizon
        return self.state.copy(), r, done, {"timeout": done, "success": abs(x) < 0.05}
