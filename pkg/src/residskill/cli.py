"""Command line entry points: train, eval, compare, export-curves.

Every failure prints exactly one line of the form

    residskill-error:<kind>: <message>

to stderr and exits with 2 (config), 3 (runtime) or 4 (bad checkpoint).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ConfigError, RunConfig, dump_config, load_config
from .env import AssemblyEnv
from .sac import METRIC_FIELDS, Agent, BadCheckpoint, TrainingDiverged, load_agent, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECKPOINT = 0, 2, 3, 4
ERROR_PREFIX = "residskill-error"
SEED_LIMIT = 2**31 - 1


class ParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def make_env(cfg: RunConfig) -> AssemblyEnv:
    return AssemblyEnv(cfg.assembly(), misaligned=cfg.env.misaligned, goal_noise=cfg.env.goal_noise)


def episode_seeds(seed: int, n: int) -> list[int]:
    """Per-episode reset seeds for evaluation; the first k of n are the same for any n >= k."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    return [int(rng.integers(0, SEED_LIMIT)) for _ in range(n)]


@dataclass
class EpisodeResult:
    seed: int
    inserted: bool
    aligned: bool
    collision: bool
    return_dense: float
    return_sparse: float
    steps: int
    sim_time: float
    initial_pose: tuple


def rollout(env: AssemblyEnv, policy: Callable[[np.ndarray], np.ndarray], seed: int) -> EpisodeResult:
    obs = env.reset(seed=seed)
    pose0 = tuple(env.initial_pose.to_array().tolist())
    done, info = False, {}
    while not done:
        obs, _, done, info = env.step(policy(obs))
    return EpisodeResult(seed, bool(info["inserted"]), bool(info["aligned"]), bool(info["collision"]),
                         float(info["return_dense"]), float(info["return_sparse"]), int(info["steps"]),
                         float(info["sim_time"]), pose0)


def residual_policy(agent: Agent) -> Callable[[np.ndarray], np.ndarray]:
    return lambda obs: agent.act(obs, deterministic=True)


def nominal_policy(act_dim: int) -> Callable[[np.ndarray], np.ndarray]:
    zero = np.zeros(act_dim)
    return lambda obs: zero


def write_episode_rows(path: Path, results: Sequence[EpisodeResult]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        step = 0
        for i, r in enumerate(results):
            step += r.steps
            w.writerow([step, i, repr(r.return_dense), repr(r.return_sparse), int(r.aligned),
                        int(r.inserted), int(r.collision), r.steps, repr(0.0)])


def summarize(results: Sequence[EpisodeResult]) -> dict:
    n = len(results)
    done_times = [r.sim_time for r in results if r.inserted]
    return {
        "episodes": n,
        "insert_success": sum(r.inserted for r in results),
        "insert_rate": sum(r.inserted for r in results) / n,
        "align_rate": sum(r.aligned for r in results) / n,
        "mean_return": float(np.mean([r.return_dense + r.return_sparse for r in results])),
        "mean_completion_time": float(np.mean(done_times)) if done_times else None,
    }


def wilson_interval(k: int, n: int, z: float = 1.96) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    p = k / n
    den = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return (max(0.0, centre - half), min(1.0, centre + half))


def paired_difference(a: Sequence[bool], b: Sequence[bool], z: float = 1.96) -> dict:
    """Difference of paired success rates (b - a) with a Newcombe score interval
    and an exact two-sided McNemar p-value on the discordant pairs."""
    n = len(a)
    if n != len(b) or n == 0:
        raise ValueError("need equally many (>0) paired outcomes")
    n10 = sum(1 for x, y in zip(a, b) if x and not y)   # only arm a succeeded
    n01 = sum(1 for x, y in zip(a, b) if y and not x)   # only arm b succeeded
    n11 = sum(1 for x, y in zip(a, b) if x and y)
    n00 = n - n10 - n01 - n11
    pa, pb = (n10 + n11) / n, (n01 + n11) / n
    la, ua = wilson_interval(n10 + n11, n, z)
    lb, ub = wilson_interval(n01 + n11, n, z)
    # Newcombe (1998) method 10 for paired proportions
    denom = math.sqrt((n10 + n11) * (n01 + n00) * (n01 + n11) * (n10 + n00))
    num = n11 * n00 - n10 * n01
    if denom == 0:
        phi = 0.0
    else:
        phi = (max(num - n / 2.0, 0.0) if num > 0 else num) / denom
    d = pb - pa
    lo = d - math.sqrt(max((pb - lb) ** 2 - 2 * phi * (pb - lb) * (ua - pa) + (ua - pa) ** 2, 0.0))
    hi = d + math.sqrt(max((ub - pb) ** 2 - 2 * phi * (ub - pb) * (pa - la) + (pa - la) ** 2, 0.0))
    m = n10 + n01
    k = min(n10, n01)
    p_mc = min(1.0, 2.0 * sum(math.comb(m, i) for i in range(k + 1)) / 2.0 ** m) if m else 1.0
    return {"difference": d, "ci_low": max(-1.0, lo), "ci_high": min(1.0, hi),
            "discordant_a_only": n10, "discordant_b_only": n01, "mcnemar_p": p_mc}


def _load(cfg_path: str, seed: int | None) -> RunConfig:
    cfg = load_config(cfg_path)
    if seed is not None:
        if seed < 0:
            raise ConfigError(f"seed: --seed must be >= 0, got {seed}")
        cfg = replace(cfg, seed=seed)
    return cfg


def _out_dir(cfg: RunConfig, out: str | None) -> Path:
    return Path(out) if out else Path(cfg.output_dir)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(config_path: str, seed: int | None = None, out: str | None = None) -> int:
    cfg = _load(config_path, seed)
    out_dir = _out_dir(cfg, out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.yaml").write_text(dump_config(replace(cfg, output_dir=str(out_dir))))
    res = train(make_env(cfg), cfg.rl.hyper(), cfg.rl.total_steps, cfg.seed, out_dir,
                eval_env=make_env(cfg), record_wallclock=cfg.rl.record_wallclock)
    print(json.dumps({"steps": res.steps, "episodes": len(res.episode_returns),
                      "best_success": res.best_success, "output_dir": str(out_dir)}))
    return EXIT_OK


def cmd_eval(config_path: str, checkpoint: str, n_episodes: int, seed: int | None = None,
             out: str | None = None) -> dict:
    if n_episodes < 1:
        raise ConfigError(f"episodes: must be >= 1, got {n_episodes}")
    cfg = _load(config_path, seed)
    agent = load_agent(checkpoint, cfg.rl.hyper())
    env = make_env(cfg)
    _check_dims(agent, env)
    pol = residual_policy(agent)
    results = [rollout(env, pol, s) for s in episode_seeds(cfg.seed, n_episodes)]
    out_dir = _out_dir(cfg, out)
    write_episode_rows(out_dir / "eval_metrics.csv", results)
    summary = summarize(results)
    (out_dir / "eval_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_compare(config_path: str, checkpoint: str, n_episodes: int, seed: int | None = None,
                out: str | None = None) -> dict:
    if n_episodes < 1:
        raise ConfigError(f"episodes: must be >= 1, got {n_episodes}")
    cfg = _load(config_path, seed)
    agent = load_agent(checkpoint, cfg.rl.hyper())
    env = make_env(cfg)
    _check_dims(agent, env)
    seeds = episode_seeds(cfg.seed, n_episodes)
    nominal = [rollout(env, nominal_policy(env.act_dim), s) for s in seeds]
    resid = [rollout(env, residual_policy(agent), s) for s in seeds]
    out_dir = _out_dir(cfg, out)
    write_episode_rows(out_dir / "compare_nominal.csv", nominal)
    write_episode_rows(out_dir / "compare_residual.csv", resid)
    sn, sr = summarize(nominal), summarize(resid)
    report = {
        "episodes": n_episodes,
        "nominal": {**sn, "ci": wilson_interval(sn["insert_success"], n_episodes)},
        "residual": {**sr, "ci": wilson_interval(sr["insert_success"], n_episodes)},
        "paired": paired_difference([r.inserted for r in nominal], [r.inserted for r in resid]),
        "pairs_share_initial_pose": all(a.initial_pose == b.initial_pose for a, b in zip(nominal, resid)),
    }
    (out_dir / "compare_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def _check_dims(agent: Agent, env: AssemblyEnv) -> None:
    if agent.obs_dim != env.obs_dim or agent.act_dim != env.act_dim:
        raise BadCheckpoint(f"checkpoint dims (obs {agent.obs_dim}, act {agent.act_dim}) do not match "
                            f"environment (obs {env.obs_dim}, act {env.act_dim})")


def read_metrics(path) -> dict[str, list[float]]:
    """Parse a metrics CSV; raises ParseError naming the offending line."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ParseError(0, f"cannot read {path}: {exc.strerror}") from exc
    if not lines:
        raise ParseError(1, "empty file, expected a header row")
    header = lines[0].split(",")
    missing = [c for c in ("step", "return_dense", "return_sparse", "success_insert") if c not in header]
    if missing:
        raise ParseError(1, f"header lacks column(s) {', '.join(missing)}")
    cols: dict[str, list[float]] = {c: [] for c in header}
    last_step = -math.inf
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ParseError(no, f"expected {len(header)} fields, found {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise ParseError(no, f"non-numeric field ({exc})") from exc
        if not all(math.isfinite(v) for v in vals):
            raise ParseError(no, "non-finite field")
        step = vals[header.index("step")]
        if step < last_step:
            raise ParseError(no, "step is not monotone")
        last_step = step
        for c, v in zip(header, vals):
            cols[c].append(v)
    return cols


def window_mean(series: Sequence[float], window: int) -> list[float]:
    """Trailing window means over complete windows (length n - window + 1)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = [float(v) for v in series]
    out = []
    for i in range(len(x) - window + 1):
        chunk = x[i:i + window]
        # a constant window returns its value exactly rather than sum / n
        out.append(chunk[0] if min(chunk) == max(chunk) else math.fsum(chunk) / window)
    return out


def cmd_export_curves(metrics_path: str, window: int = 20, out: str | None = None) -> Path:
    cols = read_metrics(metrics_path)
    ret = [d + s for d, s in zip(cols["return_dense"], cols["return_sparse"])]
    r_s = window_mean(ret, window)
    s_s = window_mean(cols["success_insert"], window)
    steps = cols["step"][window - 1:] if r_s else []
    dest = Path(out) if out else Path(metrics_path).with_name(Path(metrics_path).stem + "_curves.csv")
    dest.parent.mkdir(parents=True, exist_ok=True)
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "return_smoothed", "success_rate_smoothed"])
        for st, r, s in zip(steps, r_s, s_s):
            w.writerow([int(st), repr(r), repr(s)])
    return dest


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"args: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="residskill", description="Residual skill learning for peg-in-hole assembly.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a residual policy")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")

    for name, hlp in (("eval", "evaluate a checkpoint"), ("compare", "nominal vs residual on matched seeds")):
        e = sub.add_parser(name, help=hlp)
        e.add_argument("--config", required=True)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--episodes", type=int, default=100)
        e.add_argument("--seed", type=int)
        e.add_argument("--out")

    x = sub.add_parser("export-curves", help="smooth a metrics file into plot data")
    x.add_argument("metrics")
    x.add_argument("--window", type=int, default=20)
    x.add_argument("--out")
    return p


def _fail(kind: str, msg: str, code: int) -> int:
    line = " ".join(str(msg).split())
    print(f"{ERROR_PREFIX}:{kind}: {line}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "train":
            return cmd_train(args.config, args.seed, args.out)
        if args.command == "eval":
            print(json.dumps(cmd_eval(args.config, args.checkpoint, args.episodes, args.seed, args.out)))
        elif args.command == "compare":
            print(json.dumps(cmd_compare(args.config, args.checkpoint, args.episodes, args.seed, args.out)))
        else:
            if args.window < 1:
                raise ConfigError(f"window: must be >= 1, got {args.window}")
            print(cmd_export_curves(args.metrics, args.window, args.out))
        return EXIT_OK
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except BadCheckpoint as exc:
        return _fail("checkpoint", exc, EXIT_CHECKPOINT)
    except ParseError as exc:
        return _fail("parse", exc, EXIT_RUNTIME)
    except TrainingDiverged as exc:
        where = f" (partial checkpoint {exc.checkpoint})" if exc.checkpoint else ""
        return _fail("diverged", f"{exc}{where}", EXIT_RUNTIME)
    except Exception as exc:  # noqa: BLE001 - every failure must exit with one line
        return _fail("runtime", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
