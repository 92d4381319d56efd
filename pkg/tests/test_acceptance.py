"""Acceptance suite: one test per criterion.

Each test records a PASS/FAIL line through the ``report`` fixture; the
lines are printed together in an "acceptance criteria" section at the end
of the pytest run.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from gradcheck import actor_case, critic_case, temperature_case
from residskill import controller as ctl
from residskill.cli import cmd_compare, main
from residskill.config import load_config
from residskill.contact import (ContactParams, ContactSim, PegHoleGeometry, contact_forces, contact_query,
                                peg_sample_points, penetration, to_world)
from residskill.env import (ACTION_DIM, AssemblyConfig, AssemblyEnv, RewardWeights, dense_reward,
                            sparse_reward)
from residskill.sac import PointMass1D, SACHyper, train
from residskill.se3 import Pose6
from test_env import nominal_only_poses

ROOT = Path(__file__).resolve().parents[1]
TRAINED = ROOT / "artifacts" / "residual" / "best.ckpt"
TRAIN_CONFIG = ROOT / "configs" / "residual.yaml"


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


# 1 --------------------------------------------------------------------------

def test_criterion_01_controller_algebra(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_pd = worst_pi = 0.0
    gains_exact = True
    for _ in range(1000):
        kp_x, kp_f = rng.uniform(0, 500, 6), rng.uniform(0, 50, 6)
        g = ctl.derive_gains(kp_x, kp_f)
        gains_exact &= bool(np.all(g.kd_x == 2.0 * np.sqrt(kp_x)) and np.all(g.ki_f == 0.01 * kp_f))
        xe, xd, fe = rng.normal(size=6), rng.normal(size=6), rng.normal(size=6)
        integ = ctl.ForceIntegral(rng.normal(size=6), np.full(6, 10.0))
        pd = ctl.nominal_command(xe, xd, fe, integ, ctl.SelectionMatrix(np.zeros(6)), g)
        pi = ctl.nominal_command(xe, xd, fe, integ, ctl.SelectionMatrix(np.ones(6)), g)
        pd_ref = [kp_x[i] * xe[i] + 2.0 * math.sqrt(kp_x[i]) * xd[i] for i in range(6)]
        pi_ref = [kp_f[i] * fe[i] + 0.01 * kp_f[i] * integ.accum[i] for i in range(6)]
        worst_pd = max(worst_pd, rel_err(pd, pd_ref))
        worst_pi = max(worst_pi, rel_err(pi, pi_ref))
    dt = time.perf_counter() - t0
    ok = worst_pd < 1e-12 and worst_pi < 1e-12 and gains_exact and dt < 1.0
    report(1, ok, f"max rel err PD {worst_pd:.2e}, PI {worst_pi:.2e} (< 1e-12); "
                  f"gain relations exact: {gains_exact}; {dt:.2f} s (< 1 s)")


# 2 --------------------------------------------------------------------------

def test_criterion_02_residual_off_bitwise(report):
    t0 = time.perf_counter()
    cfg = AssemblyConfig()
    total, mismatches, seed = 0, 0, 100
    while total < 1000:
        env = AssemblyEnv(cfg)
        env.reset(seed=seed)
        poses = []
        while not env.done and total + len(poses) < 1000:
            env.step(np.zeros(ACTION_DIM))
            poses.append(env.pose.copy())
        ref = nominal_only_poses(cfg, seed, len(poses))[cfg.env.n_inner - 1::cfg.env.n_inner]
        mismatches += sum(not np.array_equal(a, b) for a, b in zip(poses, ref))
        mismatches += abs(len(ref) - len(poses))
        total += len(poses)
        seed += 1
    dt = time.perf_counter() - t0
    report(2, mismatches == 0 and dt < 10.0,
           f"{total} policy steps over {seed - 100} episodes, {mismatches} non-identical poses; {dt:.2f} s (< 10 s)")


# 3 --------------------------------------------------------------------------

def test_criterion_03_rewards(report):
    wt = RewardWeights()
    sparse_ok = (sparse_reward(True, False, False) == 500.0 and sparse_reward(False, True, False) == 50.0
                 and sparse_reward(False, False, True) == -80.0 and sparse_reward(False, False, False) == 0.0)
    w_ok = tuple(wt.w) == (-5.0, -0.001, -0.005)
    rng = np.random.default_rng(3)
    worst, max_r = 0.0, -math.inf
    for _ in range(1000):
        xe, xd, fe = (rng.normal(scale=s, size=6) for s in (0.01, 0.1, 10.0))
        # oracle: w . (|Xe|, |Xdot|, |Fe|) with each norm over the full 6-vector
        norms = [math.sqrt(math.fsum(v * v for v in blk)) for blk in (xe, xd, fe)]
        oracle = math.fsum(a * b for a, b in zip((-5.0, -0.001, -0.005), norms))
        r = dense_reward(xe, xd, fe, wt)
        worst = max(worst, abs(r - oracle) / max(abs(oracle), 1e-300))
        max_r = max(max_r, r)
    ok = sparse_ok and w_ok and worst < 1e-12 and max_r <= 0.0
    report(3, ok, f"sparse 500/50/-80 exact: {sparse_ok}; w = {tuple(wt.w)}; dense max rel err {worst:.2e} "
                  f"(< 1e-12); max dense reward {max_r:.3e} (<= 0)")


# 4 --------------------------------------------------------------------------

def _boundary_samples(p, r, geom, per_side=41):
    """Grid samples of the hole-block surface within the cube |q - p|_inf <= r.

    Faces: top plane outside the opening, four cavity walls, cavity floor.
    At most 6 * 41^2 (about 1e4) points per query point.
    """
    a, D = geom.hole_side / 2, geom.hole_depth
    x, y, z = p

    def grid(lo1, hi1, lo2, hi2):
        u, v = np.meshgrid(np.linspace(lo1, hi1, per_side), np.linspace(lo2, hi2, per_side))
        return u.ravel(), v.ravel()

    out = []
    if abs(z) <= r:
        u, v = grid(x - r, x + r, y - r, y + r)
        keep = ~((np.abs(u) < a) & (np.abs(v) < a))
        out.append(np.stack([u[keep], v[keep], np.zeros(keep.sum())], 1))
    zlo, zhi = max(z - r, -D), min(z + r, 0.0)
    for s in (-a, a):
        if abs(x - s) <= r and max(y - r, -a) <= min(y + r, a) and zlo <= zhi:
            u, v = grid(max(y - r, -a), min(y + r, a), zlo, zhi)
            out.append(np.stack([np.full(u.size, s), u, v], 1))
        if abs(y - s) <= r and max(x - r, -a) <= min(x + r, a) and zlo <= zhi:
            u, v = grid(max(x - r, -a), min(x + r, a), zlo, zhi)
            out.append(np.stack([u, np.full(u.size, s), v], 1))
    if abs(z + D) <= r and max(x - r, -a) <= min(x + r, a) and max(y - r, -a) <= min(y + r, a):
        u, v = grid(max(x - r, -a), min(x + r, a), max(y - r, -a), min(y + r, a))
        out.append(np.stack([u, v, np.full(u.size, -D)], 1))
    return np.vstack(out) if out else np.zeros((0, 3))


def _in_solid(w, geom):
    a, D = geom.hole_side / 2, geom.hole_depth
    x, y, z = w.T
    return (z < 0) & ~((np.abs(x) <= a) & (np.abs(y) <= a) & (z >= -D))


def test_criterion_04_contact_physics(report):
    t0 = time.perf_counter()
    geom, prm = PegHoleGeometry(), ContactParams(mu=0.2)
    rng = np.random.default_rng(4)

    # friction cone over 1e4 random contact states
    cone_worst = -math.inf
    for _ in range(10_000):
        n = int(rng.integers(1, 9))
        nrm = rng.normal(size=(n, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        fn, ft, _ = contact_forces(rng.normal(size=(n, 3)) * 0.01, nrm, rng.uniform(0, 5e-3, n),
                                   rng.normal(size=6) * 0.05, np.zeros(3), prm)
        cone_worst = max(cone_worst, float(np.max(np.linalg.norm(ft, axis=1) - 0.2 * fn)))
    cone_ok = cone_worst <= 1e-9

    # penetration bound over 1e4 random rollout steps of the simulator
    sim, bound = ContactSim(geom, prm), prm.f_cap / prm.k_n + 1e-6
    local = peg_sample_points(geom, prm.edge_samples)
    cmd_hi = np.array([0.05, 0.05, 0.05, 0.5, 0.5, 0.5])
    pen_worst, steps = 0.0, 0
    while steps < 10_000:
        pose = np.concatenate([rng.uniform(-0.002, 0.002, 2), rng.uniform(-0.003, 0.003, 1),
                               rng.uniform(-0.15, 0.15, 3)])
        pose = sim.step_array(pose, np.zeros(6), 0.002)[0]
        cmd = rng.uniform(-cmd_hi, cmd_hi)
        for _ in range(100):
            if rng.uniform() < 0.1:
                cmd = rng.uniform(-cmd_hi, cmd_hi)
            pose = sim.step_array(pose, cmd, 0.002)[0]
            pen_worst = max(pen_worst, float(penetration(to_world(pose, local), geom)[0].max()))
            steps += 1
    pen_ok = pen_worst <= bound

    # contact_query vs the dense boundary-sampling oracle on 100 random poses
    depth_worst, n_contacts, set_ok = 0.0, 0, True
    for _ in range(100):
        p = np.concatenate([rng.uniform(-0.003, 0.003, 2), rng.uniform(-0.005, 0.0, 1),
                            rng.uniform(-0.15, 0.15, 2), rng.uniform(-0.05, 0.05, 1)])
        cs = contact_query(Pose6.from_array(p), geom, edge_samples=prm.edge_samples)
        set_ok &= int(_in_solid(to_world(p, local), geom).sum()) == len(cs)
        for c in cs:
            pts = _boundary_samples(c.point, 1.5 * c.depth + 1e-6, geom)
            d = float(np.sqrt(((pts - c.point) ** 2).sum(axis=1)).min()) if len(pts) else math.inf
            depth_worst = max(depth_worst, abs(d - c.depth))
            n_contacts += 1
    oracle_ok = set_ok and depth_worst < 1e-5
    dt = time.perf_counter() - t0
    report(4, cone_ok and pen_ok and oracle_ok and dt < 60.0,
           f"cone: max(|ft| - 0.2 fn) = {cone_worst:.2e} (<= 1e-9); penetration max {pen_worst:.3e} m over "
           f"{steps} steps (<= {bound:.6e}); oracle depth err {depth_worst:.2e} m over {n_contacts} contacts "
           f"(< 1e-5), contact sets agree: {set_ok}; {dt:.1f} s (< 60 s)")


# 5 --------------------------------------------------------------------------

def test_criterion_05_skill_semantics(report):
    t0 = time.perf_counter()
    code = pytest.main(["-q", "-p", "no:cacheprovider", str(ROOT / "tests" / "test_skills.py")])
    dt = time.perf_counter() - t0
    report(5, code == 0 and dt < 5.0, f"skill unit suite exit code {int(code)}; {dt:.2f} s (< 5 s)")


# 6 --------------------------------------------------------------------------

def test_criterion_06_gradients(report):
    t0 = time.perf_counter()
    errs = {name: max(fn(1000 * k + i) for i in range(64))
            for k, (name, fn) in enumerate((("actor", actor_case), ("critic", critic_case),
                                            ("temperature", temperature_case)))}
    dt = time.perf_counter() - t0
    ok = all(e < 1e-4 for e in errs.values()) and dt < 60.0
    report(6, ok, ", ".join(f"{k} {v:.2e}" for k, v in errs.items()) + f" (< 1e-4, 64 cases each); {dt:.1f} s (< 60 s)")


# 7 --------------------------------------------------------------------------

def test_criterion_07_toy_learning(report):
    t0 = time.perf_counter()
    hyper = SACHyper(lr=1e-4, batch=400, hidden=(32, 32), target_entropy=-1.0, warmup=1000,
                     buffer_size=100_000, eval_every=0)
    res = train(PointMass1D(), hyper, 20_000, seed=0)
    first, last = np.mean(res.episode_returns[:50]), np.mean(res.episode_returns[-50:])
    dt = time.perf_counter() - t0
    report(7, last >= 3.0 * first and dt < 300.0,
           f"mean return first 50 episodes {first:.2f}, last 50 {last:.2f}, ratio {last / first:.2f} (>= 3); "
           f"{len(res.episode_returns)} episodes in 2e4 steps; {dt:.0f} s (< 300 s)")


# 8 --------------------------------------------------------------------------

def test_criterion_08_residual_beats_nominal(report, tmp_path):
    if not TRAINED.exists():
        report(8, False, f"no trained checkpoint at {TRAINED}")
    cfg = load_config(TRAIN_CONFIG, environ={})
    geom = cfg.sim.geometry()
    setup_ok = (abs(geom.clearance - 0.001) < 1e-12 and cfg.sim.mu == 0.2
                and (cfg.sim.init.incline_lo, cfg.sim.init.incline_hi) == (0.1, 0.15))
    rep = cmd_compare(str(TRAIN_CONFIG), str(TRAINED), 100, seed=1, out=str(tmp_path))
    nom, res = rep["nominal"]["insert_success"], rep["residual"]["insert_success"]
    margin = 100.0 * rep["paired"]["difference"]
    wall = ""
    metrics = TRAINED.parent / "metrics.csv"
    if metrics.exists():
        last = metrics.read_text().splitlines()[-1].split(",")
        wall = f"; training wallclock {float(last[-1]) / 3600:.2f} h at step {last[0]}"
    ok = setup_ok and rep["pairs_share_initial_pose"] and margin >= 20.0
    report(8, ok, f"nominal {nom}/100, residual {res}/100, difference {margin:+.0f} points (>= +20), "
                  f"95% CI [{100 * rep['paired']['ci_low']:.0f}, {100 * rep['paired']['ci_high']:.0f}], "
                  f"McNemar p {rep['paired']['mcnemar_p']:.2g}{wall}")


# 9 --------------------------------------------------------------------------

def test_criterion_09_nominal_floor(report):
    env = AssemblyEnv(AssemblyConfig(), misaligned=False, goal_noise=False)
    ok_count, times = 0, []
    for seed in range(100):
        env.reset(seed=seed)
        while not env.done:
            _, _, _, info = env.step(np.zeros(ACTION_DIM))
        if info["inserted"] and info["sim_time"] <= 10.0:
            ok_count += 1
            times.append(info["sim_time"])
    detail = f"{ok_count}/100 inserted within 10 s (>= 95)"
    if times:
        detail += f"; completion time mean {np.mean(times):.2f} s, max {np.max(times):.2f} s"
    report(9, ok_count >= 95, detail)


# 10 -------------------------------------------------------------------------

FAST = """
skill: {timeout: 1.5}
env: {timeout: 1.5}
rl: {hidden: [16, 16], batch: 32, buffer_size: 1000, warmup: 50, eval_every: 100, n_eval: 2, total_steps: 250}
seed: 5
"""


def _snapshot(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_criterion_10_reproducibility(report, tmp_path):
    cfg = tmp_path / "fast.yaml"
    cfg.write_text(FAST)
    snaps = []
    for run in range(2):
        out = tmp_path / "run"
        codes = [
            main(["train", "--config", str(cfg), "--out", str(out / "train")]),
            main(["eval", "--config", str(cfg), "--checkpoint", str(out / "train" / "latest.ckpt"),
                  "--episodes", "3", "--out", str(out / "eval")]),
            main(["compare", "--config", str(cfg), "--checkpoint", str(out / "train" / "latest.ckpt"),
                  "--episodes", "3", "--out", str(out / "compare")]),
            main(["export-curves", str(out / "train" / "metrics.csv"), "--window", "2",
                  "--out", str(out / "curves.csv")]),
        ]
        snaps.append((codes, _snapshot(out)))
        if run == 0:
            import shutil
            shutil.rmtree(out)
    (c1, s1), (c2, s2) = snaps
    differing = sorted(k for k in set(s1) | set(s2) if s1.get(k) != s2.get(k))
    ok = c1 == c2 == [0, 0, 0, 0] and not differing and len(s1) >= 10
    report(10, ok, f"exit codes {c1} / {c2}; {len(s1)} output files compared, differing: {differing or 'none'}")
