"""Finite-difference helpers shared by the learner tests and the acceptance suite."""

import numpy as np

from residskill.mlp import MLPParams, init_mlp, mlp_forward
from residskill.sac import Agent, SACHyper

H = 1e-5


def central_difference(loss, array: np.ndarray, idx) -> float:
    old = array[idx]
    array[idx] = old + H
    lp = loss()
    array[idx] = old - H
    lm = loss()
    array[idx] = old
    return (lp - lm) / (2 * H)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def small_agent(seed: int, obs_dim=5, act_dim=3, hidden=(16, 16)) -> Agent:
    ag = Agent(obs_dim, act_dim, SACHyper(hidden=hidden, batch=8, buffer_size=8), seed=seed)
    rng = np.random.default_rng(seed + 1)
    # move the actor output away from the near-zero initial scale and decorrelate targets
    for w in ag.actor.weights[-1:]:
        w += rng.normal(scale=0.3, size=w.shape)
    ag.log_alpha[0] = rng.normal(scale=0.5)
    for net in (ag.q1_targ, ag.q2_targ):
        for a in net.arrays():
            a += rng.normal(scale=0.05, size=a.shape)
    return ag


def random_batch(ag: Agent, n: int, rng: np.random.Generator):
    return (rng.normal(size=(n, ag.obs_dim)), rng.uniform(-0.9, 0.9, (n, ag.act_dim)),
            rng.normal(size=n), rng.normal(size=(n, ag.obs_dim)), (rng.uniform(size=n) < 0.3).astype(float))


def sample_coords(arrays, rng, k):
    out = []
    for _ in range(k):
        i = int(rng.integers(len(arrays)))
        out.append((i, tuple(int(rng.integers(s)) for s in arrays[i].shape)))
    return out


def actor_case(seed: int, k: int = 12) -> float:
    rng = np.random.default_rng(seed)
    ag = small_agent(seed)
    s = rng.normal(size=(8, ag.obs_dim))
    eps = rng.normal(size=(8, ag.act_dim))
    alpha = float(np.exp(rng.normal()))
    _, grads, _ = ag.actor_loss(s, eps, alpha)
    arrays = ag.actor.arrays()
    coords = sample_coords(arrays, rng, k)
    ana = np.array([grads[i][j] for i, j in coords])
    num = np.array([central_difference(lambda: ag.actor_loss(s, eps, alpha)[0], arrays[i], j) for i, j in coords])
    return relative_error(ana, num)


def critic_case(seed: int, k: int = 12) -> float:
    rng = np.random.default_rng(seed)
    ag = small_agent(seed)
    batch = random_batch(ag, 8, rng)
    y = ag.critic_target(batch, rng.normal(size=(8, ag.act_dim)), ag.alpha)
    _, grads = ag.critic_loss(batch, y)
    arrays = ag.q1.arrays() + ag.q2.arrays()
    coords = sample_coords(arrays, rng, k)
    ana = np.array([grads[i][j] for i, j in coords])
    num = np.array([central_difference(lambda: ag.critic_loss(batch, y)[0], arrays[i], j) for i, j in coords])
    return relative_error(ana, num)


def temperature_case(seed: int) -> float:
    rng = np.random.default_rng(seed)
    ag = small_agent(seed)
    s = rng.normal(size=(8, ag.obs_dim))
    logp = ag.sample_action(s, rng)[1]
    _, g = ag.temperature_loss(logp)
    num = central_difference(lambda: ag.temperature_loss(logp)[0], ag.log_alpha, (0,))
    return relative_error(np.array([g]), np.array([num]))


def mlp_case(seed: int, k: int = 12) -> float:
    from residskill.mlp import mlp_gradients
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(1, 7))] + [int(rng.integers(2, 9)) for _ in range(int(rng.integers(0, 3)))] + [
        int(rng.integers(1, 5))]
    p = init_mlp(sizes, rng)
    x = rng.normal(size=(6, sizes[0]))
    t = rng.normal(size=(6, sizes[-1]))

    def loss_fn(y, batch):
        return 0.5 * np.sum((y - t) ** 2), y - t

    grads = mlp_gradients(p, loss_fn, (x,))
    arrays = p.arrays()
    coords = sample_coords(arrays, rng, k)
    ana = np.array([grads[i][j] for i, j in coords])
    num = np.array([central_difference(lambda: loss_fn(mlp_forward(p, x), None)[0], arrays[i], j)
                    for i, j in coords])
    return relative_error(ana, num)
