"""Exact and Monte Carlo evaluation of global, local and diffusion values."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from dvf import kernels
from dvf.gmdp import rollout, stream


@dataclass
class ValueReport:
    dvf: np.ndarray
    dvf_stderr: np.ndarray
    global_value: float
    local: np.ndarray | None
    horizon: int
    tail_bound: float

    def to_json(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        return json.dumps(d, sort_keys=True)


def tail_bound(gamma, r_max, horizon):
    """Bound on the rewards dropped by truncating after ``horizon`` steps."""
    return gamma ** (horizon + 1) * r_max / (1.0 - gamma)


def horizon_for(gamma, r_max, target=1e-6):
    if r_max <= 0:
        return 1
    t = math.log(target * (1.0 - gamma) / r_max) / math.log(gamma) - 1.0
    return max(1, math.ceil(t))


# ---------------------------------------------------------------------------
# exact evaluation on enumerable chains


def _check_chain(P, R):
    P = np.asarray(P, float)
    R = np.asarray(R, float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError("transition matrix must be square")
    if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-12):
        raise ValueError("transition matrix must be row-stochastic")
    if R.shape[0] != P.shape[0] or not np.all(np.isfinite(R)):
        raise ValueError("rewards must be finite with one row per state")
    return P, R


def bellman_apply(P, R, op, V):
    """``(T V)(s) = Gamma (R(s) + sum_s' P(s, s') V(s'))`` for every state at once."""
    return op.apply_rows(R + P @ V)


def sup_l1(V):
    """``sup_S ||V(S)||_1``."""
    return float(np.abs(V).sum(axis=1).max())


def dvf_neumann_markov(P, R, op, horizon):
    """Truncated ``sum_{t<horizon} Gamma^{t+1} E[R^t]``, one row per start state."""
    P, R = _check_chain(P, R)
    V = np.zeros_like(R)
    for _ in range(horizon):
        V = op.apply_rows(R + P @ V)
    return V


def dvf_exact_markov(P, R, op, tol=1e-9, max_sweeps=100_000, history=False):
    """Diffusion value of every state of a Markov chain by fixed-point iteration.

    Stops once successive iterates differ by less than ``tol`` in
    ``sup_S ||.||_1`` and then checks the result against the truncated
    Neumann series. With ``history=True`` also returns the per-sweep
    differences.
    """
    P, R = _check_chain(P, R)
    if tol <= 0:
        raise ValueError("tol must be positive")
    V = np.zeros_like(R)
    diffs = []
    for _ in range(max_sweeps):
        nxt = bellman_apply(P, R, op, V)
        diffs.append(sup_l1(nxt - V))
        V = nxt
        if diffs[-1] < tol:
            break
    else:
        raise RuntimeError("fixed-point iteration did not converge")
    r_max = float(np.abs(R).sum(axis=1).max())
    g = op.gamma
    # the truncation error after T sweeps in sup-l1 is at most g^{T+1} r_max / (1 - g)
    horizon = horizon_for(g, r_max, target=tol) + 1
    neumann = dvf_neumann_markov(P, R, op, horizon)
    bound = tol * g / (1.0 - g) + tail_bound(g, r_max, horizon) + 1e-12 * max(1.0, r_max)
    if sup_l1(neumann - V) > 2 * bound + tol:
        raise RuntimeError("fixed point and Neumann series disagree")
    return (V, np.array(diffs)) if history else V


# ---------------------------------------------------------------------------
# Monte Carlo


def _episodes(env, policy, episodes, horizon, rng):
    if episodes < 1:
        raise ValueError("need at least one episode")
    seed_rng = rng if isinstance(rng, np.random.Generator) else stream(rng, "montecarlo")
    for _ in range(episodes):
        yield np.stack([tr.rewards for tr in rollout(env, policy, horizon, seed_rng.spawn(1)[0])])


def trajectory_dvf(op, rewards):
    """``sum_t Gamma^{t+1} R^t`` for one reward trajectory of shape ``(T, n)``."""
    return op.neumann(rewards)


def trajectory_global(gamma, rewards):
    """``sum_t gamma^{t+1} r^t`` with ``r^t`` the mean local reward."""
    r = np.asarray(rewards, float).mean(axis=1)
    return float(np.sum(gamma ** np.arange(1, len(r) + 1) * r))


def _mean_and_stderr(samples):
    samples = np.asarray(samples, float)
    mean = samples.mean(axis=0)
    if len(samples) < 2:
        return mean, np.zeros_like(mean)
    return mean, samples.std(axis=0, ddof=1) / math.sqrt(len(samples))


def dvf_monte_carlo(env, policy, op, episodes, horizon, rng):
    """Empirical diffusion value with per-agent standard errors."""
    samples = [trajectory_dvf(op, rw) for rw in _episodes(env, policy, episodes, horizon, rng)]
    return _mean_and_stderr(samples)


def global_value_monte_carlo(env, policy, gamma, episodes, horizon, rng):
    samples = [trajectory_global(gamma, rw) for rw in _episodes(env, policy, episodes, horizon, rng)]
    m, s = _mean_and_stderr(np.array(samples)[:, None])
    return float(m[0]), float(s[0])


def reach_masks(graph, horizon):
    """``masks[t, i, j]`` is true iff ``j`` is reachable from ``i`` within ``t+1`` hops."""
    step = graph.adjacency() > 0
    masks = np.zeros((horizon, graph.n, graph.n), dtype=bool)
    cur = step.copy()
    for t in range(horizon):
        masks[t] = cur
        cur = (cur.astype(np.int64) @ step.astype(np.int64)) > 0
    return masks


def trajectory_local(graph, gamma, rewards, masks=None):
    rewards = np.asarray(rewards, float)
    T = len(rewards)
    masks = reach_masks(graph, T) if masks is None else masks
    disc = gamma ** np.arange(1, T + 1)
    return np.einsum("t,tij,tj->i", disc, masks[:T], rewards) / graph.n


def local_value_monte_carlo(env, policy, graph, gamma, episodes, horizon, rng):
    """Empirical local value: rewards weighted by reachability within ``t+1`` hops."""
    masks = reach_masks(graph, horizon)
    samples = [trajectory_local(graph, gamma, rw, masks) for rw in _episodes(env, policy, episodes, horizon, rng)]
    return _mean_and_stderr(samples)


# ---------------------------------------------------------------------------
# property checks


def prop3_residual(op, rewards):
    """``|mean_i (sum_t Gamma^{t+1} R^t)_i - sum_t gamma^{t+1} r^t|`` on one trajectory."""
    return abs(float(trajectory_dvf(op, rewards).mean()) - trajectory_global(op.gamma, rewards))


def check_prop3(env, policy, op, episodes, horizon, rng, tol=1e-10):
    worst = 0.0
    for rw in _episodes(env, policy, episodes, horizon, rng):
        worst = max(worst, prop3_residual(op, rw))
    return worst < tol, worst


def random_chain(n_states, n_agents, rng, r_scale=1.0):
    P = rng.random((n_states, n_states)) + 1e-3
    P /= P.sum(axis=1, keepdims=True)
    R = r_scale * rng.uniform(-1.0, 1.0, size=(n_states, n_agents))
    return P, R


def check_contraction(op, trials, rng, n_states=4):
    """Largest observed ``||TV - TW|| / ||V - W||`` in the ``sup_S ||.||_1`` norm."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    worst = 0.0
    for _ in range(trials):
        P, R = random_chain(n_states, op.n, rng)
        V = rng.normal(size=(n_states, op.n)) * rng.uniform(0.1, 10.0)
        W = rng.normal(size=(n_states, op.n)) * rng.uniform(0.1, 10.0)
        denom = sup_l1(V - W)
        if denom == 0.0:
            continue
        worst = max(worst, sup_l1(bellman_apply(P, R, op, V) - bellman_apply(P, R, op, W)) / denom)
    return worst


def decay_excess(diffs, gamma, scale):
    """Worst ``diff[k+1] - gamma * diff[k]`` beyond a round-off allowance.

    Successive fixed-point differences shrink by at least ``gamma``; the
    allowance ``64 eps scale`` absorbs rounding once differences approach
    machine precision relative to the values (``scale``). Non-positive means
    the decay held at every sweep.
    """
    diffs = np.asarray(diffs, float)
    if diffs.size < 2:
        return 0.0
    slack = 64 * np.finfo(float).eps * max(1.0, scale)
    return float(np.max(diffs[1:] - gamma * diffs[:-1] - slack))


def divergence_demo(d, gamma, horizon):
    """Partial sums of the local value and the DVF on an infinite ``d``-regular tree with unit rewards."""
    if d < 2:
        raise ValueError("degree must be at least 2")
    local = kernels.local_partial_sums(d, gamma, horizon)
    t = np.arange(1, horizon + 1)
    dvf = gamma * (1.0 - gamma ** t) / (1.0 - gamma)
    return local, dvf


def dominates(u, v):
    """Componentwise ``u >= v`` with at least one strict inequality."""
    u, v = np.asarray(u), np.asarray(v)
    return bool(np.all(u >= v) and np.any(u > v))
