"""Transmit power control: bounded random walks, interference, service quality and the edge GMDP."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dvf import kernels
from dvf.approx import tape as T
from dvf.gmdp import StepResult
from dvf.graph import edge_transform

LN2 = np.log(2.0)


def bgrw_step(x, x_min, x_max, sigma, rng):
    """One step of a bounded Gaussian random walk: ``clip(x + sigma * N(0, 1))``."""
    if not x_min < x_max:
        raise ValueError("degenerate interval")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.asarray(x, float)
    return np.clip(x + sigma * rng.standard_normal(x.shape), x_min, x_max)


def bgrw_normalise(x, x_min, x_max):
    """``(2x - x_max - x_min) / (4 sqrt(3) (x_max - x_min))``."""
    if not x_min < x_max:
        raise ValueError("degenerate interval")
    return (2.0 * np.asarray(x, float) - x_max - x_min) / (4.0 * np.sqrt(3.0) * (x_max - x_min))


def quality(c, alpha, beta):
    """User sigmoid ``(1 - exp(-c/beta)) / (1 + exp((alpha - c)/beta))``, in ``[0, 1)``."""
    c = np.asarray(c, float)
    return -np.expm1(-c / beta) / (1.0 + np.exp((alpha - c) / beta))


@dataclass
class RadioParams:
    alpha: tuple = (0.5, 2.0)
    beta: tuple = (0.2, 1.0)
    gain: tuple = (0.2, 1.0)  # received-to-transmitted ratio l
    sigma: float = 0.05
    noise: float = 0.05  # N0
    base_power: float = 0.1  # p0
    p_m: float = 0.01
    channel_scale: float = 1e-5  # multiplies (d + 0.1)^-5 so that H lies in (0, 1]
    mode: str = "sq"


class RadioEnv:
    """Node-level transmit power control on a geometric graph.

    Actions are ``(Y, msgs)``: transmit powers and per-node message counts.
    Interference uses the powers of the current step, ``I = H p + N0``; the
    observation carries the previous step's interference. Observation of node
    ``i`` (width 4): normalised ``alpha``, ``beta``, ``l`` and
    ``log10(I^{t-1} / N0) / 3``.
    """

    obs_dim = 4

    def __init__(self, graph, params=None):
        if graph.channel is None:
            raise ValueError("radio environment needs a graph with channel gains")
        self.params = params or RadioParams()
        if self.params.mode not in ("sq", "ee"):
            raise ValueError(f"unknown mode {self.params.mode!r}")
        h = graph.channel * self.params.channel_scale
        if not np.all(np.isfinite(h)) or np.any(h < 0):
            raise ValueError("channel gains must be finite and non-negative")
        self.graph = graph
        self.n = graph.n
        self.H = (graph.out_indptr, graph.out_indices, h)
        self.alpha = self.beta = self.gain = np.zeros(self.n)
        self.interference = np.full(self.n, self.params.noise)

    def reset(self, rng):
        P = self.params
        self.alpha = rng.uniform(*P.alpha, size=self.n)
        self.beta = rng.uniform(*P.beta, size=self.n)
        self.gain = rng.uniform(*P.gain, size=self.n)
        self.interference = np.full(self.n, P.noise)
        return self.observations()

    def observations(self):
        P = self.params
        return np.stack([
            bgrw_normalise(self.alpha, *P.alpha),
            bgrw_normalise(self.beta, *P.beta),
            bgrw_normalise(self.gain, *P.gain),
            np.log10(self.interference / P.noise) / 3.0,
        ], axis=1)

    def observe(self, i):
        return self.observations()[i]

    def powers(self, Y, msgs):
        return np.asarray(Y, float) + self.params.p_m * np.asarray(msgs, float) + self.params.base_power

    def evaluate(self, Y, msgs):
        """Per-node rewards and the interference they were computed under."""
        Y = np.asarray(Y, float)
        if np.any(Y < 0):
            raise ValueError("transmit power must be non-negative")
        p = self.powers(Y, msgs)
        interference = kernels.csr_matmat(*self.H, p) + self.params.noise
        cap = np.log2(1.0 + self.gain * Y / interference)
        q = quality(cap, self.alpha, self.beta)
        rewards = q if self.params.mode == "sq" else q / p
        return rewards, interference

    def tape_rewards(self, Y, msgs):
        """:meth:`evaluate` as tape operations so gradients reach ``Y``."""
        P = self.params
        p = T.add(Y, P.p_m * np.asarray(msgs, float) + P.base_power)
        interference = T.add(T.csr_matvec(*self.H, p), P.noise)
        cap = T.mul(T.log(T.add(T.div(T.mul(Y, self.gain), interference), 1.0)), 1.0 / LN2)
        num = T.neg(T.add(T.exp(T.mul(cap, -1.0 / self.beta)), -1.0))
        den = T.add(T.exp(T.mul(T.add(T.neg(cap), self.alpha), 1.0 / self.beta)), 1.0)
        q = T.div(num, den)
        return q if P.mode == "sq" else T.div(q, p)

    def step(self, actions, rng):
        Y, msgs = actions
        rewards, self.interference = self.evaluate(Y, msgs)
        P = self.params
        self.alpha = bgrw_step(self.alpha, *P.alpha, P.sigma, rng)
        self.beta = bgrw_step(self.beta, *P.beta, P.sigma, rng)
        self.gain = bgrw_step(self.gain, *P.gain, P.sigma, rng)
        info = {"global_reward": float(rewards.mean()), "messages": float(np.sum(msgs))}
        return StepResult(rewards, self.observations(), False, info)


def message_counts(edges, active, n):
    """Messages sent per node: active directed edges grouped by tail."""
    edges = np.asarray(edges, np.int64).reshape(-1, 2)
    return np.bincount(edges[np.asarray(active, bool), 0], minlength=n).astype(float)


def smooth_rewards(graph, rewards):
    """``U = A D^-1 R`` over the self-connected node graph."""
    indptr, indices, data = graph.column_normalized()
    return kernels.csc_matmat(indptr, indices, data, np.asarray(rewards, float), graph.n)


def edge_rewards(graph, edge_graph, rewards):
    """``R_(i,j) = U_i / |N_i|``; every node owns at least one (possibly padded) edge agent."""
    u = smooth_rewards(graph, rewards)
    tails = edge_graph.agent_edges[:, 0]
    owned = np.bincount(tails, minlength=graph.n).astype(float)
    if np.any(owned == 0):
        raise ValueError("every node needs an edge agent; build the edge graph with pad_sinks=True")
    return u[tails] / owned[tails]


class EdgeRadioEnv:
    """Edge GMDP over a radio environment: each communication edge decides whether to pass.

    Node powers ``Y`` follow their own bounded random walks in ``y_range``
    and do not react to messages. Nodes without outgoing edges get a padding
    agent ``(i, i)`` whose action is ignored. Observation of edge ``(i, j)``
    (width 9): both endpoint observations and the padding flag.
    """

    obs_dim = 2 * RadioEnv.obs_dim + 1

    def __init__(self, radio, y_range=(0.1, 1.0), y_sigma=0.05):
        self.radio = radio
        self.edge_graph = edge_transform(radio.graph, pad_sinks=True)
        self.graph = self.edge_graph.influence_graph()
        # one block per radio instance
        self.graph.instance = radio.graph.instance[self.edge_graph.agent_edges[:, 0]]
        self.n = self.edge_graph.n_agents
        self.y_range = y_range
        self.y_sigma = y_sigma
        self.Y = np.zeros(radio.n)

    def reset(self, rng):
        self.radio.reset(rng)
        self.Y = rng.uniform(*self.y_range, size=self.radio.n)
        return self.observations()

    def observations(self):
        node = self.radio.observations()
        e = self.edge_graph.agent_edges
        return np.concatenate([node[e[:, 0]], node[e[:, 1]], self.edge_graph.padded[:, None].astype(float)], axis=1)

    def observe(self, i):
        return self.observations()[i]

    def step(self, passes, rng):
        passes = np.asarray(passes).reshape(self.n).astype(bool) & ~self.edge_graph.padded
        msgs = message_counts(self.edge_graph.agent_edges, passes, self.radio.n)
        res = self.radio.step((self.Y, msgs), rng)
        self.Y = bgrw_step(self.Y, *self.y_range, self.y_sigma, rng)
        rewards = edge_rewards(self.radio.graph, self.edge_graph, res.rewards)
        info = dict(res.info, node_rewards=res.rewards, global_reward=float(rewards.mean()))
        return StepResult(rewards, self.observations(), False, info)

