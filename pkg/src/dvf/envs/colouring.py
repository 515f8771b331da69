"""Vector graph colouring and the greedy threshold baseline."""
from __future__ import annotations

import numpy as np

from dvf.gmdp import StepResult


def _neighbour_sum(graph, Y):
    indptr, indices = graph.undirected()
    rows = np.repeat(np.arange(graph.n), np.diff(indptr))
    out = np.zeros(Y.shape, dtype=float)
    np.add.at(out, rows, Y[indices])
    return out


def colour_reward(Y, graph, p_m):
    """``R_i = <Y_i, Y_i> - p_m sum_{j in N_i} <Y_i, Y_j>`` with ``N_i`` excluding ``i``."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if not np.all((Y == 0) | (Y == 1)):
        raise ValueError("colour vectors must be binary")
    own = (Y * Y).sum(axis=1)
    conflict = (Y * _neighbour_sum(graph, Y)).sum(axis=1)
    return own - p_m * conflict


def greedy_colour_step(Y_prev, graph, p_m, rng):
    """Threshold rule for the binary formulation.

    Each node is active with probability 1/2; active nodes set ``Y_i = 1``
    iff ``2 p_m sum_{j in N_i} Y_j < 1`` and inactive nodes keep their value.
    """
    Y_prev = np.asarray(Y_prev, dtype=np.int64).reshape(graph.n)
    active = rng.random(graph.n) < 0.5
    want = (2.0 * p_m * _neighbour_sum(graph, Y_prev.astype(float)) < 1.0).astype(np.int64)
    return np.where(active, want, Y_prev)


def brute_force_optimum(graph, c, p_m):
    """Best global reward by enumeration.

    The reward is a sum of independent per-colour terms, so the optimum is
    ``c`` times the best binary colouring, found over all ``2^n`` vectors.
    """
    n = graph.n
    if n > 20:
        raise ValueError("instance too large to enumerate")
    codes = np.arange(2 ** n)
    bits = ((codes[:, None] >> np.arange(n)) & 1).astype(float)
    indptr, indices = graph.undirected()
    rows = np.repeat(np.arange(n), np.diff(indptr))
    conflict = (bits[:, rows] * bits[:, indices]).sum(axis=1)
    return float(c * (bits.sum(axis=1) - p_m * conflict).max() / n)


class ColourEnv:
    """Nodes repeatedly choose ``c``-bit colour vectors; messages always flow.

    Observation of node ``i`` (width ``c + 2``): a private uniform draw
    ``O_i`` fixed for the episode, the node's previous colour vector, and its
    degree over 10.
    """

    def __init__(self, graph, c=3, p_m=0.4):
        self.graph = graph
        self.n = graph.n
        self.c = int(c)
        self.p_m = float(p_m)
        self.obs_dim = self.c + 2
        indptr, _ = graph.undirected()
        self.degree = np.diff(indptr).astype(float)
        self.O = np.zeros(self.n)
        self.Y = np.zeros((self.n, self.c), dtype=np.int64)

    def reset(self, rng):
        self.O = rng.random(self.n)
        self.Y = np.zeros((self.n, self.c), dtype=np.int64)
        return self.observations()

    def observations(self):
        return np.concatenate([self.O[:, None], self.Y.astype(float), self.degree[:, None] / 10.0], axis=1)

    def observe(self, i):
        return self.observations()[i]

    def step(self, Y, rng=None):
        Y = np.asarray(Y, dtype=np.int64).reshape(self.n, self.c)
        rewards = colour_reward(Y, self.graph, self.p_m)
        self.Y = Y
        return StepResult(rewards, self.observations(), False, {"global_reward": float(rewards.mean())})
