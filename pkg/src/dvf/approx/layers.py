"""Learnable building blocks: MLPs, edge gates, message passing, GRU cells, heads, critics.

Each block registers its parameters in a :class:`ParameterStore` at
construction and is evaluated against a :class:`Tape`, which supplies the
parameter values and records the computation.
"""
from __future__ import annotations

import numpy as np

from dvf.approx import tape as T

PROB_CLAMP = 1e-6


class Linear:
    def __init__(self, store, name, d_in, d_out, init="glorot"):
        self.w = store.add(f"{name}.w", (d_in, d_out), init)
        self.b = store.add(f"{name}.b", (d_out,), "zeros")

    def __call__(self, tape, x):
        return T.matmul(x, tape.param(self.w)) + tape.param(self.b)


class MLP:
    """Linear layers with ReLU between them; the last layer is affine."""

    def __init__(self, store, name, sizes):
        if len(sizes) < 2:
            raise ValueError("MLP needs input and output sizes")
        self.layers = [Linear(store, f"{name}.{k}", a, b) for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.d_in = sizes[0]

    def __call__(self, tape, x):
        xv = x.value if isinstance(x, T.Var) else np.asarray(x)
        if xv.shape[-1] != self.d_in:
            raise ValueError(f"expected input width {self.d_in}, got {xv.shape[-1]}")
        if np.isnan(xv).any():
            raise ValueError("NaN in MLP input")
        h = x
        for k, layer in enumerate(self.layers):
            h = layer(tape, h)
            if k < len(self.layers) - 1:
                h = T.relu(h)
        return h


def mlp_sizes(d_in, hidden, d_out, depth=2):
    return [d_in] + [hidden] * depth + [d_out]


# ---------------------------------------------------------------------------
# communication


class EdgeGate:
    """Per-edge send probability from the sender's embedding and edge memory."""

    def __init__(self, store, name, d_embed, d_edge, hidden):
        self.mlp = MLP(store, name, mlp_sizes(d_embed + d_edge, hidden, 1))
        self.d_edge = d_edge

    def __call__(self, tape, embed, senders, edge_memory=None):
        feats = T.take(embed, senders)
        if self.d_edge:
            feats = T.concat([feats, edge_memory])
        logits = T.row_sum(self.mlp(tape, feats))
        return gate_probabilities(logits)


def gate_probabilities(logits):
    """Sigmoid squashed into ``[1e-6, 1 - 1e-6]``."""
    return T.clip(T.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)


def sample_active_edges(probs, rng):
    """Independent Bernoulli draws; returns the active mask and per-edge log-probabilities."""
    p = np.asarray(probs.value if isinstance(probs, T.Var) else probs, float)
    active = rng.random(p.shape) < p
    logp = np.where(active, np.log(p), np.log1p(-p))
    return active, logp


def bernoulli_logp(probs, outcome):
    """Tape log-probability of a fixed Bernoulli outcome under ``probs``."""
    outcome = np.asarray(outcome, bool)
    return T.log(T.add(T.mul(probs, np.where(outcome, 1.0, -1.0)), np.where(outcome, 0.0, 1.0)))


def bernoulli_entropy(probs):
    q = T.add(T.neg(probs), 1.0)
    return T.neg(T.add(T.mul(probs, T.log(probs)), T.mul(q, T.log(q))))


class MessagePass:
    """``Z_i = W_self I_i + W_msg mean{I_j : (j, i) active} + b``."""

    def __init__(self, store, name, d_in, d_out):
        self.w_self = store.add(f"{name}.w_self", (d_in, d_out))
        self.w_msg = store.add(f"{name}.w_msg", (d_in, d_out))
        self.b = store.add(f"{name}.b", (d_out,), "zeros")

    def __call__(self, tape, embed, senders, receivers, n):
        msgs = T.segment_mean(T.take(embed, senders), receivers, n)
        return T.matmul(embed, tape.param(self.w_self)) + T.matmul(msgs, tape.param(self.w_msg)) + tape.param(self.b)


class GRUCell:
    """Two-gate recurrent cell.

    ``z = sig(x Wz + h Uz + bz)``, ``r = sig(x Wr + h Ur + br)``,
    ``c = tanh(x Wc + (r*h) Uc + bc)``, ``h' = (1 - z) h + z c``.
    """

    def __init__(self, store, name, d_in, d_hidden):
        self.p = {}
        for g in ("z", "r", "c"):
            self.p[f"W{g}"] = store.add(f"{name}.W{g}", (d_in, d_hidden))
            self.p[f"U{g}"] = store.add(f"{name}.U{g}", (d_hidden, d_hidden))
            self.p[f"b{g}"] = store.add(f"{name}.b{g}", (d_hidden,), "zeros")

    def __call__(self, tape, x, h):
        P = {k: tape.param(v) for k, v in self.p.items()}
        z = T.sigmoid(T.matmul(x, P["Wz"]) + T.matmul(h, P["Uz"]) + P["bz"])
        r = T.sigmoid(T.matmul(x, P["Wr"]) + T.matmul(h, P["Ur"]) + P["br"])
        c = T.tanh(T.matmul(x, P["Wc"]) + T.matmul(T.mul(r, h), P["Uc"]) + P["bc"])
        return h + T.mul(z, c - h)


def edge_memory_update(tape, cell, embed, edges, active, memory):
    """GRU update on active edges only; inactive edge memories are copied unchanged."""
    idx = np.flatnonzero(active)
    if idx.size == 0:
        return memory
    x = T.concat([T.take(embed, edges[idx, 0]), T.take(embed, edges[idx, 1])])
    new_rows = cell(tape, x, T.take(memory, idx))
    return T.scatter_rows(memory, idx, new_rows)


# ---------------------------------------------------------------------------
# output heads


class BernoulliHead:
    """``c`` independent bits per agent."""

    def __init__(self, store, name, d_in, bits, hidden):
        self.mlp = MLP(store, name, mlp_sizes(d_in, hidden, bits))
        self.bits = bits

    def __call__(self, tape, memory, rng, greedy=False):
        logits = self.mlp(tape, memory)
        probs = T.sigmoid(logits)
        p = probs.value
        y = (p > 0.5) if greedy else rng.random(p.shape) < p
        sign = np.where(y, 1.0, -1.0)
        logp = T.row_sum(T.log_sigmoid(T.mul(logits, sign)))
        # H(p) = softplus(l) - l * sigmoid(l)
        ent = T.row_sum(T.add(T.softplus(logits), T.neg(T.mul(logits, probs))))
        return y.astype(np.int64), logp, ent


class CategoricalHead:
    """One choice per agent among its candidates (e.g. a firefighter's homes).

    ``owners[k]`` is the agent that candidate ``k`` belongs to and
    ``features[k]`` describes the candidate.
    """

    def __init__(self, store, name, d_mem, d_feat, hidden):
        self.mlp = MLP(store, name, mlp_sizes(d_mem + d_feat, hidden, 1))

    def __call__(self, tape, memory, owners, features, n, rng, greedy=False):
        owners = np.asarray(owners, np.int64)
        counts = np.bincount(owners, minlength=n)
        if np.any(counts == 0):
            raise ValueError("categorical head over an empty support")
        logits = T.row_sum(self.mlp(tape, T.concat([T.take(memory, owners), features])))
        logp_all = T.segment_log_softmax(logits, owners, n)
        p = np.exp(logp_all.value)
        if greedy:
            score = p
        else:
            # Gumbel-max gives one exact categorical draw per agent
            score = logp_all.value - np.log(-np.log(rng.random(p.shape)))
        order = np.lexsort((-score, owners))
        first = np.searchsorted(owners[order], np.arange(n))
        choice = order[first]
        logp = T.take(logp_all, choice)
        ent = T.neg(T.segment_sum(T.mul(T.exp(logp_all), logp_all), owners, n))
        return choice, logp, ent


def categorical_entropy(logits):
    """Entropy of a single softmax distribution (test helper)."""
    z = logits - logits.max()
    p = np.exp(z) / np.exp(z).sum()
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# critics


class GnnCritic:
    """Mean-aggregation critic over the symmetrised influence graph.

    ``layers`` message-passing rounds set the receptive field; zero rounds
    gives a purely local critic. With ``pooled`` the node states are averaged
    per graph instance and a single value per instance is returned.
    """

    def __init__(self, store, name, d_in, hidden, layers=2, pooled=False):
        self.enc = MLP(store, f"{name}.enc", [d_in, hidden, hidden])
        self.rounds = [MessagePass(store, f"{name}.mp{k}", hidden, hidden) for k in range(layers)]
        self.head = MLP(store, f"{name}.head", [hidden, hidden, 1])
        self.pooled = pooled

    def __call__(self, tape, x, graph):
        indptr, indices = graph.undirected()
        receivers = np.repeat(np.arange(graph.n), np.diff(indptr))
        h = T.relu(self.enc(tape, x))
        for mp in self.rounds:
            h = T.relu(mp(tape, h, indices, receivers, graph.n))
        if self.pooled:
            h = T.segment_mean(h, graph.instance, graph.num_instances)
        return T.row_sum(self.head(tape, h))


class EdgeCritic:
    """Per edge-agent value ``MLP(X_i, E_ij, X_j)``."""

    def __init__(self, store, name, d_node, d_edge, hidden):
        self.mlp = MLP(store, name, mlp_sizes(2 * d_node + d_edge, hidden, 1))

    def __call__(self, tape, node_feats, edge_feats, agent_edges):
        parts = [T.take(node_feats, agent_edges[:, 0])]
        if edge_feats is not None:
            parts.append(edge_feats)
        parts.append(T.take(node_feats, agent_edges[:, 1]))
        return T.row_sum(self.mlp(tape, T.concat(parts)))


class TabularCritic:
    """One free value per (state, agent)."""

    def __init__(self, store, name, n_states, n_agents):
        self.table = store.add(f"{name}.table", (n_states, n_agents), "zeros")

    def __call__(self, tape, state, graph=None):
        return T.take(tape.param(self.table), int(state))
