"""Learned drop-edge GNN actor (mean aggregation, GRU memories, sampled edge gates)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dvf.approx import layers as L
from dvf.approx import tape as T
from dvf.approx.tape import ParameterStore


@dataclass
class LdActorState:
    node_memory: object  # ndarray or Var, shape (n, d_x)
    edge_memory: object  # ndarray or Var, shape (m, d_e), or None


@dataclass
class ActorStep:
    actions: np.ndarray
    logp: object  # Var (n,) of output log-probabilities
    entropy: object  # Var (n,)
    active: np.ndarray  # (m,) bool over communication edges
    gate_probs: object  # Var (m,) or None
    gate_logp: object  # Var (m,) or None
    gate_entropy: object  # Var (m,) or None
    state: LdActorState
    embed: object
    power: object = None  # Var (n,) for the transmit-power head


class LdGnnActor:
    """Node embedding -> gated message passing -> GRU memories -> output head.

    ``gates`` selects the communication policy: ``"learned"`` samples each
    directed edge with a learned probability, ``"full"`` always sends and
    ``"none"`` never does. ``head`` is ``"bernoulli"`` (``bits`` independent
    bits), ``"categorical"`` (one candidate per agent, candidates carry
    ``cand_dim`` features) or ``"power"`` (a deterministic non-negative
    transmit power trained through the reward).
    """

    def __init__(self, obs_dim, head="bernoulli", bits=3, cand_dim=0, d_x=32, d_e=0, d_embed=32,
                 hidden=32, gates="full", power_scale=1.0, seed=0):
        if gates not in ("learned", "full", "none"):
            raise ValueError(f"unknown gate mode {gates!r}")
        self.config = dict(obs_dim=obs_dim, head=head, bits=bits, cand_dim=cand_dim, d_x=d_x, d_e=d_e,
                           d_embed=d_embed, hidden=hidden, gates=gates, power_scale=power_scale, seed=seed)
        self.store = ParameterStore(seed)
        s = self.store
        self.d_x, self.d_e, self.gates, self.head_kind = d_x, d_e, gates, head
        self.power_scale = power_scale
        self.embed = L.MLP(s, "embed", L.mlp_sizes(d_x + obs_dim, hidden, d_embed))
        self.gate = L.EdgeGate(s, "gate", d_embed, d_e, hidden) if gates == "learned" else None
        self.mp = L.MessagePass(s, "mp", d_embed, d_embed)
        self.gru_x = L.GRUCell(s, "gru_x", d_embed, d_x)
        self.gru_e = L.GRUCell(s, "gru_e", 2 * d_embed, d_e) if d_e else None
        if head == "bernoulli":
            self.head = L.BernoulliHead(s, "head", d_x, bits, hidden)
        elif head == "categorical":
            self.head = L.CategoricalHead(s, "head", d_x, cand_dim, hidden)
        elif head == "power":
            self.head = L.MLP(s, "head", L.mlp_sizes(d_x, hidden, 1))
        else:
            raise ValueError(f"unknown head {head!r}")

    def initial_state(self, n, n_edges=0):
        return LdActorState(np.zeros((n, self.d_x)), np.zeros((n_edges, self.d_e)) if self.d_e else None)

    def step(self, tape, state, obs, edges, rng, candidates=None, greedy=False):
        """One decision round on communication edges ``edges`` (``(m, 2)``, no self-loops)."""
        n = obs.shape[0]
        edges = np.asarray(edges, np.int64).reshape(-1, 2)
        X, E = state.node_memory, state.edge_memory
        embed = self.embed(tape, T.concat([X, obs]))
        gate_probs = gate_logp = gate_ent = None
        if self.gates == "full":
            active = np.ones(len(edges), dtype=bool)
        elif self.gates == "none":
            active = np.zeros(len(edges), dtype=bool)
        else:
            gate_probs = self.gate(tape, embed, edges[:, 0], E)
            if greedy:
                active = gate_probs.value > 0.5
            else:
                active, _ = L.sample_active_edges(gate_probs, rng)
            gate_logp = L.bernoulli_logp(gate_probs, active)
            gate_ent = L.bernoulli_entropy(gate_probs)
        sent = edges[active]
        Z = self.mp(tape, embed, sent[:, 0], sent[:, 1], n)
        X_next = self.gru_x(tape, Z, X)
        E_next = L.edge_memory_update(tape, self.gru_e, embed, edges, active, E) if self.d_e else None
        power = None
        if self.head_kind == "bernoulli":
            actions, logp, ent = self.head(tape, X_next, rng, greedy)
        elif self.head_kind == "categorical":
            owners, feats = candidates
            actions, logp, ent = self.head(tape, X_next, owners, feats, n, rng, greedy)
        else:
            power = T.mul(T.softplus(T.row_sum(self.head(tape, X_next))), self.power_scale)
            actions = power.value.copy()
            logp = T.Var(np.zeros(n), None)
            ent = T.Var(np.zeros(n), None)
        return ActorStep(actions, logp, ent, active, gate_probs, gate_logp, gate_ent,
                         LdActorState(X_next, E_next), embed, power)
