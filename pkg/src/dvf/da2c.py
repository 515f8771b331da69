"""Diffusion TD learning, diffusion advantages and the single-loop actor-critic trainer.

The same loop trains the baselines; they differ only in the critic target:

* ``DVF``: ``Gamma [R + v']`` per agent (diffusion TD error)
* ``IA2C``: ``R_i + gamma v'_i``
* ``NA2C``: ``sum_{j in out(i)} R_j + gamma v'_i``
* ``MAA2C``: ``r + gamma v'`` with one value per graph instance, broadcast to its agents
* ``REIN``: no critic; the truncated discounted global return is the advantage
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from dvf import kernels
from dvf.approx import layers as L
from dvf.approx import tape as T
from dvf.approx.actor import LdGnnActor
from dvf.approx.tape import ParameterStore, Tape
from dvf.envs.colouring import ColourEnv
from dvf.envs.firefight import FirefightEnv
from dvf.envs.radio import EdgeRadioEnv, RadioEnv, message_counts
from dvf.gmdp import stream
from dvf.graph import build_diffusion

CRITIC_KINDS = ("DVF", "REIN", "IA2C", "NA2C", "MAA2C")


# ---------------------------------------------------------------------------
# configuration and records


@dataclass
class AdvantageConfig:
    W: int = 1
    mode: str = "gamma_operator"

    def __post_init__(self):
        if self.W < 1:
            raise ValueError("W must be at least 1")
        if self.mode not in ("gamma_operator", "gamma_scalar"):
            raise ValueError(f"unknown advantage mode {self.mode!r}")


@dataclass
class TrainConfig:
    c_j: float = 1.0
    c_v: float = 6e-4
    c_r: float = 5e-4
    c_h: float = 0.0
    c_m: float = 0.0
    iterations: int = 100
    M: int = 10
    batch: int = 64
    gamma: float = 0.9
    optimizer: str = "adam"
    anneal_cm: bool = True
    critic_layers: int = 2
    hidden: int = 32
    d_x: int = 32
    d_e: int = 0
    gates: str = "full"
    shift_discount: bool = False
    advantage: AdvantageConfig = field(default_factory=AdvantageConfig)

    def __post_init__(self):
        if isinstance(self.advantage, dict):
            self.advantage = AdvantageConfig(**self.advantage)
        if self.c_j <= 0 or self.c_v <= 0:
            raise ValueError("learning rates c_j and c_v must be positive")
        if self.c_h < 0 or self.c_m < 0:
            raise ValueError("c_h and c_m must be non-negative")
        if self.iterations < 0 or self.M < 1 or self.batch < 1:
            raise ValueError("need iterations >= 0, M >= 1 and batch >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


# Learning rates and gain scalings for the two tasks they were tuned on.
TABLE3 = {
    "radio": dict(c_j=0.004, c_v=0.002, c_r=0.1, c_h=1e-4, c_m=0.2, M=5, batch=64, d_x=10, d_e=10, gates="learned"),
    "colouring": dict(c_j=1.0, c_v=6e-4, c_r=5e-4, c_h=0.0, c_m=0.0, M=10, batch=64, d_x=32, gates="full"),
}


@dataclass
class TrainRecord:
    iteration: int
    reward: float
    td_loss: float
    entropy: float
    messages: float
    flagged: bool = False

    CSV_FIELDS = ("iter", "reward", "td_loss", "entropy", "messages")

    def csv_row(self):
        return [self.iteration, repr(self.reward), repr(self.td_loss), repr(self.entropy), repr(self.messages)]


def write_records(records, csv_path=None, jsonl_path=None):
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TrainRecord.CSV_FIELDS)
            for rec in records:
                w.writerow(rec.csv_row())
    if jsonl_path is not None:
        with open(jsonl_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# TD errors, advantages and targets


def _check_len(op, *vectors):
    for v in vectors:
        if np.shape(v)[0] != op.n:
            raise ValueError(f"expected vectors of length {op.n}, got {np.shape(v)[0]}")


def td_error(op, rewards, v_now, v_next):
    """Diffusion TD error ``Gamma [R + v_next] - v_now``."""
    _check_len(op, rewards, v_now, v_next)
    return op.apply(np.asarray(rewards, float) + v_next) - v_now


def n_step_advantage(cfg, op, rewards, v_t, v_tw):
    """W-step diffusion advantage from a reward window of shape ``(W, n)``.

    ``gamma_operator``: ``sum_{k<W} Gamma^{k+1} R^{t+k} + Gamma^W v_{t+W} - v_t``,
    evaluated by Horner's rule so that ``W = 1`` reproduces :func:`td_error`
    bit for bit. ``gamma_scalar``: ``sum_{k<W} gamma^k R^{t+k} + gamma^W v_{t+W} - v_t``.
    """
    rewards = np.asarray(rewards, float)
    if rewards.ndim != 2 or len(rewards) != cfg.W:
        raise ValueError(f"reward window must have shape (W={cfg.W}, n)")
    _check_len(op, rewards[0], v_t, v_tw)
    if cfg.mode == "gamma_scalar":
        disc = op.gamma ** np.arange(cfg.W)
        return np.tensordot(disc, rewards, axes=1) + op.gamma ** cfg.W * v_tw - v_t
    acc = rewards[-1] + v_tw
    for k in range(cfg.W - 2, -1, -1):
        acc = rewards[k] + op.apply(acc)
    return op.apply(acc) - v_t


def distributed_td_target(graph, gamma, rewards, v_next, i):
    """Target agent ``i`` forms from its out-neighbours: ``sum_j gamma A_ij / d_j (R_j + v_next_j)``."""
    out = graph.out_neighbors(i)
    return float(np.sum(gamma / graph.in_degree[out] * (np.asarray(rewards)[out] + np.asarray(v_next)[out])))


def ia2c_target(gamma, rewards, v_next):
    return np.asarray(rewards, float) + gamma * np.asarray(v_next, float)


def na2c_target(graph, gamma, rewards, v_next):
    """``sum_{j in out(i)} R_j + gamma v'_i``; the out-neighbourhood includes ``i``."""
    data = np.ones(len(graph.out_indices))
    summed = kernels.csr_matmat(graph.out_indptr, graph.out_indices, data, np.asarray(rewards, float))
    return summed + gamma * np.asarray(v_next, float)


def instance_mean(values, instance, n_instances):
    counts = np.bincount(instance, minlength=n_instances)
    return np.bincount(instance, weights=values, minlength=n_instances) / counts


def maa2c_target(gamma, rewards, v_next, instance, n_instances):
    """``r + gamma v'`` with ``r`` the mean reward of each instance and ``v'`` one value per instance."""
    return instance_mean(np.asarray(rewards, float), instance, n_instances) + gamma * np.asarray(v_next, float)


def discounted_returns(gamma, rewards):
    """``G_t = sum_{k < M - t} gamma^k r^{t+k}`` for rewards of shape ``(M, ...)``."""
    rewards = np.asarray(rewards, float)
    out = np.zeros_like(rewards)
    acc = np.zeros_like(rewards[0])
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def operator_tape_apply(op, v):
    """``Gamma v`` as a tape operation (row-compressed copy of the operator)."""
    cols = np.repeat(np.arange(op.n), np.diff(op.indptr))
    order = np.lexsort((cols, op.indices))
    rows = op.indices[order]
    indptr = np.zeros(op.n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return T.csr_matvec(indptr, np.ascontiguousarray(cols[order]), op.data[order], v)


# ---------------------------------------------------------------------------
# optimisers and update steps


class Sgd:
    def update(self, values, grad, lr, ascend=False):
        values += (lr if ascend else -lr) * grad


class Adam:
    """Adaptive moments with bias correction.

    ``m <- b1 m + (1 - b1) g``, ``v <- b2 v + (1 - b2) g^2``,
    ``x <- x -/+ lr * (m / (1 - b1^k)) / (sqrt(v / (1 - b2^k)) + eps)``.
    """

    def __init__(self, size, betas=(0.9, 0.999), eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.b1, self.b2 = betas
        self.eps = eps
        self.k = 0

    def update(self, values, grad, lr, ascend=False):
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.k)
        vhat = self.v / (1 - self.b2 ** self.k)
        step = lr * mhat / (np.sqrt(vhat) + self.eps)
        values += step if ascend else -step


def make_optimizer(name, store):
    return Adam(len(store)) if name == "adam" else Sgd()


def critic_loss_grad(store, forward, target):
    """Loss ``mean((y - v)^2)`` and its gradient with ``y`` held constant."""
    tape = Tape(store)
    v = forward(tape)
    delta = np.asarray(target, float) - v.value
    loss = float(np.mean(delta * delta))
    grad = tape.backward(v, seed=-2.0 * delta / delta.size)
    return loss, grad, v.value


def critic_step(store, forward, target, c_v, optimizer=None):
    """One semi-gradient descent step on ``mean((y - v)^2)``.

    ``forward(tape)`` evaluates the critic; ``target`` is a constant array
    (for the diffusion critic ``Gamma [R + v']`` with ``v'`` detached).
    Returns ``(loss before the step, ok, values before the step)``;
    non-finite gradients leave the parameters untouched and return
    ``ok = False``.
    """
    loss, grad, v = critic_loss_grad(store, forward, target)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        return loss, False, v
    (optimizer or Sgd()).update(store.values, grad, c_v)
    return loss, True, v


def full_gradient_td_grad(store, forward_now, forward_next, op, rewards):
    """Residual gradient of ``mean(delta^2)`` differentiating through the bootstrap too."""
    tape = Tape(store)
    v = forward_now(tape)
    v_next = forward_next(tape)
    delta = operator_tape_apply(op, T.add(v_next, np.asarray(rewards, float))) - v
    loss = T.mul(T.total(T.square(delta)), 1.0 / op.n)
    return tape.backward(loss)


def surrogate(logps, advantages, entropies, c_r, c_h, extras=(), scale=1.0):
    """``scale * sum_t [c_r sum_i logp_i G_i + c_h sum_i H_i] + extras`` as a tape value."""
    terms = []
    for logp, adv, ent in zip(logps, advantages, entropies):
        terms.append(T.mul(T.total(T.mul(logp, np.asarray(adv, float))), c_r))
        if c_h:
            terms.append(T.mul(T.total(ent), c_h))
    terms.extend(extras)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, scale)


def actor_step(store, tape, gain, c_j, optimizer=None):
    """Gradient ascent ``theta <- theta + c_j grad J``; returns ``(J, ok)``."""
    grad = tape.backward(gain)
    value = float(gain.value)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        return value, False
    (optimizer or Sgd()).update(store.values, grad, c_j, ascend=True)
    return value, True


# ---------------------------------------------------------------------------
# task adapters: how the actor talks to each environment


def comm_edges(env):
    """Directed communication edges the actor may message along."""
    return env.graph.non_self_edges()


def build_actor(env, cfg, seed):
    if isinstance(env, ColourEnv):
        return LdGnnActor(env.obs_dim, "bernoulli", bits=env.c, d_x=cfg.d_x, d_e=cfg.d_e, d_embed=cfg.hidden,
                          hidden=cfg.hidden, gates=cfg.gates, seed=seed)
    if isinstance(env, FirefightEnv):
        return LdGnnActor(env.obs_dim, "categorical", cand_dim=env.cand_dim, d_x=cfg.d_x, d_e=cfg.d_e,
                          d_embed=cfg.hidden, hidden=cfg.hidden, gates=cfg.gates, seed=seed)
    if isinstance(env, RadioEnv):
        return LdGnnActor(env.obs_dim, "power", d_x=cfg.d_x, d_e=cfg.d_e, d_embed=cfg.hidden, hidden=cfg.hidden,
                          gates=cfg.gates, seed=seed)
    return LdGnnActor(env.obs_dim, "bernoulli", bits=1, d_x=cfg.d_x, d_e=cfg.d_e, d_embed=cfg.hidden,
                      hidden=cfg.hidden, gates=cfg.gates, seed=seed)


def candidates_of(env):
    return env.candidates() if isinstance(env, FirefightEnv) else None


def env_action(env, out, edges):
    if isinstance(env, FirefightEnv):
        return env.homes_from_choice(out.actions)
    if isinstance(env, RadioEnv):
        return out.actions, message_counts(edges, out.active, env.n)
    if isinstance(env, ColourEnv):
        return out.actions
    return out.actions[:, 0]


def messages_sent(env, out):
    if isinstance(env, EdgeRadioEnv):
        return float(np.sum(out.actions[:, 0].astype(bool) & ~env.edge_graph.padded))
    return float(out.active.sum())


def per_agent_entropy(out, edges, n):
    ent = out.entropy
    if out.gate_entropy is not None and len(edges):
        ent = T.add(ent, T.segment_sum(out.gate_entropy, edges[:, 0], n))
    return ent


def per_agent_logp(out, edges, n):
    logp = out.logp
    if out.gate_logp is not None and len(edges):
        logp = T.add(logp, T.segment_sum(out.gate_logp, edges[:, 0], n))
    return logp


# ---------------------------------------------------------------------------
# critics


class CriticInput:
    """What a critic sees at one time step."""

    def __init__(self, features, obs, graph):
        self.features = features
        self.obs = obs
        self.graph = graph


class GraphCritic:
    """GNN critic over ``[actor memory, observation]``; pooled per instance for MAA2C."""

    def __init__(self, d_in, hidden, layers, pooled, seed):
        self.store = ParameterStore(seed)
        self.net = L.GnnCritic(self.store, "critic", d_in, hidden, layers, pooled)

    def forward(self, tape, inp):
        return self.net(tape, inp.features, inp.graph)


class TabularStateCritic:
    """Free table over the global state read from one-hot observations."""

    def __init__(self, n_states, n_agents, seed=0, init=None):
        self.store = ParameterStore(seed)
        self.net = L.TabularCritic(self.store, "critic", n_states, n_agents)
        if init is not None:
            a, b, _ = self.store.slices[self.net.table]
            self.store.values[a:b] = np.asarray(init, float).ravel()

    def forward(self, tape, inp):
        return self.net(tape, int(np.argmax(inp.obs[0])))


def critic_values(critic, inp):
    return critic.forward(Tape(critic.store, record=False), inp).value


def shifted_target(gamma, target, v_next):
    """Turn ``x + gamma v'`` into ``gamma (x + v')``: values discounted from ``gamma^{t+1}``."""
    return gamma * (target - gamma * np.asarray(v_next, float) + np.asarray(v_next, float))


def critic_target(kind, env, op, gamma, rewards, v_next, shift=False):
    """Bootstrap target of critic ``kind``.

    With ``shift`` the baselines discount from ``gamma^{t+1}`` like the DVF
    instead of ``gamma^t``; the DVF target is unaffected.
    """
    if kind == "DVF":
        return op.apply(rewards + v_next)
    if kind == "IA2C":
        out = ia2c_target(gamma, rewards, v_next)
    elif kind == "NA2C":
        out = na2c_target(env.graph, gamma, rewards, v_next)
    else:
        g = env.graph
        out = maa2c_target(gamma, rewards, v_next, g.instance, g.num_instances)
    return shifted_target(gamma, out, v_next) if shift else out


# ---------------------------------------------------------------------------
# training loop


def _cm_scale(cfg, it):
    if not cfg.anneal_cm or cfg.iterations <= 1:
        return 1.0
    half = cfg.iterations / 2.0
    return max(0.0, 1.0 - it / half)


def rollout_gain(actor, env, cfg, kind, critic, pol_rng, env_rng, c_m, critic_opt, greedy=False, learn=True):
    """Run ``M`` steps, update the critic online and return the actor tape, gain and stats.

    With ``learn=False`` nothing is recorded and the gain is ``None``.
    """
    tape = Tape(actor.store, record=learn)
    edges = comm_edges(env)
    n = env.graph.n
    op = build_diffusion(env.graph, cfg.gamma)
    obs = env.reset(env_rng)
    state = actor.initial_state(n, len(edges))
    logps, ents, rewards, extras = [], [], [], []
    v_now, v_next = [], []
    td_losses, msgs, fire = [], [], []
    ok = True
    for _ in range(cfg.M):
        x_now = np.asarray(T._val(state.node_memory))
        out = actor.step(tape, state, obs, edges, pol_rng, candidates_of(env), greedy)
        res = env.step(env_action(env, out, edges), env_rng)
        r = np.asarray(res.rewards, float)
        if not np.all(np.isfinite(r)):
            raise FloatingPointError("environment produced non-finite rewards")
        logps.append(per_agent_logp(out, edges, n))
        ents.append(per_agent_entropy(out, edges, n))
        rewards.append(r)
        msgs.append(messages_sent(env, out))
        if "fire_level" in res.info:
            fire.append(res.info["fire_level"])
        if learn and isinstance(env, RadioEnv):
            # raw reward through the deterministic power, plus the message bonus
            extras.append(T.total(env_reward_on_tape(env, out, edges)))
            if c_m and out.gate_probs is not None:
                extras.append(T.mul(T.total(out.gate_probs), c_m))
        x_next = np.asarray(out.state.node_memory.value)
        if critic is not None:
            inp_now = CriticInput(np.concatenate([x_now, obs], axis=1), obs, env.graph)
            inp_next = CriticInput(np.concatenate([x_next, res.obs], axis=1), res.obs, env.graph)
            vn = critic_values(critic, inp_next)
            target = critic_target(kind, env, op, cfg.gamma, r, vn, cfg.shift_discount)
            loss, step_ok, vc = critic_step(critic.store, lambda tp: critic.forward(tp, inp_now), target, cfg.c_v,
                                        critic_opt)
            ok &= step_ok
            td_losses.append(loss)
            v_now.append(vc)
            v_next.append(vn)
        obs = res.obs
        state = out.state
    B = env.graph.num_instances
    gain = None
    if learn:
        adv = advantages(kind, env, op, cfg, np.array(rewards), v_now, v_next)
        gain = surrogate(logps, adv, ents, cfg.c_r, cfg.c_h, extras, scale=1.0 / (cfg.M * B))
    stats = dict(
        reward=float(np.mean(rewards)),
        td_loss=float(np.mean(td_losses)) if td_losses else 0.0,
        entropy=float(np.mean([e.value.mean() for e in ents])),
        messages=float(np.mean(msgs)) / B,
    )
    if fire:
        stats["fire_level"] = float(np.mean(fire))
    return tape, gain, stats, ok


def env_reward_on_tape(env, out, edges):
    return env.tape_rewards(out.power, message_counts(edges, out.active, env.n))


def advantages(kind, env, op, cfg, rewards, v_now, v_next):
    M = len(rewards)
    if kind == "REIN":
        g = env.graph
        glob = np.stack([instance_mean(r, g.instance, g.num_instances) for r in rewards])
        returns = discounted_returns(cfg.gamma, glob)
        if cfg.shift_discount:
            returns = cfg.gamma * returns
        return [ret[g.instance] for ret in returns]
    if kind == "DVF":
        out = []
        for t in range(M):
            w = min(cfg.advantage.W, M - t)
            acfg = AdvantageConfig(w, cfg.advantage.mode)
            out.append(n_step_advantage(acfg, op, rewards[t:t + w], v_now[t], v_next[t + w - 1]))
        return out
    out = []
    for t in range(M):
        a = critic_target(kind, env, op, cfg.gamma, rewards[t], v_next[t], cfg.shift_discount) - v_now[t]
        out.append(a[env.graph.instance] if kind == "MAA2C" else a)
    return out


def build_critic(kind, actor, env, cfg, seed):
    if kind == "REIN":
        return None
    return GraphCritic(cfg.d_x + env.obs_dim, cfg.hidden, cfg.critic_layers, kind == "MAA2C", seed)


def train(env_factory, cfg, kind="DVF", seed=0, actor=None, critic=None, callback=None):
    """Single-loop actor-critic training.

    ``env_factory(rng)`` returns a freshly sampled (batched) environment each
    iteration. Returns ``(records, actor, critic)``.
    """
    if kind not in CRITIC_KINDS:
        raise ValueError(f"unknown critic kind {kind!r}")
    graph_rng = stream(seed, "graphs")
    env_rng = stream(seed, "env")
    pol_rng = stream(seed, "policy")
    env = env_factory(graph_rng)
    if actor is None:
        actor = build_actor(env, cfg, int(stream(seed, "actor-init").integers(2**31)))
    if critic is None:
        critic = build_critic(kind, actor, env, cfg, int(stream(seed, "critic-init").integers(2**31)))
    actor_opt = make_optimizer(cfg.optimizer, actor.store)
    critic_opt = make_optimizer(cfg.optimizer, critic.store) if critic is not None else None
    records = []
    for it in range(cfg.iterations):
        if it > 0:
            env = env_factory(graph_rng)
        c_m = cfg.c_m * _cm_scale(cfg, it)
        tape, gain, stats, ok = rollout_gain(actor, env, cfg, kind, critic, pol_rng, env_rng, c_m, critic_opt)
        _, a_ok = actor_step(actor.store, tape, gain, cfg.c_j, actor_opt)
        rec = TrainRecord(it, stats["reward"], stats["td_loss"], stats["entropy"], stats["messages"],
                          not (ok and a_ok))
        records.append(rec)
        if callback is not None:
            callback(rec)
    return records, actor, critic


def evaluate_policy(actor, env_factory, cfg, episodes, seed, greedy=False):
    """Mean global reward per episode on fresh instances (no learning)."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    graph_rng, env_rng, pol_rng = stream(seed, "eval-graphs"), stream(seed, "eval-env"), stream(seed, "eval-policy")
    out = []
    for _ in range(episodes):
        env = env_factory(graph_rng)
        _, _, stats, _ = rollout_gain(actor, env, cfg, "REIN", None, pol_rng, env_rng, 0.0, None, greedy, learn=False)
        out.append(stats)
    return out


def config_from_dict(d):
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - names
    if unknown:
        raise KeyError(f"train.{sorted(unknown)[0]}: unknown key")
    return TrainConfig(**d)
