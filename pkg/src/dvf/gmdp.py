"""Environment and policy contracts, seeded rollouts, and a small enumerable GMDP."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from dvf.graph import InfluenceGraph


def stream(seed, label):
    """Independent generator for component ``label`` under master ``seed``.

    Streams depend only on ``(seed, label)`` so adding a component never
    shifts another component's random numbers.
    """
    return np.random.default_rng([int(seed), zlib.crc32(label.encode())])


def global_reward(rewards):
    rewards = np.asarray(rewards, dtype=float)
    if rewards.size == 0:
        raise ValueError("empty reward vector")
    return float(rewards.mean())


@dataclass
class StepResult:
    rewards: np.ndarray
    obs: np.ndarray
    done: bool = False
    info: dict = field(default_factory=dict)


class GmdpEnvironment(Protocol):
    """What a GMDP environment provides.

    ``step`` returns local rewards ``R_i`` whose mean is the global reward;
    ``R_i`` may only depend on the in-neighbourhood of ``i`` in ``graph``.
    Observations are an ``(n, obs_dim)`` float array.
    """

    graph: InfluenceGraph
    obs_dim: int

    def reset(self, rng: np.random.Generator) -> np.ndarray: ...

    def step(self, actions: Any, rng: np.random.Generator) -> StepResult: ...

    def observe(self, i: int) -> np.ndarray: ...


class JointPolicy(Protocol):
    def act(self, obs: np.ndarray, rng: np.random.Generator) -> tuple[Any, np.ndarray, np.ndarray]:
        """Joint action, per-agent log-probabilities, per-agent entropies."""
        ...


@dataclass
class Transition:
    obs: np.ndarray
    actions: Any
    rewards: np.ndarray
    next_obs: np.ndarray
    done: bool
    logp: np.ndarray
    entropy: np.ndarray
    info: dict = field(default_factory=dict)


def rollout(env, policy, steps, rng, reset=True):
    """Run ``steps`` transitions; env and policy draw from separate streams of ``rng``."""
    if steps < 1:
        raise ValueError("need at least one step")
    if not isinstance(rng, np.random.Generator):
        env_rng, pol_rng = stream(rng, "env"), stream(rng, "policy")
    else:
        env_rng, pol_rng = rng.spawn(2)
    obs = env.reset(env_rng) if reset else env.observations()
    out = []
    for _ in range(steps):
        actions, logp, ent = policy.act(obs, pol_rng)
        res = env.step(actions, env_rng)
        rewards = np.asarray(res.rewards, dtype=float)
        if rewards.shape != (env.graph.n,) or not np.all(np.isfinite(rewards)):
            raise ValueError("environment returned malformed rewards")
        out.append(Transition(obs, actions, rewards, res.obs, res.done, np.asarray(logp), np.asarray(ent), res.info))
        obs = res.obs
    return out


# ---------------------------------------------------------------------------
# enumerable toy GMDP


class TabularGmdp:
    """Fully enumerable multi-agent MDP over a global state index.

    ``transitions[s, a]`` is a distribution over next states and
    ``rewards[s, a]`` the local reward vector, with the joint action encoded
    as ``a = sum_i a_i * k**i``. Every agent observes the one-hot global state.
    """

    def __init__(self, graph, n_actions, transitions, rewards, start=0):
        self.graph = graph
        self.n = graph.n
        self.k = int(n_actions)
        self.transitions = np.asarray(transitions, float)
        self.rewards = np.asarray(rewards, float)
        self.n_states = self.transitions.shape[0]
        if self.transitions.shape != (self.n_states, self.k ** self.n, self.n_states):
            raise ValueError("transition tensor has the wrong shape")
        if not np.allclose(self.transitions.sum(-1), 1.0):
            raise ValueError("transition rows must sum to one")
        self.obs_dim = self.n_states
        self.start = start
        self.state = start

    def observations(self):
        return np.tile(np.eye(self.n_states)[self.state], (self.n, 1))

    def observe(self, i):
        return self.observations()[i]

    def reset(self, rng):
        self.state = self.start
        return self.observations()

    def joint_index(self, actions):
        return int(np.dot(np.asarray(actions, np.int64), self.k ** np.arange(self.n)))

    def step(self, actions, rng):
        a = self.joint_index(actions)
        r = self.rewards[self.state, a].copy()
        self.state = int(rng.choice(self.n_states, p=self.transitions[self.state, a]))
        return StepResult(r, self.observations(), False, {"global_reward": global_reward(r)})

    def markov_chain(self, policy):
        """State chain ``P_pi`` and expected local rewards ``R_pi`` under a tabular policy."""
        S = self.n_states
        P = np.zeros((S, S))
        R = np.zeros((S, self.n))
        for a in range(self.k ** self.n):
            acts = (a // self.k ** np.arange(self.n)) % self.k
            w = np.prod(policy.probs[:, np.arange(self.n), acts], axis=1)
            P += w[:, None] * self.transitions[:, a]
            R += w[:, None] * self.rewards[:, a]
        return P, R


class TabularPolicy:
    """Per-agent action probabilities conditioned on the global state index."""

    def __init__(self, probs):
        self.probs = np.asarray(probs, float)

    def act(self, obs, rng):
        s = int(np.argmax(obs[0]))
        p = self.probs[s]
        acts = np.array([rng.choice(p.shape[1], p=p[i]) for i in range(p.shape[0])])
        logp = np.log(p[np.arange(len(acts)), acts])
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1)
        return acts, logp, ent
