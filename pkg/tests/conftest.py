import numpy as np
import pytest

from dvf.gmdp import StepResult, TabularGmdp, TabularPolicy
from dvf.graph import InfluenceGraph


class ConstantEnv:
    """Every agent receives reward ``value`` at every step."""

    def __init__(self, graph, value=1.0):
        self.graph = graph
        self.value = value
        self.obs_dim = 1

    def observations(self):
        return np.zeros((self.graph.n, 1))

    def observe(self, i):
        return self.observations()[i]

    def reset(self, rng):
        return self.observations()

    def step(self, actions, rng):
        r = np.full(self.graph.n, self.value)
        return StepResult(r, self.observations(), False, {"global_reward": self.value})


class NoisyEnv(ConstantEnv):
    """Independent Gaussian rewards; used for identities that hold per trajectory."""

    def step(self, actions, rng):
        r = rng.normal(size=self.graph.n)
        return StepResult(r, self.observations(), False, {"global_reward": float(r.mean())})


class NullPolicy:
    def act(self, obs, rng):
        n = len(obs)
        return np.zeros(n, dtype=np.int64), np.zeros(n), np.zeros(n)


def two_agent_gmdp(noise=0.0, seed=0):
    """3 states, 2 agents with binary actions on a 2-node complete graph."""
    rng = np.random.default_rng(seed)
    graph = InfluenceGraph(2, [(0, 1), (1, 0)])
    P = rng.random((3, 4, 3)) + 0.1
    P /= P.sum(-1, keepdims=True)
    R = rng.uniform(-1, 1, size=(3, 4, 2))
    return TabularGmdp(graph, 2, P, R)


@pytest.fixture
def toy_gmdp():
    env = two_agent_gmdp()
    probs = np.full((3, 2, 2), 0.5)
    probs[:, 0] = [0.3, 0.7]
    return env, TabularPolicy(probs)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
