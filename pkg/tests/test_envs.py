import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvf import envs
from dvf.envs import firefight as F
from dvf.envs import radio as RD
from dvf.envs.colouring import ColourEnv, brute_force_optimum, colour_reward, greedy_colour_step
from dvf.gmdp import Transition, global_reward
from dvf.graph import BipartiteLayout, InfluenceGraph, edge_transform, erdos_renyi, generate

# ---------------------------------------------------------------------------
# firefighting


def line_layout():
    # firefighter 0 -> homes {0, 1}, firefighter 1 -> homes {1, 2}, firefighter 2 -> homes {3, 4}
    return BipartiteLayout(3, 5, [(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (2, 4)])


def test_suppression_rules():
    fire = np.array([3, 5, 0, 1, 0])
    assert F.suppress(fire, np.array([0, 1, 1]), 5).tolist() == [2, 0, 0, 1, 0]
    assert F.suppress(fire, np.array([1, 1, 3]), 5).tolist() == [3, 0, 0, 0, 0]


def test_spread_on_isolated_burning_home():
    # home 0 has no adjacent homes: after suppression 3 -> 2, then the self draw decides
    adjacency = np.zeros((1, 1), dtype=bool)
    before, after = np.array([3]), F.suppress(np.array([3]), np.array([0]), 1)
    assert after.tolist() == [2]
    assert F.spread(before, after, adjacency, np.array([0.39]), 5).tolist() == [3]
    assert F.spread(before, after, adjacency, np.array([0.41]), 5).tolist() == [2]
    # extinguished homes with no burning neighbour stay out
    assert F.spread(before, np.array([0]), adjacency, np.array([0.0]), 5).tolist() == [0]


def test_spread_from_neighbours_and_clamp():
    adjacency = np.array([[False, True], [True, False]])
    before = np.array([0, 5])
    after = np.array([0, 5])
    assert F.spread(before, after, adjacency, np.array([0.79, 0.1]), 5).tolist() == [1, 5]
    assert F.spread(before, after, adjacency, np.array([0.81, 0.1]), 5).tolist() == [0, 5]


def test_firefight_step_and_rewards():
    env = F.FirefightEnv(line_layout(), f_max=5)
    env.fire = np.zeros(5, dtype=np.int64)
    res = env.step(np.array([0, 2, 3]), np.random.default_rng(0))
    assert np.array_equal(res.rewards, np.zeros(3))
    env.fire = np.array([5, 0, 0, 0, 0])
    # two firefighters on one home put it out
    env2 = F.FirefightEnv(BipartiteLayout(2, 2, [(0, 0), (0, 1), (1, 0), (1, 1)]))
    env2.fire = np.array([5, 0])
    res = env2.step(np.array([0, 0]), np.random.default_rng(0))
    assert res.info["fire_level"] <= 0.5
    with pytest.raises(ValueError):
        env.step(np.array([2, 2, 3]), np.random.default_rng(0))
    with pytest.raises(ValueError):
        env.step(np.array([0, 1]), np.random.default_rng(0))


def test_local_rewards_by_hand():
    lay = line_layout()
    fire = np.array([1, 2, 3, 4, 5])
    # home 1 is shared by firefighters 0 and 1
    assert F.local_rewards(lay, fire).tolist() == [-1 - 1, -1 - 3, -4 - 5]


def test_firefight_reward_identity_and_bounds():
    rng = np.random.default_rng(1)
    env = F.FirefightEnv.random(rng)
    env.reset(rng)
    for _ in range(50):
        owners, _ = env.candidates()
        choice = np.array([rng.choice(np.flatnonzero(owners == i)) for i in range(env.n)])
        res = env.step(env.homes_from_choice(choice), rng)
        raw = F.local_rewards(env.layout, env.fire)
        assert raw.sum() == pytest.approx(-env.fire.sum(), abs=1e-12)
        assert res.rewards.mean() == pytest.approx(-env.fire.mean(), abs=1e-12)
        assert res.info["global_reward"] == global_reward(res.rewards)
        assert env.fire.min() >= 0 and env.fire.max() <= env.f_max


def test_firefight_locality_probe():
    rng = np.random.default_rng(2)
    env = F.FirefightEnv.random(rng)
    env.reset(rng)
    g = env.graph
    owners, _ = env.candidates()
    base = np.array([np.flatnonzero(owners == i)[0] for i in range(env.n)])
    checked = 0
    for i in range(env.n):
        nbrs = set(g.in_neighbors(i).tolist())
        for j in range(env.n):
            opts = np.flatnonzero(owners == j)
            if j in nbrs or len(opts) < 2:
                continue
            alt = base.copy()
            alt[j] = opts[1]
            fire = env.fire.copy()
            r1 = env.step(env.homes_from_choice(base), np.random.default_rng(7)).rewards
            env.fire = fire.copy()
            r2 = env.step(env.homes_from_choice(alt), np.random.default_rng(7)).rewards
            env.fire = fire
            assert r1[i] == r2[i]
            checked += 1
    assert checked > 0


def test_firefight_observations():
    env = F.FirefightEnv(line_layout(), f_max=5)
    env.fire = np.array([5, 0, 0, 1, 0])
    obs = env.observations()
    assert obs.shape == (3, 3)
    assert obs[0].tolist() == [0.5, 1.0, 0.2]
    owners, feats = env.candidates()
    assert feats.shape == (6, 3) and owners.tolist() == [0, 0, 1, 1, 2, 2]


# ---------------------------------------------------------------------------
# colouring


def test_colour_reward_examples():
    single = InfluenceGraph(1, [])
    assert colour_reward(np.ones((1, 3)), single, 0.4).tolist() == [3]
    pair = InfluenceGraph(2, [(0, 1), (1, 0)])
    assert colour_reward(np.array([[1, 0], [1, 0]]), pair, 0.5).tolist() == [0.5, 0.5]
    assert colour_reward(np.zeros((2, 2)), pair, 0.5).tolist() == [0, 0]
    with pytest.raises(ValueError):
        colour_reward(np.full((2, 1), 2), pair, 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_colour_reward_brute_force(seed):
    rng = np.random.default_rng(seed)
    g = erdos_renyi(int(rng.integers(1, 7)), 2.0, rng)
    Y = rng.integers(0, 2, size=(g.n, 3))
    p_m = float(rng.uniform(0, 2))
    A = g.adjacency()
    A = np.maximum(A, A.T)
    expect = [Y[i] @ Y[i] - p_m * sum(Y[i] @ Y[j] for j in range(g.n) if j != i and A[i, j]) for i in range(g.n)]
    env = ColourEnv(g, c=3, p_m=p_m)
    env.reset(rng)
    res = env.step(Y)
    assert np.allclose(res.rewards, expect)
    assert res.info["global_reward"] == global_reward(res.rewards)


def test_brute_force_optimum_by_enumeration():
    g = erdos_renyi(5, 2.0, np.random.default_rng(3))
    best = max(colour_reward(np.array(bits).reshape(5, 2), g, 0.7).mean()
               for bits in itertools.product([0, 1], repeat=10))
    assert brute_force_optimum(g, 2, 0.7) == pytest.approx(best)
    with pytest.raises(ValueError):
        brute_force_optimum(erdos_renyi(21, 2.0, np.random.default_rng(0)), 1, 0.5)


def test_greedy_examples():
    star = InfluenceGraph(2, [(0, 1), (1, 0)])

    class AllActive:
        def random(self, n):
            return np.zeros(n)

    class NoneActive:
        def random(self, n):
            return np.ones(n)

    assert greedy_colour_step([0, 0], star, 1.0, AllActive()).tolist() == [1, 1]
    assert greedy_colour_step([0, 1], star, 1.0, AllActive())[0] == 0
    assert greedy_colour_step([0, 1], star, 1.0, NoneActive()).tolist() == [0, 1]


def test_greedy_degenerate_regime():
    g = erdos_renyi(30, 3.0, np.random.default_rng(0))
    max_deg = np.diff(g.undirected()[0]).max()
    rng = np.random.default_rng(1)
    Y = rng.integers(0, 2, size=g.n)
    Y2 = greedy_colour_step(Y, g, 0.99 / (2 * max_deg), rng)
    assert np.all((Y2 == 1) | (Y2 == Y))


def test_colour_locality_probe():
    g = erdos_renyi(12, 2.0, np.random.default_rng(5))
    rng = np.random.default_rng(6)
    Y = rng.integers(0, 2, size=(g.n, 3))
    base = colour_reward(Y, g, 0.4)
    for j in range(g.n):
        Y2 = Y.copy()
        Y2[j] = 1 - Y2[j]
        changed = colour_reward(Y2, g, 0.4)
        for i in range(g.n):
            if j != i and j not in g.neighbors(i):
                assert changed[i] == base[i]


def test_colour_observations():
    g = erdos_renyi(6, 2.0, np.random.default_rng(0))
    env = ColourEnv(g, c=2)
    obs = env.reset(np.random.default_rng(0))
    assert obs.shape == (6, 4) and np.all((obs[:, 0] >= 0) & (obs[:, 0] < 1))
    env.step(np.ones((6, 2)))
    assert np.all(env.observations()[:, 1:3] == 1)


# ---------------------------------------------------------------------------
# transmit power


def test_bgrw_examples():
    assert RD.bgrw_normalise(1.0, 0.0, 2.0) == 0.0
    assert RD.bgrw_normalise(0.5, 0.5, 2.0) == pytest.approx(-1 / (4 * np.sqrt(3)))
    rng = np.random.default_rng(0)
    assert RD.bgrw_step(0.7, 0.0, 1.0, 0.0, rng) == 0.7
    x = np.full(20, 0.5)
    for _ in range(100_000 // 20):
        x = RD.bgrw_step(x, 0.2, 1.0, 0.3, rng)
        assert x.min() >= 0.2 and x.max() <= 1.0
    with pytest.raises(ValueError):
        RD.bgrw_step(0.5, 1.0, 1.0, 0.1, rng)
    with pytest.raises(ValueError):
        RD.bgrw_normalise(0.5, 1.0, 0.0)


def test_quality_examples():
    assert RD.quality(0.0, 1.0, 1.0) == 0.0
    assert RD.quality(1e3, 1.0, 1.0) == pytest.approx(1.0)
    c = np.linspace(0, 8, 200)
    q = RD.quality(c, 1.2, 0.5)
    assert np.all((q >= 0) & (q < 1))


def isolated_radio(mode):
    g = InfluenceGraph(1, [], positions=np.zeros((1, 2)), channel=np.zeros(0))
    env = RD.RadioEnv(g, RD.RadioParams(noise=1.0, base_power=0.1, mode=mode))
    env.reset(np.random.default_rng(0))
    env.alpha, env.beta, env.gain = np.array([1.0]), np.array([1.0]), np.array([1.0])
    return env


def test_radio_isolated_node_by_hand():
    q = (1 - np.exp(-1.0)) / (1 + np.exp(0.0))
    sq = isolated_radio("sq")
    r, interference = sq.evaluate([1.0], [0.0])
    assert interference[0] == 1.0
    assert r[0] == pytest.approx(q, rel=1e-14)
    ee = isolated_radio("ee")
    assert ee.evaluate([1.0], [0.0])[0][0] == pytest.approx(q / 1.1, rel=1e-14)
    assert sq.evaluate([0.0], [0.0])[0][0] == 0.0
    with pytest.raises(ValueError):
        sq.evaluate([-1.0], [0.0])


def radio_instance(seed, mode="ee"):
    rng = np.random.default_rng(seed)
    g = generate("geometric", rng, n_min=8, n_max=30, threshold=0.3)
    env = RD.RadioEnv(g, RD.RadioParams(mode=mode))
    env.reset(rng)
    return env, rng


def test_radio_invariants():
    for seed in range(20):
        env, rng = radio_instance(seed)
        for _ in range(5):
            Y = rng.uniform(0, 1, size=env.n)
            msgs = rng.integers(0, 4, size=env.n)
            p = env.powers(Y, msgs)
            assert np.all(p >= env.params.base_power)
            phi, _ = env.evaluate(Y, msgs)
            env.params.mode = "sq"
            q, _ = env.evaluate(Y, msgs)
            env.params.mode = "ee"
            assert np.all((q >= 0) & (q < 1))
            assert np.all(phi <= q / env.params.base_power + 1e-15)
            res = env.step((Y, msgs), rng)
            P = env.params
            for x, (lo, hi) in ((env.alpha, P.alpha), (env.beta, P.beta), (env.gain, P.gain)):
                assert x.min() >= lo and x.max() <= hi
            assert np.all(np.isfinite(res.obs))


def test_radio_channel_and_interference():
    env, rng = radio_instance(3, "sq")
    indptr, indices, h = env.H
    assert np.all((h >= 0) & (h <= 1))
    Y = rng.uniform(0, 1, size=env.n)
    _, interference = env.evaluate(Y, np.zeros(env.n))
    H = np.zeros((env.n, env.n))
    H[np.repeat(np.arange(env.n), np.diff(indptr)), indices] = h
    assert np.allclose(interference, H @ env.powers(Y, np.zeros(env.n)) + env.params.noise)


def test_radio_tape_rewards_match():
    from dvf.approx.tape import ParameterStore, Tape
    for mode in ("sq", "ee"):
        env, rng = radio_instance(4, mode)
        Y = rng.uniform(0, 1, size=env.n)
        msgs = rng.integers(0, 3, size=env.n)
        s = ParameterStore()
        s.add("Y", (env.n,), Y)
        tp = Tape(s)
        assert np.allclose(env.tape_rewards(tp.param("Y"), msgs).value, env.evaluate(Y, msgs)[0], rtol=1e-12)


def test_radio_rejects_bad_input():
    with pytest.raises(ValueError):
        RD.RadioEnv(InfluenceGraph(2, [(0, 1)]))
    g = generate("geometric", 0, n_min=5, n_max=5)
    with pytest.raises(ValueError):
        RD.RadioEnv(g, RD.RadioParams(mode="loud"))


def test_edge_rewards_examples():
    g = InfluenceGraph(3, [(0, 1), (1, 2), (2, 0), (0, 2)])
    eg = edge_transform(g, pad_sinks=True)
    A = g.adjacency()
    d = A.sum(axis=0)
    U = A @ (np.full(3, 2.0) / d)
    assert np.allclose(RD.smooth_rewards(g, np.full(3, 2.0)), U)
    r = RD.edge_rewards(g, eg, np.full(3, 2.0))
    owned = np.bincount(eg.agent_edges[:, 0], minlength=3)
    assert np.allclose(r, U[eg.agent_edges[:, 0]] / owned[eg.agent_edges[:, 0]])
    one = InfluenceGraph(1, [])
    eg1 = edge_transform(one, pad_sinks=True)
    assert eg1.n_agents == 1 and eg1.padded.tolist() == [True]
    assert RD.edge_rewards(one, eg1, np.array([1.7])).tolist() == [1.7]
    with pytest.raises(ValueError):
        RD.edge_rewards(g, edge_transform(InfluenceGraph(3, [(0, 1)])), np.ones(3))


def test_edge_reward_conservation():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        g = generate("geometric", rng, n_min=5, n_max=40, threshold=float(rng.uniform(0.1, 0.5)))
        eg = edge_transform(g, pad_sinks=True)
        R = rng.normal(size=g.n) * 10
        assert abs(RD.edge_rewards(g, eg, R).sum() - R.sum()) < 1e-10


def test_edge_reward_smoothing_locality():
    g = erdos_renyi(15, 2.5, np.random.default_rng(9))
    eg = edge_transform(g, pad_sinks=True)
    R = np.random.default_rng(10).normal(size=g.n)
    base = RD.edge_rewards(g, eg, R)
    for j in range(g.n):
        R2 = R.copy()
        R2[j] += 1.0
        changed = RD.edge_rewards(g, eg, R2)
        for e, (tail, _) in enumerate(eg.agent_edges):
            if j not in g.out_neighbors(tail):
                assert changed[e] == base[e]


def test_edge_radio_env_step():
    rng = np.random.default_rng(0)
    env = envs.make_env("radio_edge", {}, rng, batch=2)
    obs = env.reset(rng)
    assert obs.shape == (env.n, EdgeRadioEnvWidth())
    for _ in range(5):
        res = env.step(rng.random(env.n) < 0.5, rng)
        assert abs(res.rewards.sum() - res.info["node_rewards"].sum()) < 1e-10
        assert np.all((env.Y >= 0.1) & (env.Y <= 1.0))
    assert env.graph.num_instances == 2


def EdgeRadioEnvWidth():
    return RD.EdgeRadioEnv.obs_dim


# ---------------------------------------------------------------------------
# factory and traces


def test_env_params_and_factory():
    assert envs.env_params("colouring", {"p_m": 0.2})["p_m"] == 0.2
    with pytest.raises(KeyError, match="env.bogus"):
        envs.env_params("colouring", {"bogus": 1})
    with pytest.raises(ValueError):
        envs.env_params("chess")
    rng = np.random.default_rng(0)
    col = envs.make_env("colouring", {"n": 10}, rng, batch=3)
    assert col.graph.n == 30 and col.graph.num_instances == 3
    ff = envs.make_env("firefight", {}, rng, batch=2)
    assert ff.n == 40 and ff.graph.num_instances == 2
    ba = envs.make_env("colouring", {"graph": "barabasi_albert", "n": 10}, rng)
    assert ba.graph.n == 10


def test_write_trace(tmp_path):
    tr = Transition(np.zeros((2, 1)), np.array([1, 0]), np.array([0.5, 1.5]), np.zeros((2, 1)), False,
                    np.zeros(2), np.zeros(2), {"global_reward": np.float64(1.0)})
    path = tmp_path / "trace.jsonl"
    envs.write_trace(path, [tr, tr])
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == 2 and rows[1]["t"] == 1 and rows[0]["rewards"] == [0.5, 1.5]


def test_radio_size_defaults_follow_mode():
    assert envs.env_params("radio")["n_min"] == 20
    assert envs.env_params("radio", {"mode": "ee"})["n_min"] == 10
    assert envs.env_params("radio_edge", {"mode": "ee", "n_min": 30})["n_min"] == 30
