import csv
import types

import numpy as np
import pytest
from conftest import two_agent_gmdp
from hypothesis import given, settings
from hypothesis import strategies as st

from dvf import da2c as D
from dvf import oracle
from dvf.approx import tape as T
from dvf.approx.tape import ParameterStore, Tape
from dvf.gmdp import TabularGmdp
from dvf.graph import InfluenceGraph, build_diffusion, disjoint_union, erdos_renyi


def random_instance(seed, n_max=30):
    rng = np.random.default_rng(seed)
    g = erdos_renyi(int(rng.integers(1, n_max)), 3.0, rng)
    op = build_diffusion(g, float(rng.uniform(0.1, 0.99)))
    return g, op, rng


# ---------------------------------------------------------------------------
# TD errors and advantages


def test_td_error_fixed_point_and_zero():
    op = build_diffusion(InfluenceGraph(1, []), 0.9)
    assert D.td_error(op, [1.0], np.array([9.0]), np.array([9.0]))[0] == pytest.approx(0.0, abs=1e-15)
    op = build_diffusion(erdos_renyi(5, 2.0, np.random.default_rng(0)), 0.5)
    assert np.array_equal(D.td_error(op, np.zeros(5), np.zeros(5), np.zeros(5)), np.zeros(5))
    with pytest.raises(ValueError):
        D.td_error(op, np.zeros(4), np.zeros(5), np.zeros(5))


def test_td_error_is_bellman_residual():
    for seed in range(10):
        g, op, rng = random_instance(seed)
        S = 4
        perm = rng.permutation(S)
        P = np.eye(S)[perm]
        R = rng.normal(size=(S, g.n))
        V = rng.normal(size=(S, g.n))
        residual = oracle.bellman_apply(P, R, op, V) - V
        for s in range(S):
            assert np.allclose(D.td_error(op, R[s], V[s], V[perm[s]]), residual[s], atol=1e-12)


def test_distributed_target_matches_centralised():
    for seed in range(20):
        g, op, rng = random_instance(seed)
        R, v = rng.normal(size=g.n), rng.normal(size=g.n)
        central = op.apply(R + v)
        for i in range(g.n):
            assert D.distributed_td_target(g, op.gamma, R, v, i) == pytest.approx(central[i], abs=1e-12)
    assert D.distributed_td_target(InfluenceGraph(1, []), 0.7, [2.0], [1.0], 0) == pytest.approx(0.7 * 3.0)
    g = InfluenceGraph(3, [(0, 1), (1, 0)])
    # agent 2 has only its self-loop and in-degree 1
    assert D.distributed_td_target(g, 0.5, [1.0, 1.0, 4.0], [0.0, 0.0, 2.0], 2) == pytest.approx(3.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_one_step_advantage_is_td_error_bitwise(seed):
    g, op, rng = random_instance(seed, 60)
    R, v, v1 = rng.normal(size=(3, g.n)) * 5
    adv = D.n_step_advantage(D.AdvantageConfig(1), op, R[None], v, v1)
    assert np.array_equal(adv, D.td_error(op, R, v, v1))


def test_gamma_scalar_formula():
    g, op, rng = random_instance(3)
    R, v, v1 = rng.normal(size=(3, g.n))
    one = D.n_step_advantage(D.AdvantageConfig(1, "gamma_scalar"), op, R[None], v, v1)
    assert np.allclose(one, R + op.gamma * v1 - v, atol=1e-14)
    window = rng.normal(size=(3, g.n))
    three = D.n_step_advantage(D.AdvantageConfig(3, "gamma_scalar"), op, window, v, v1)
    expect = window[0] + op.gamma * window[1] + op.gamma ** 2 * window[2] + op.gamma ** 3 * v1 - v
    assert np.allclose(three, expect, atol=1e-12)


def test_gamma_operator_multi_step_matches_matrix_powers():
    g, op, rng = random_instance(4)
    G = op.dense()
    window = rng.normal(size=(4, g.n))
    v, vw = rng.normal(size=(2, g.n))
    expect = sum(np.linalg.matrix_power(G, k + 1) @ window[k] for k in range(4))
    expect = expect + np.linalg.matrix_power(G, 4) @ vw - v
    got = D.n_step_advantage(D.AdvantageConfig(4), op, window, v, vw)
    assert np.allclose(got, expect, atol=1e-12)


def test_advantage_zero_and_errors():
    g, op, _ = random_instance(5)
    z = np.zeros(g.n)
    for mode in ("gamma_operator", "gamma_scalar"):
        assert np.array_equal(D.n_step_advantage(D.AdvantageConfig(2, mode), op, np.zeros((2, g.n)), z, z), z)
    with pytest.raises(ValueError):
        D.n_step_advantage(D.AdvantageConfig(2), op, np.zeros((3, g.n)), z, z)
    with pytest.raises(ValueError):
        D.AdvantageConfig(0)
    with pytest.raises(ValueError):
        D.AdvantageConfig(1, "gamma_matrix")


# ---------------------------------------------------------------------------
# baseline targets


def pair_env():
    # 0 -> 1 plus self-loops; one instance
    return types.SimpleNamespace(graph=InfluenceGraph(2, [(0, 1)]))


def test_baseline_targets_by_hand():
    env, gamma = pair_env(), 0.5
    op = build_diffusion(env.graph, gamma)
    R, v = np.array([1.0, 3.0]), np.array([2.0, 4.0])
    assert D.critic_target("IA2C", env, op, gamma, R, v).tolist() == [2.0, 5.0]
    assert D.critic_target("NA2C", env, op, gamma, R, v).tolist() == [5.0, 5.0]
    maa = D.critic_target("MAA2C", env, op, gamma, R, np.array([6.0]))
    assert maa.tolist() == [2.0 + 3.0]
    # Gamma_ij = gamma A_ij / d_j with in-degrees d = (1, 2): agent 0 sees (R + v)_0 and half of (R + v)_1
    assert np.allclose(D.critic_target("DVF", env, op, gamma, R, v), [0.5 * (3.0 + 3.5), 0.5 * 3.5])


def test_shifted_baseline_targets():
    env, gamma = pair_env(), 0.5
    op = build_diffusion(env.graph, gamma)
    R, v = np.array([1.0, 3.0]), np.array([2.0, 4.0])
    assert np.allclose(D.critic_target("IA2C", env, op, gamma, R, v, shift=True), [1.5, 3.5])
    assert np.allclose(D.critic_target("NA2C", env, op, gamma, R, v, shift=True), [3.0, 3.5])
    assert np.allclose(D.critic_target("MAA2C", env, op, gamma, R, np.array([6.0]), shift=True), [4.0])
    assert np.array_equal(D.critic_target("DVF", env, op, gamma, R, v, shift=True),
                          D.critic_target("DVF", env, op, gamma, R, v))


def test_reinforce_advantage_and_returns():
    assert np.allclose(D.discounted_returns(0.5, [1.0, 2.0, 4.0]), [3.0, 4.0, 4.0])
    env = types.SimpleNamespace(graph=InfluenceGraph(2, [(0, 1)]))
    op = build_diffusion(env.graph, 0.5)
    rewards = np.array([[0.0, 2.0], [2.0, 4.0]])
    cfg = D.TrainConfig(gamma=0.5)
    adv = D.advantages("REIN", env, op, cfg, rewards, [], [])
    assert [a.tolist() for a in adv] == [[2.5, 2.5], [3.0, 3.0]]
    cfg = D.TrainConfig(gamma=0.5, shift_discount=True)
    adv = D.advantages("REIN", env, op, cfg, rewards, [], [])
    assert [a.tolist() for a in adv] == [[1.25, 1.25], [1.5, 1.5]]


def test_maa2c_broadcast_over_instances():
    g = disjoint_union([InfluenceGraph(2, []), InfluenceGraph(1, [])])
    env = types.SimpleNamespace(graph=g)
    op = build_diffusion(g, 0.5)
    cfg = D.TrainConfig(gamma=0.5)
    adv = D.advantages("MAA2C", env, op, cfg, np.array([[1.0, 3.0, 5.0]]), [np.array([0.0, 1.0])],
                       [np.array([2.0, 2.0])])
    assert adv[0].tolist() == [3.0, 3.0, 5.0]


# ---------------------------------------------------------------------------
# critic updates


def tabular(S=3, n=2, init=None):
    return D.TabularStateCritic(S, n, init=init)


def forward_state(critic, s):
    return lambda tp: critic.net(tp, s)


def test_critic_step_zero_delta_keeps_parameters():
    critic = tabular(init=np.arange(6.0).reshape(3, 2))
    before = critic.store.values.copy()
    loss, ok, v = D.critic_step(critic.store, forward_state(critic, 1), [2.0, 3.0], 0.1)
    assert ok and loss == 0.0 and v.tolist() == [2.0, 3.0]
    assert np.array_equal(critic.store.values, before)
    loss, ok, _ = D.critic_step(critic.store, forward_state(critic, 1), [np.inf, 3.0], 0.1)
    assert not ok and np.array_equal(critic.store.values, before)


def test_critic_loss_gradient_by_finite_differences():
    critic = tabular(init=np.random.default_rng(0).normal(size=(3, 2)))
    target = np.array([0.3, -1.0])
    _, grad, _ = D.critic_loss_grad(critic.store, forward_state(critic, 2), target)
    vals = critic.store.values
    for k in range(len(vals)):
        old = vals[k]
        vals[k] = old + 1e-6
        up = np.mean((target - critic.store.values.reshape(3, 2)[2]) ** 2)
        vals[k] = old - 1e-6
        down = np.mean((target - critic.store.values.reshape(3, 2)[2]) ** 2)
        vals[k] = old
        assert grad[k] == pytest.approx((up - down) / 2e-6, abs=1e-7)


def test_semi_gradient_differs_from_full_gradient():
    critic = tabular(init=np.random.default_rng(1).normal(size=(3, 2)))
    op = build_diffusion(InfluenceGraph(2, [(0, 1), (1, 0)]), 0.9)
    R = np.array([1.0, -0.5])
    v_next = critic_values_at(critic, 2)
    _, semi, _ = D.critic_loss_grad(critic.store, forward_state(critic, 0), op.apply(R + v_next))
    full = D.full_gradient_td_grad(critic.store, forward_state(critic, 0), forward_state(critic, 2), op, R)
    rows = critic.store.values.reshape(3, 2)
    assert not np.allclose(semi, full)
    # the bootstrap row receives no gradient in the semi-gradient update
    assert np.array_equal(semi.reshape(3, 2)[2], np.zeros(2))
    assert np.allclose(semi.reshape(3, 2)[0], full.reshape(3, 2)[0])
    # perturbing the bootstrap path leaves the semi-gradient unchanged when the target is held
    rows[2] += 1.0
    _, semi2, _ = D.critic_loss_grad(critic.store, forward_state(critic, 0), op.apply(R + v_next))
    assert np.array_equal(semi, semi2)


def critic_values_at(critic, s):
    return critic.net(Tape(critic.store, record=False), s).value.copy()


def test_tabular_td_converges_to_exact_dvf():
    env = two_agent_gmdp(seed=0)
    probs = np.full((3, 2, 2), 0.5)
    probs[:, 0] = [0.3, 0.7]
    from dvf.gmdp import TabularPolicy
    P, R = env.markov_chain(TabularPolicy(probs))
    op = build_diffusion(env.graph, 0.9)
    exact = oracle.dvf_exact_markov(P, R, op, tol=1e-13)
    critic = tabular()
    rng = np.random.default_rng(0)
    table = critic.store.values.reshape(3, 2)
    for k in range(100_000):
        s = int(rng.integers(3))
        # the batch for state s is the full expected transition
        target = op.apply(R[s] + P[s] @ table)
        D.critic_step(critic.store, forward_state(critic, s), target, 0.5)
        if k % 1000 == 999 and np.abs(table - exact).max() < 1e-4:
            break
    assert np.abs(table - exact).max() < 1e-3


# ---------------------------------------------------------------------------
# actor updates


def bandit_gain(store, adv, c_r=1.0, c_h=0.0):
    tape = Tape(store)
    logp = T.segment_log_softmax(tape.param("logits"), np.zeros(2, dtype=np.int64), 1)
    probs = np.exp(logp.value)
    # exact expectation of the score-function surrogate over both arms
    weighted = T.mul(logp, probs * adv)
    ent = T.neg(T.total(T.mul(T.exp(logp), logp)))
    gain = D.surrogate([weighted], [np.ones(2)], [ent], c_r, c_h)
    return tape, gain, probs


def test_zero_advantage_leaves_actor_unchanged():
    store = ParameterStore()
    store.add("logits", (2,), np.array([0.2, -0.4]))
    before = store.values.copy()
    tape, gain, _ = bandit_gain(store, np.zeros(2))
    value, ok = D.actor_step(store, tape, gain, 0.5)
    assert ok and value == 0.0 and np.array_equal(store.values, before)


def test_bandit_ascent_is_monotone():
    store = ParameterStore()
    store.add("logits", (2,), np.zeros(2))
    payoff = np.array([1.0, 0.0])
    best = []
    for _ in range(100):
        probs = np.exp(T.segment_log_softmax(Tape(store, record=False).param("logits"),
                                             np.zeros(2, dtype=np.int64), 1).value)
        tape, gain, probs = bandit_gain(store, payoff - probs @ payoff)
        best.append(probs[0])
        D.actor_step(store, tape, gain, 0.5)
    assert np.all(np.diff(best) > 0) and best[-1] > 0.9


def test_entropy_drives_toward_uniform():
    store = ParameterStore()
    store.add("logits", (2,), np.array([2.0, -1.0]))
    for _ in range(300):
        tape, gain, probs = bandit_gain(store, np.zeros(2), c_r=0.0, c_h=1.0)
        D.actor_step(store, tape, gain, 0.5)
    assert abs(probs[0] - 0.5) < 1e-3


def test_surrogate_scale_and_extras():
    s = ParameterStore()
    s.add("x", (2,), np.array([1.0, 2.0]))
    tp = Tape(s)
    x = tp.param("x")
    g = D.surrogate([x], [np.array([3.0, 1.0])], [x], 0.5, 0.1, extras=[T.total(x)], scale=0.25)
    assert g.value == pytest.approx(0.25 * (0.5 * 5.0 + 0.1 * 3.0 + 3.0))


def test_optimisers():
    x = np.array([1.0, -1.0])
    D.Sgd().update(x, np.array([1.0, 2.0]), 0.1)
    assert np.allclose(x, [0.9, -1.2])
    adam = D.Adam(2)
    y = np.zeros(2)
    adam.update(y, np.array([0.5, -3.0]), 0.01)
    # bias correction makes the first step lr * sign(g)
    assert np.allclose(y, [-0.01, 0.01], rtol=1e-6)
    adam.update(y, np.array([0.5, -3.0]), 0.01, ascend=True)
    assert np.allclose(y, 0.0, atol=1e-9)


# ---------------------------------------------------------------------------
# training loop


def cycle_gmdp():
    """Action-independent deterministic cycle 0 -> 1 -> 2 -> 0; the DVF does not depend on the policy."""
    g = InfluenceGraph(2, [(0, 1), (1, 0)])
    P = np.zeros((3, 4, 3))
    for s in range(3):
        P[s, :, (s + 1) % 3] = 1.0
    R = np.zeros((3, 4, 2))
    R[:] = np.array([[1.0, 0.0], [0.5, -1.0], [0.0, 2.0]])[:, None, :]
    return TabularGmdp(g, 2, P, R)


def small_cfg(**kw):
    base = dict(iterations=3, M=4, batch=1, gamma=0.8, d_x=4, hidden=8, c_r=0.1, c_v=0.01)
    base.update(kw)
    return D.TrainConfig(**base)


def test_train_zero_iterations():
    records, actor, _ = D.train(lambda rng: cycle_gmdp(), small_cfg(iterations=0))
    assert records == [] and actor is not None


def test_oracle_initialised_critic_has_zero_td_loss():
    env = cycle_gmdp()
    P = np.roll(np.eye(3), 1, axis=1)
    op = build_diffusion(env.graph, 0.8)
    exact = oracle.dvf_exact_markov(P, env.rewards[:, 0], op, tol=1e-14)
    critic = D.TabularStateCritic(3, 2, init=exact)
    records, _, _ = D.train(lambda rng: cycle_gmdp(), small_cfg(iterations=2), critic=critic)
    assert records[0].td_loss < 1e-12
    assert not records[0].flagged


@pytest.mark.parametrize("kind", D.CRITIC_KINDS)
def test_train_is_deterministic(kind):
    run = lambda: D.train(lambda rng: cycle_gmdp(), small_cfg(), kind=kind, seed=4)
    a, actor_a, _ = run()
    b, actor_b, _ = run()
    assert a == b
    assert np.array_equal(actor_a.store.values, actor_b.store.values)
    assert all(np.isfinite([r.reward, r.td_loss, r.entropy, r.messages]).all() for r in a)
    with pytest.raises(ValueError):
        D.train(lambda rng: cycle_gmdp(), small_cfg(), kind="PPO")


def test_cm_annealing_schedule():
    cfg = D.TrainConfig(iterations=10)
    assert [D._cm_scale(cfg, it) for it in (0, 2, 5, 9)] == [1.0, 0.6, 0.0, 0.0]
    assert D._cm_scale(D.TrainConfig(iterations=10, anneal_cm=False), 9) == 1.0


def test_config_validation():
    with pytest.raises(KeyError, match="train.bogus"):
        D.config_from_dict({"bogus": 1})
    assert D.config_from_dict({"advantage": {"W": 3}}).advantage.W == 3
    for bad in (dict(c_j=0), dict(c_v=-1), dict(c_h=-1), dict(gamma=1.0), dict(M=0), dict(optimizer="rmsprop")):
        with pytest.raises(ValueError):
            D.TrainConfig(**bad)


def test_write_records(tmp_path):
    recs = [D.TrainRecord(0, 0.5, 0.1, 0.6, 2.0), D.TrainRecord(1, 0.25, 0.0, 0.5, 1.0, True)]
    D.write_records(recs, tmp_path / "r.csv", tmp_path / "r.jsonl")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["iter", "reward", "td_loss", "entropy", "messages"]
    assert rows[2] == ["1", "0.25", "0.0", "0.5", "1.0"]
    assert '"flagged": true' in (tmp_path / "r.jsonl").read_text().splitlines()[1]
