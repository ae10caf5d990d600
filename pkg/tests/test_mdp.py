import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bailout.copula import stream
from bailout.mdp import (EpisodeOver, InvestmentAction, MdpConfig, MdpState, cumulative_reward,
                         enumerate_actions, expected_one_step_reward, force_defaults, invest,
                         risky_nodes, simulate_episode, step, transition_outcomes,
                         transition_prob, zero_action)
from bailout.oracle import random_toy

from conftest import example_one

KK_LABELS = ["0@0",
             "4@05", "4@10", "4@15", "4@20",
             "8@05", "8@10", "8@15", "8@20",
             "10@05", "10@10", "10@15", "10@20",
             "0@05", "0@10", "0@15", "0@20"]


def test_kite_action_set(kk_state, cfg):
    acts = enumerate_actions(kk_state, cfg)
    assert [a.label for a in acts] == KK_LABELS
    assert acts[0].is_zero
    a = acts[4]
    assert a.deltaJ[3] == pytest.approx(0.02 * kk_state.network.W[3])
    assert a.total == pytest.approx(a.deltaJ[3])
    allr = acts[-1]
    assert np.flatnonzero(allr.deltaJ).tolist() == [3, 7, 9]


def test_risky_nodes(kk_state, cfg):
    assert risky_nodes(kk_state, cfg).tolist() == [3, 7, 9]


def test_single_risky_node_has_no_all_action(cfg):
    s0, c = random_toy(0, 2, 2)
    net = s0.network
    acts = enumerate_actions(s0, c)
    n_risky = len(risky_nodes(s0, c))
    levels = len(c.levels_bp) - 1
    expect = 1 + n_risky * levels + (levels if n_risky > 1 else 0)
    assert len(acts) == expect
    assert len({a.label for a in acts}) == len(acts)
    assert net.n == 2


def test_no_actions_without_risky_nodes(cfg):
    s = MdpState(example_one(sigma=0.001), frozenset(), 0, 3)
    assert [a.label for a in enumerate_actions(s, cfg)] == ["0@0"]


def test_config_validation():
    with pytest.raises(ValueError):
        MdpConfig(gamma=1.0)
    with pytest.raises(ValueError):
        MdpConfig(levels_bp=(50, 100))
    with pytest.raises(ValueError):
        MdpConfig(targeting="nobody")
    assert MdpConfig(levels_bp=(100, 0, 100)).levels_bp == (0, 100)


def test_terminal_state_rejects_step(kk):
    s = MdpState(kk, frozenset(), 7, 7)
    with pytest.raises(EpisodeOver):
        step(s, zero_action(kk.n), stream(0))


def test_investing_in_defaulted_node_fails(kk):
    from bailout.network import InvestmentError

    s = MdpState(kk, frozenset({4}), 1, 7)
    dJ = np.zeros(kk.n)
    dJ[4] = 1.0
    with pytest.raises(InvestmentError):
        invest(s, InvestmentAction(dJ, "5@x", "single", 4, 100))


def test_example_one_transition():
    # three banks, bank 3 already gone, exposure 1 between each pair
    net = example_one(alpha=0.01)
    s = MdpState(net, frozenset({2}), 0, 3)
    outs = transition_outcomes(s, zero_action(3))
    assert len(outs) == 4
    assert sum(p for p, *_ in outs) == pytest.approx(1.0, abs=1e-12)
    for p, D, r, nxt in outs:
        assert nxt.t == 1 and nxt.defaulted == s.defaulted | D
        assert r == pytest.approx(-0.01 * 100 * len(D))
        if D == {0}:
            assert nxt.network.W[1] == 99 and nxt.network.E[1] == 2


def test_expected_reward_matches_outcomes(kk):
    s0, c = random_toy(4, 3, 2)
    for a in enumerate_actions(s0, c):
        outs = transition_outcomes(s0, a)
        exact = sum(p * r for p, _, r, _ in outs)
        assert exact == pytest.approx(expected_one_step_reward(s0, a), rel=1e-9, abs=1e-15)


def test_expected_reward_monte_carlo(kk_state):
    a = zero_action(kk_state.network.n)
    rng = stream(9)
    n = 20000
    rewards = np.array([step(kk_state, a, rng).reward for _ in range(n)])
    exact = expected_one_step_reward(kk_state, a)
    assert abs(rewards.mean() - exact) <= 4 * rewards.std() / math.sqrt(n)


def test_step_frequencies_match_exact_probabilities():
    s0, c = random_toy(7, 3, 2)
    a = zero_action(3)
    exact = {D: p for p, D, _, _ in transition_outcomes(s0, a)}
    rng = stream(1)
    n = 40000
    counts = {}
    for _ in range(n):
        D = step(s0, a, rng).defaults_this_step
        counts[D] = counts.get(D, 0) + 1
    for D, p in exact.items():
        f = counts.get(D, 0) / n
        assert abs(f - p) <= 4 * math.sqrt(p * (1 - p) / n) + 1e-4


def test_transition_prob_lookup():
    s0, c = random_toy(2, 3, 3)
    a = enumerate_actions(s0, c)[-1]
    for p, D, _, nxt in transition_outcomes(s0, a):
        assert transition_prob(s0, a, nxt) == p
    assert transition_prob(s0, a, s0) == 0.0


@given(seed=st.integers(0, 5000), n=st.integers(1, 3))
def test_transition_probabilities_form_distribution(seed, n):
    s0, c = random_toy(seed, n, 2)
    for a in enumerate_actions(s0, c):
        outs = transition_outcomes(s0, a)
        probs = [p for p, *_ in outs]
        assert min(probs) >= -1e-12
        assert sum(probs) == pytest.approx(1.0, abs=1e-9)
        assert len(outs) == 2 ** n


@given(seed=st.integers(0, 5000))
def test_liabilities_conserved_along_paths(seed):
    s0, c = random_toy(seed, 3, 2)
    B0 = s0.network.B.copy()
    rng = stream(seed)
    s = s0
    while s.t < s.horizon:
        acts = enumerate_actions(s, c)
        a = acts[int(rng.integers(len(acts)))]
        s = step(s, a, rng).next_state
        alive = s.alive
        np.testing.assert_allclose(s.network.B[alive], B0[alive], atol=1e-9)
        assert (s.network.J >= 0).all()


def test_forced_defaults_propagate():
    net = example_one()
    s = force_defaults(MdpState(net, frozenset(), 0, 3), {0})
    assert s.defaulted == {0}
    assert s.network.E[1] == 2 and s.network.E[2] == 2
    assert force_defaults(s, {0}) is s


def test_forced_node_not_investable():
    from bailout.network import BankNode, FinancialNetwork

    nodes = [BankNode(1, "1", 100, 3, sigma=0.013), BankNode(2, "2", 100, 3, sigma=0.013)]
    w = np.array([[0.0, 0.0], [4.0, 0.0]])
    s = force_defaults(MdpState(FinancialNetwork.from_nodes(nodes, w, np.eye(2)), frozenset(),
                                0, 3), {0})
    assert not s.active[1]
    assert [a.label for a in enumerate_actions(s, MdpConfig())] == ["0@0"]


def test_cumulative_reward():
    assert cumulative_reward([-1.0, -1.0, -1.0], 0.5) == -1.75
    assert cumulative_reward([], 0.9) == 0.0


def test_simulate_episode_log(kk_state, tmp_path):
    traj, total = simulate_episode(kk_state, lambda s: zero_action(s.network.n), stream(3))
    assert len(traj.steps) == 7
    assert [r["step"] for r in traj.steps] == list(range(7))
    assert total == pytest.approx(cumulative_reward(traj.rewards, 0.98))
    traj.write_jsonl(tmp_path / "t.jsonl")
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == 7


def test_state_key_ignores_tiny_noise(kk):
    a = MdpState(kk, frozenset(), 0, 7)
    b = MdpState(kk.derive(W=kk.W + 1e-12), frozenset(), 0, 7)
    assert a.key() == b.key()
    assert MdpState(kk.derive(W=kk.W + 1e-6), frozenset(), 0, 7).key() != a.key()


@given(seed=st.integers(0, 5000), n=st.integers(1, 3))
def test_trajectory_invariants(seed, n):
    # rewards never positive, the defaulted set only grows, injections land in J
    s0, c = random_toy(seed, n, 3)
    rng = stream(seed, 5)
    s = s0
    while s.t < s.horizon:
        acts = enumerate_actions(s, c)
        a = acts[int(rng.integers(len(acts)))]
        out = step(s, a, rng)
        nxt = out.next_state
        assert out.reward <= 0.0
        assert s.defaulted <= nxt.defaulted
        assert nxt.defaulted - s.defaulted == out.defaults_this_step
        survivors = nxt.alive
        np.testing.assert_allclose(nxt.network.J[survivors],
                                   (s.network.J + a.deltaJ)[survivors], atol=1e-12)
        bar = invest(s, a)
        np.testing.assert_allclose(bar.network.B, s.network.B, atol=1e-12)
        s = nxt


def test_step_is_deterministic_under_seed(kk_state, cfg):
    a = enumerate_actions(kk_state, cfg)[-1]
    x = [step(kk_state, a, stream(4, k)).defaults_this_step for k in range(50)]
    y = [step(kk_state, a, stream(4, k)).defaults_this_step for k in range(50)]
    assert x == y
