from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import all_deterministic_policies, brute_force_value, enumerate_trajectories
from opslab.envs import make_random_mdp, make_tree_hard, on_path_policy, random_policy
from opslab.mdp import (
    INFINITE_COVERAGE,
    Dataset,
    EpisodeMixture,
    Mdp,
    PolicyUndefinedError,
    TabularPolicy,
    TabularQ,
    bellman_backup,
    concentration_coefficient,
    exact_bellman_error,
    exact_policy_value,
    greedy,
    load_mdp,
    mixture_occupancy,
    occupancy,
    optimal_q,
    optimal_value,
    policy_q,
    sample_trajectories,
    save_mdp,
)


def chain(H, reward=1.0):
    return Mdp((1,) * H, 1, tuple(np.ones((1, 1, 1)) for _ in range(H - 1)),
               tuple(np.full((1, 1, 1), reward) for _ in range(H)), tuple(np.ones((1, 1, 1)) for _ in range(H)))


def random_q(mdp, seed, scale=None):
    rng = np.random.default_rng(seed)
    scale = mdp.v_max if scale is None else scale
    return TabularQ([rng.uniform(0, scale, (S, mdp.num_actions)) for S in mdp.num_states])


# ---------------------------------------------------------------------------
# Construction and validation


def test_mdp_rejects_non_distribution_kernel():
    P = np.array([[[0.5, 0.4]]])
    with pytest.raises(ValueError):
        Mdp((1, 2), 1, (P,), (np.zeros((1, 1, 1)), np.zeros((2, 1, 1))), (np.ones((1, 1, 1)), np.ones((2, 1, 1))))


def test_mdp_rejects_reward_outside_range():
    with pytest.raises(ValueError):
        Mdp((1,), 1, (), (np.full((1, 1, 1), 2.0),), (np.ones((1, 1, 1)),), r_max=1.0)


def test_v_max_is_h_times_rmax():
    m = make_random_mdp(3, 2, 5, seed=0)
    assert m.v_max == 5 * m.r_max


def test_mdp_json_roundtrip(tmp_path):
    m = make_random_mdp(3, 2, 4, seed=3)
    save_mdp(m, tmp_path / "m.json")
    m2 = load_mdp(tmp_path / "m.json")
    pi = random_policy(m, 1)
    assert exact_policy_value(m2, pi) == exact_policy_value(m, pi)


# ---------------------------------------------------------------------------
# exact_policy_value


def test_single_state_chain_value():
    m = chain(3)
    assert exact_policy_value(m, TabularPolicy([np.ones((1, 1))] * 3)) == pytest.approx(3.0, abs=1e-12)


def test_policy_value_matches_monte_carlo():
    m = make_random_mdp(2, 2, 3, seed=11)
    pi = random_policy(m, 5)
    G = sample_trajectories(m, pi, 1_000_000, seed=7).returns
    se = G.std(ddof=1) / math.sqrt(len(G))
    assert abs(G.mean() - exact_policy_value(m, pi)) < 3 * se


def test_tree_hard_target_value_is_half():
    m1, _ = make_tree_hard(2, 4, 0.2)
    assert exact_policy_value(m1, on_path_policy(m1)) == pytest.approx(0.5, abs=1e-12)


def test_policy_value_matches_trajectory_enumeration():
    m = make_random_mdp([1, 2, 2], 2, 3, seed=4, reward_support=(0.0, 1.0))
    for seed in range(5):
        pi = random_policy(m, seed)
        assert exact_policy_value(m, pi) == pytest.approx(brute_force_value(m, pi), abs=1e-12)


def test_undefined_policy_at_reachable_state_names_it():
    m = make_random_mdp(2, 2, 2, seed=0)
    t = [np.full((1, 2), 0.5), np.full((2, 2), 0.5)]
    t[1][1] = np.nan
    with pytest.raises(PolicyUndefinedError) as err:
        exact_policy_value(m, TabularPolicy(t))
    assert (err.value.h, err.value.s) == (1, 1)


def test_undefined_policy_at_unreachable_state_is_fine():
    m1, _ = make_tree_hard(2, 3, 0.2)
    pi = on_path_policy(m1)
    tables = [t.copy() for t in pi.tables]
    tables[2][1] = np.nan  # absorbing state is never reached by the on-path policy
    assert exact_policy_value(m1, TabularPolicy(tables)) == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# optimal_q


def test_single_action_optimal_q_equals_policy_q():
    m = make_random_mdp(3, 1, 4, seed=2)
    only = TabularPolicy([np.ones((S, 1)) for S in m.num_states])
    for a, b in zip(optimal_q(m).tables, policy_q(m, only).tables):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_greedy_optimal_dominates_all_deterministic_policies():
    m = make_random_mdp([3, 3, 3], 2, 3, seed=8)
    values = [exact_policy_value(m, pi) for pi in all_deterministic_policies(m)]
    assert len(values) == 2 ** 9
    v_star = exact_policy_value(m, greedy(optimal_q(m)))
    assert v_star >= max(values) - 1e-12
    assert min(abs(v_star - v) for v in values) < 1e-12


def test_tree_hard_optimal_value_is_half():
    m1, _ = make_tree_hard(3, 4, 0.1)
    assert optimal_value(m1) == pytest.approx(0.5, abs=1e-12)


def test_optimal_q_is_a_fixed_point():
    m = make_random_mdp(4, 3, 5, seed=1)
    q = optimal_q(m)
    for a, b in zip(q.tables, bellman_backup(m, q)):
        np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_greedy_optimal_beats_random_policies(seed):
    m = make_random_mdp(4, 3, 5, seed=100 + seed)
    v_star = exact_policy_value(m, greedy(optimal_q(m)))
    for k in range(100):
        assert exact_policy_value(m, random_policy(m, 1000 * seed + k)) <= v_star + 1e-12


# ---------------------------------------------------------------------------
# exact_bellman_error


def _brute_force_be(m, q, mu):
    """Double loop over (h, s, a) and then every (s', r) outcome."""
    H = m.horizon
    total = 0.0
    for h in range(H):
        for s in range(m.num_states[h]):
            for a in range(m.num_actions):
                backup = 0.0
                for rv, rp in zip(m.reward_values[h][s, a], m.reward_probs[h][s, a]):
                    if h == H - 1:
                        backup += rp * rv
                    else:
                        for sp in range(m.num_states[h + 1]):
                            backup += rp * m.transition[h][s, a, sp] * (rv + max(q.tables[h + 1][sp]))
                total += mu[h][s, a] * (q.tables[h][s, a] - backup) ** 2
    return total / H


def test_bellman_error_of_q_star_is_zero():
    m = make_random_mdp(3, 2, 4, seed=9)
    mu = occupancy(m, TabularPolicy.uniform(m))
    assert exact_bellman_error(m, optimal_q(m), mu) == pytest.approx(0.0, abs=1e-10)


def test_bellman_error_of_scaled_q_star_matches_enumeration():
    m = make_random_mdp(3, 2, 4, seed=9)
    mu = occupancy(m, TabularPolicy.uniform(m))
    q = optimal_q(m) * 100.0
    e = exact_bellman_error(m, q, mu)
    assert e > 0
    assert e == pytest.approx(_brute_force_be(m, q, mu), rel=1e-10)
    # 100 q* - T(100 q*) = 100 q* - (r + 100 P v*) = 99 r on every cell
    expected = sum(np.sum(mu[h] * (99 * m.mean_reward(h)) ** 2) for h in range(m.horizon)) / m.horizon
    assert e == pytest.approx(expected, rel=1e-10)


def test_bellman_error_random_q_matches_brute_force():
    m = make_random_mdp([2, 2], 2, 2, seed=21)
    for seed in range(5):
        q = random_q(m, seed)
        mu = occupancy(m, random_policy(m, seed))
        assert exact_bellman_error(m, q, mu) == pytest.approx(_brute_force_be(m, q, mu), abs=1e-10)


def test_bellman_error_rejects_unnormalized_mu():
    m = make_random_mdp(2, 2, 2, seed=0)
    mu = [2 * d for d in occupancy(m, TabularPolicy.uniform(m))]
    with pytest.raises(ValueError):
        exact_bellman_error(m, optimal_q(m), mu)


@given(seed=st.integers(0, 10_000))
def test_bellman_error_nonnegative(seed):
    m = make_random_mdp(3, 2, 3, seed=seed)
    mu = occupancy(m, random_policy(m, seed + 1))
    assert exact_bellman_error(m, random_q(m, seed), mu) >= 0.0


# ---------------------------------------------------------------------------
# sample_trajectories


def test_deterministic_mdp_gives_identical_trajectories():
    m1, _ = make_tree_hard(2, 4, 0.25)
    d = sample_trajectories(m1, on_path_policy(m1), 50, seed=0)
    assert (d.states == d.states[0]).all() and (d.actions == d.actions[0]).all()


def test_layer0_action_frequencies_within_3_sigma():
    m = make_random_mdp(3, 3, 2, seed=5)
    pi = random_policy(m, 2)
    n = 100_000
    d = sample_trajectories(m, pi, n, seed=1)
    p = pi.tables[0][0]
    freq = np.bincount(d.actions[:, 0], minlength=3) / n
    assert np.all(np.abs(freq - p) < 3 * np.sqrt(p * (1 - p) / n))


def test_sampling_is_bitwise_reproducible():
    m = make_random_mdp(3, 3, 4, seed=5)
    pi = random_policy(m, 2)
    a, b = sample_trajectories(m, pi, 200, seed=42), sample_trajectories(m, pi, 200, seed=42)
    for f in ("states", "actions", "rewards", "next_states", "behavior_probs"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_trajectories_chain_and_record_positive_probs():
    m = make_random_mdp(3, 3, 4, seed=5)
    d = sample_trajectories(m, random_policy(m, 2), 300, seed=0)
    assert np.array_equal(d.next_states[:, :-1], d.states[:, 1:])
    assert np.all(d.behavior_probs > 0)
    assert d.horizon == m.horizon and d.terminal[:, -1].all() and not d.terminal[:, :-1].any()


def test_episode_mixture_likelihoods_multiply_to_mixture_likelihood():
    m = make_random_mdp([1, 2, 2], 2, 3, seed=6)
    pis = [random_policy(m, 1), random_policy(m, 2)]
    d = sample_trajectories(m, EpisodeMixture(pis), 200, seed=3)
    for i in range(d.n_episodes):
        lik = [np.prod([p.tables[h][d.states[i, h], d.actions[i, h]] for h in range(3)]) for p in pis]
        assert np.prod(d.behavior_probs[i]) == pytest.approx(0.5 * sum(lik), rel=1e-10)


def test_dataset_jsonl_roundtrip(tmp_path):
    m = make_random_mdp(3, 3, 4, seed=5)
    d = sample_trajectories(m, random_policy(m, 2), 20, seed=0)
    d.to_jsonl(tmp_path / "d.jsonl")
    e = Dataset.from_jsonl(tmp_path / "d.jsonl")
    for f in ("states", "actions", "rewards", "next_states", "terminal", "behavior_probs"):
        assert np.array_equal(getattr(d, f), getattr(e, f))


def test_dataset_rejects_zero_behavior_prob():
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 1), int), np.zeros((1, 1), int), np.zeros((1, 1)), np.zeros((1, 1), int),
                np.ones((1, 1), bool), np.zeros((1, 1)))


# ---------------------------------------------------------------------------
# occupancy and concentration


def test_layer0_occupancy_is_policy():
    m = make_random_mdp(3, 3, 3, seed=2)
    pi = random_policy(m, 4)
    np.testing.assert_allclose(occupancy(m, pi)[0][0], pi.tables[0][0], atol=1e-15)


def test_occupancy_sums_to_one():
    m = make_random_mdp(4, 3, 5, seed=2)
    for d in occupancy(m, random_policy(m, 4)):
        assert abs(d.sum() - 1) < 1e-12


def test_occupancy_matches_monte_carlo():
    m = make_random_mdp(2, 2, 3, seed=12)
    pi = random_policy(m, 3)
    n = 1_000_000
    d = sample_trajectories(m, pi, n, seed=5)
    for h, occ in enumerate(occupancy(m, pi)):
        counts = np.zeros_like(occ)
        np.add.at(counts, (d.states[:, h], d.actions[:, h]), 1)
        freq = counts / n
        assert np.all(np.abs(freq - occ) <= 3 * np.sqrt(occ * (1 - occ) / n) + 1e-12)


def test_tree_hard_uniform_on_path_occupancy():
    A, H = 3, 5
    m1, _ = make_tree_hard(A, H, 0.1)
    occ = occupancy(m1, TabularPolicy.uniform(m1))
    for h in range(H):
        assert occ[h][0].sum() == pytest.approx(A ** -h, abs=1e-15)
    a_last = m1.meta["path"][-1]
    assert occ[H - 1][0, a_last] == pytest.approx(A ** -H, abs=1e-15)


def test_occupancy_telescoping_reproduces_value():
    m = make_random_mdp(4, 3, 5, seed=13)
    pi = random_policy(m, 1)
    occ = occupancy(m, pi)
    total = sum(np.sum(occ[h] * m.mean_reward(h)) for h in range(m.horizon))
    assert total == pytest.approx(exact_policy_value(m, pi), abs=1e-10)


def test_concentration_of_own_occupancy_is_one():
    m = make_random_mdp(3, 2, 4, seed=1)
    pi = random_policy(m, 1)
    assert concentration_coefficient(m, [pi], occupancy(m, pi)) == pytest.approx(1.0, abs=1e-12)


def test_concentration_of_mixture_at_most_k():
    m = make_random_mdp(3, 2, 4, seed=1)
    pis = [random_policy(m, k, deterministic=True) for k in range(4)]
    C = concentration_coefficient(m, pis, mixture_occupancy(m, pis))
    assert 1.0 <= C <= 4 + 1e-12


def test_concentration_infinite_when_optimal_uncovered():
    m1, _ = make_tree_hard(2, 3, 0.2)
    from opslab.envs import off_path_policy
    mu = occupancy(m1, off_path_policy(m1, 0))
    assert concentration_coefficient(m1, [on_path_policy(m1)], mu) == INFINITE_COVERAGE


# ---------------------------------------------------------------------------
# Error amplification (squared-norm form)


@pytest.mark.parametrize("case", range(100))
def test_suboptimality_bounded_by_bellman_error(case):
    rng = np.random.default_rng(case)
    m = make_random_mdp(int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(2, 5)), seed=case)
    q = random_q(m, case + 1)
    pi_q = greedy(q)
    pi_star = greedy(optimal_q(m))
    mu = mixture_occupancy(m, [random_policy(m, case + 2), TabularPolicy.uniform(m)])
    C = concentration_coefficient(m, [pi_q, pi_star], mu)
    gap = exact_policy_value(m, pi_star) - exact_policy_value(m, pi_q)
    bound = 2 * m.horizon * math.sqrt(C) * math.sqrt(exact_bellman_error(m, q, mu))
    assert gap <= bound + 1e-10


def test_enumeration_helper_probabilities_sum_to_one():
    m = make_random_mdp([1, 2, 2], 2, 3, seed=4)
    assert sum(p for p, _, _ in enumerate_trajectories(m, random_policy(m, 0))) == pytest.approx(1.0)
