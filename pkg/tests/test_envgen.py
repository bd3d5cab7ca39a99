import numpy as np
import pytest
from hypothesis import given, strategies as st

from bwdq.envgen import (GradedPolicy, GridMDP, PointMassEnv, exact_q_beta, generate_dataset, graded_behavior_table,
                         normalize_return, random_grid_mdp, reference_returns, rollout, value_iteration_q)
from bwdq.errors import InvalidArgument


def test_expert_at_goal_stays_put():
    env = PointMassEnv(noise_std=0.0)
    traj = rollout(env, lambda s, r: env.expert_action(s), 20, np.random.default_rng(0), start=np.zeros(2))
    assert traj.episode_return == pytest.approx(0.0, abs=1e-12)


def test_deterministic_rollouts_repeat():
    env = PointMassEnv(noise_std=0.0)
    pol = lambda s, r: env.expert_action(s)
    a = rollout(env, pol, 30, np.random.default_rng(5))
    b = rollout(env, pol, 30, np.random.default_rng(5))
    assert np.array_equal(a.states, b.states) and np.array_equal(a.rewards, b.rewards)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_worse_than_expert(seed):
    env = PointMassEnv()
    rets = {}
    for q in (0.0, 1.0):
        rng = np.random.default_rng(seed)
        rets[q] = np.mean([rollout(env, GradedPolicy(q, env), env.max_steps, rng).episode_return
                           for _ in range(100)])
    assert rets[0.0] < rets[1.0]


@given(st.integers(0, 1000))
def test_states_stay_in_box(seed):
    env = PointMassEnv(dims=3, noise_std=0.5)
    t = rollout(env, GradedPolicy(0.0, env), 40, np.random.default_rng(seed))
    assert np.all(np.abs(t.next_states) <= env.bound)


def test_quality_zero_actions_look_random():
    env = PointMassEnv()
    ds = generate_dataset(env, [0.0], 5000, 2, np.random.default_rng(0))[0]
    assert np.all(np.abs(ds.actions.mean(axis=0)) < 0.05)


def test_dataset_sizes_and_meta():
    env = PointMassEnv()
    sets = generate_dataset(env, [0.0, 1.0], 100, 3, np.random.default_rng(1))
    assert [len(d) for d in sets] == [100, 100]
    assert sets[1].meta["quality"] == "1.0"
    assert len(sets[1].meta["policy_seeds"].split(",")) == 3
    assert not sets[0].has_next[sets[0].traj_starts[1:] - 1].any()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mean_reward_increases_with_quality(seed):
    sets = generate_dataset(PointMassEnv(), [0.0, 0.5, 1.0], 10_000, 3, np.random.default_rng(seed))
    means = [d.rewards.mean() for d in sets]
    assert means[0] < means[1] < means[2]


def test_bad_quality_rejected():
    with pytest.raises(InvalidArgument):
        generate_dataset(PointMassEnv(), [1.5], 10, 1, np.random.default_rng(0))


def test_exact_q_gamma_zero_is_reward():
    mdp = random_grid_mdp(discount=0.0, seed=3)
    beh = graded_behavior_table(mdp, 0.3)
    assert np.array_equal(exact_q_beta(mdp, beh), mdp.reward_table)


def test_exact_q_geometric_series():
    mdp = GridMDP(np.ones((1, 1, 1)), np.ones((1, 1)), discount=0.9)
    assert exact_q_beta(mdp, np.ones((1, 1)))[0, 0] == pytest.approx(10.0, rel=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_exact_q_matches_value_iteration_and_bellman(seed):
    mdp = random_grid_mdp(seed=seed)
    beh = graded_behavior_table(mdp, 0.5)
    q = exact_q_beta(mdp, beh)
    np.testing.assert_allclose(q, value_iteration_q(mdp, beh), atol=1e-8)
    resid = q - (mdp.reward_table + mdp.discount * mdp.transition_table @ (beh * q).sum(1))
    assert np.max(np.abs(resid)) <= 1e-10


def test_grid_rows_are_distributions():
    mdp = random_grid_mdp(seed=9)
    assert np.allclose(mdp.transition_table.sum(-1), 1.0, atol=1e-12)


def test_exact_q_rejects_bad_behavior():
    mdp = random_grid_mdp()
    with pytest.raises(InvalidArgument):
        exact_q_beta(mdp, np.full((5, 2), 0.3))


def test_normalization_endpoints():
    env = PointMassEnv()
    rand, exp = reference_returns(env)
    assert normalize_return(rand, rand, exp) == pytest.approx(0.0)
    assert normalize_return(exp, rand, exp) == pytest.approx(100.0)
    assert rand < exp
