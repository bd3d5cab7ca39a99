import numpy as np
import pytest
from hypothesis import given, strategies as st

from bwdq.approx import Network, forward, init_network
from bwdq.bwd import (BwdConfig, PotentialPair, bwd_cost, discrete_dual, dual_objective, dual_terms, estimate_bwd,
                      fit_table_dual, init_potentials, load_potentials, save_potentials, sinkhorn_reference,
                      train_bwd)
from bwdq.critic import Critic, q_value
from bwdq.dataset import RandomPolicy, Standardizer
from bwdq.errors import InvalidArgument, NumericError

from conftest import make_dataset


def const_net(d_in, value):
    return Network(np.zeros((2, d_in)), np.zeros(2), np.zeros((1, 2)), np.array([value]))


def rand_critic(obs_dim=3, act_dim=2, seed=0, hidden=8):
    q = init_network(obs_dim + act_dim, hidden, 1, seed)
    q.b1[:] = np.random.default_rng(seed).normal(size=hidden)
    return Critic(q, q.copy(), act_dim, trained=True)


def zero_critic(obs_dim=3, act_dim=2):
    q = Network(np.zeros((4, obs_dim + act_dim)), np.zeros(4), np.zeros((1, 4)), np.zeros(1))
    return Critic(q, q.copy(), act_dim, trained=True)


def kernel_sinkhorn(cost, mu, nu, eps, iters=20_000):
    """Plain scaling-vector form: P = diag(u) K diag(v), K = exp(-C/eps)."""
    k = np.exp(-cost / eps)
    u = np.ones_like(mu)
    v = np.ones_like(nu)
    for _ in range(iters):
        u = mu / (k @ v)
        v = nu / (k.T @ u)
    plan = u[:, None] * k * v[None, :]
    kl = np.sum(plan * np.log(plan / np.outer(mu, nu)))
    return np.sum(plan * cost) + eps * kl, plan


# -- cost ------------------------------------------------------------------------------------------

def test_cost_identical_actions_is_scaled_q():
    c = rand_critic()
    rng = np.random.default_rng(0)
    s, a = rng.normal(size=(5, 3)), rng.uniform(-1, 1, size=(5, 2))
    np.testing.assert_array_equal(bwd_cost(c, s, a, a, 0.3), 0.3 * q_value(c, s, a))


def test_cost_opposite_unit_action():
    a = np.array([0.6, 0.8])
    assert bwd_cost(zero_critic(), np.zeros(3), a, -a, 0.5) == pytest.approx(-4 * 0.5)


def test_cost_matches_straight_line():
    c = rand_critic(seed=4)
    rng = np.random.default_rng(1)
    s, a, ar = rng.normal(size=(4, 3)), rng.uniform(-1, 1, (4, 2)), rng.uniform(-1, 1, (4, 3, 2))
    got = bwd_cost(c, s, a, ar, 0.7)
    for i in range(4):
        for k in range(3):
            q = forward(c.q_net, np.concatenate([s[i], ar[i, k]])[None])[0, 0]
            d = ar[i, k] - a[i]
            assert got[i, k] == pytest.approx(0.7 * (q - d @ d), rel=1e-12, abs=1e-12)


def test_cost_shape_mismatch():
    with pytest.raises(InvalidArgument):
        bwd_cost(rand_critic(), np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((3, 2)))


# -- dual objective --------------------------------------------------------------------------------

@pytest.mark.parametrize("u,eps", [(0.0, 1.0), (0.4, 1.0), (-1.0, 0.5), (0.3, 0.2)])
def test_constant_potentials_zero_cost(u, eps):
    pot = PotentialPair(const_net(5, u / 2), const_net(5, u / 2), eps)
    rng = np.random.default_rng(0)
    res = dual_objective(pot, None, rng.normal(size=(6, 3)), np.zeros((6, 2)), np.zeros((6, 4, 2)),
                         cost=np.zeros((6, 4)))
    assert res.value == pytest.approx(u - eps * np.exp(u / eps), rel=1e-12)


def test_zero_potentials_constant_cost():
    pot = PotentialPair(const_net(5, 0.0), const_net(5, 0.0), 0.7)
    res = dual_objective(pot, None, np.zeros((3, 3)), np.zeros((3, 2)), np.zeros((3, 2, 2)),
                         cost=np.full((3, 2), 1.3))
    assert res.value == pytest.approx(-0.7 * np.exp(-1.3 / 0.7), rel=1e-12)


def test_dual_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    std = Standardizer(rng.normal(size=3), rng.uniform(0.5, 2, 3))
    pot = PotentialPair(init_network(5, 8, 1, 1), init_network(5, 8, 1, 2), 0.8, 1.0, std)
    s, a, ar = rng.normal(size=(6, 3)), rng.uniform(-1, 1, (6, 2)), rng.uniform(-1, 1, (6, 3, 2))
    cost = rng.normal(size=(6, 3))
    res = dual_objective(pot, None, s, a, ar, cost=cost)
    h = 1e-6
    for net, grads in ((pot.g_net, res.grad_g), (pot.f_net, res.grad_f)):
        for p, g in zip(net.params(), grads.params()):
            for j in range(p.size):
                old = p.flat[j]
                p.flat[j] = old + h
                vp = dual_objective(pot, None, s, a, ar, cost=cost).value
                p.flat[j] = old - h
                vm = dual_objective(pot, None, s, a, ar, cost=cost).value
                p.flat[j] = old
                fd = (vp - vm) / (2 * h)
                assert abs(fd - g.flat[j]) <= 1e-3 * max(abs(fd), abs(g.flat[j]), 1e-6)


def test_exponent_guard_counts_and_rejects_non_finite():
    t = dual_terms(np.array([100.0]), np.zeros((1, 2)), np.zeros((1, 2)), 1.0)
    assert t.n_clipped == 2 and np.isfinite(t.value)
    with pytest.raises(NumericError):
        dual_terms(np.array([np.inf]), np.zeros((1, 2)), np.zeros((1, 2)), 1.0)


@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_pairs_share_their_state_bitwise(b, k, seed):
    rng = np.random.default_rng(seed)
    std = Standardizer(rng.normal(size=3), rng.uniform(0.1, 3, 3))
    pot = PotentialPair(init_network(5, 4, 1, 0), init_network(5, 4, 1, 1), 1.0, 1.0, std)
    g_in, f_in = pot.inputs(rng.normal(size=(b, 3)), rng.uniform(-1, 1, (b, 2)), rng.uniform(-1, 1, (b, k, 2)))
    for i in range(b):
        for j in range(k):
            assert g_in[i, :3].tobytes() == f_in[i * k + j, :3].tobytes()


# -- training and estimation -----------------------------------------------------------------------

def zero_cost(s, a, ar):
    return np.zeros(ar.shape[:2])


def test_zero_cost_training_approaches_minus_epsilon():
    ds = make_dataset(n=300, traj_len=30)
    cfg = BwdConfig(ot_steps=1500, batch_size=64, hidden_dim=32, learning_rate=1e-3, zero_init=False)
    pot, trace = train_bwd(None, ds, RandomPolicy(2), cfg, np.random.default_rng(0), cost_fn=zero_cost)
    est = estimate_bwd(pot, None, ds, RandomPolicy(2), cfg, np.random.default_rng(1), cost_fn=zero_cost)
    assert est.value == pytest.approx(-1.0, abs=0.05)
    assert trace[-200:].mean() >= trace[:200].mean()


def test_training_deterministic_and_std_error_scaling():
    ds = make_dataset(n=400, traj_len=40)
    critic = rand_critic()
    cfg = BwdConfig(ot_steps=200, batch_size=32, hidden_dim=16, cost_scale=0.5)
    rp = RandomPolicy(2)
    p1, t1 = train_bwd(critic, ds, rp, cfg, np.random.default_rng(3))
    _, t2 = train_bwd(critic, ds, rp, cfg, np.random.default_rng(3))
    assert np.array_equal(t1, t2)
    se = [estimate_bwd(p1, critic, ds, rp, BwdConfig(eval_batches=n, batch_size=32, cost_scale=0.5),
                       np.random.default_rng(5)).std_error for n in (200, 400)]
    assert se[1] / se[0] == pytest.approx(1 / np.sqrt(2), rel=0.3)


def test_estimate_reports_unscaled_units():
    ds = make_dataset(n=200, traj_len=20)
    critic = rand_critic()
    rp = RandomPolicy(2)
    pot = init_potentials(3, 2, BwdConfig(hidden_dim=4), 0, None, cost_scale=0.25)
    est = estimate_bwd(pot, critic, ds, rp, BwdConfig(eval_batches=2, batch_size=8), np.random.default_rng(0))
    assert est.cost_scale == 0.25 and est.std_error >= 0


def test_empty_holdout_rejected():
    ds = make_dataset(n=4, traj_len=4)
    pot = init_potentials(3, 2, BwdConfig(hidden_dim=4), 0)
    with pytest.raises(InvalidArgument):
        estimate_bwd(pot, rand_critic(), ds, RandomPolicy(2), BwdConfig(holdout_fraction=0.1))


def test_excess_clipping_fails_training():
    ds = make_dataset(n=100, traj_len=10)
    with pytest.raises(NumericError, match="clipped"):
        train_bwd(None, ds, RandomPolicy(2), BwdConfig(ot_steps=5, batch_size=8, hidden_dim=4, epsilon=0.01),
                  np.random.default_rng(0), cost_fn=lambda s, a, ar: np.full(ar.shape[:2], -1.0))


def test_config_validation():
    with pytest.raises(InvalidArgument):
        BwdConfig(k_negatives=0)
    with pytest.raises(InvalidArgument):
        BwdConfig(epsilon=0.0)


def test_potentials_round_trip(tmp_path):
    pot = init_potentials(3, 2, BwdConfig(hidden_dim=4), 7, Standardizer(np.ones(3), np.full(3, 2.0)), 0.3)
    save_potentials(pot, tmp_path / "p")
    back = load_potentials(tmp_path / "p")
    assert back.cost_scale == 0.3 and back.config_hash == pot.config_hash
    assert all(np.array_equal(x, y) for x, y in zip(back.g_net.params(), pot.g_net.params()))


# -- discrete oracle -------------------------------------------------------------------------------

def test_sinkhorn_one_by_one():
    val, plan = sinkhorn_reference(np.array([[0.7]]), np.array([1.0]), np.array([1.0]), 1.0)
    assert val == pytest.approx(0.7) and plan[0, 0] == pytest.approx(1.0)


def test_sinkhorn_zero_cost_is_product():
    mu, nu = np.array([0.2, 0.3, 0.5]), np.array([0.6, 0.4])
    val, plan = sinkhorn_reference(np.zeros((3, 2)), mu, nu, 0.5)
    np.testing.assert_allclose(plan, np.outer(mu, nu), atol=1e-14)
    assert val == pytest.approx(0.0, abs=1e-14)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sinkhorn_matches_kernel_scaling(seed):
    rng = np.random.default_rng(seed)
    cost = rng.uniform(size=(16, 16))
    mu, nu = np.full(16, 1 / 16), rng.dirichlet(np.ones(16))
    val, plan = sinkhorn_reference(cost, mu, nu, 1.0)
    ref, ref_plan = kernel_sinkhorn(cost, mu, nu, 1.0)
    assert abs(val - ref) <= 1e-6
    np.testing.assert_allclose(plan.sum(1), mu, atol=1e-8)
    np.testing.assert_allclose(plan.sum(0), nu, atol=1e-8)


def test_sinkhorn_rejects_bad_marginals():
    with pytest.raises(InvalidArgument):
        sinkhorn_reference(np.zeros((2, 2)), np.array([0.5, 0.6]), np.array([0.5, 0.5]), 1.0)


@given(st.integers(2, 8), st.integers(2, 8), st.sampled_from([0.1, 0.5, 1.0]), st.integers(0, 10_000))
def test_weak_duality(n, m, eps, seed):
    rng = np.random.default_rng(seed)
    cost = rng.uniform(size=(n, m))
    mu, nu = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(m))
    primal, _ = sinkhorn_reference(cost, mu, nu, eps)
    dual, _, _ = discrete_dual(rng.normal(size=n), rng.normal(size=m), cost, mu, nu, eps)
    assert dual <= primal - eps + 1e-9


def test_table_dual_reaches_primal():
    rng = np.random.default_rng(0)
    cost = rng.uniform(size=(6, 6))
    mu = nu = np.full(6, 1 / 6)
    primal, _ = sinkhorn_reference(cost, mu, nu, 1.0)
    dual, _, _ = fit_table_dual(cost, mu, nu, 1.0)
    assert dual + 1.0 == pytest.approx(primal, rel=1e-3)
