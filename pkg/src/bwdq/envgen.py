"""Synthetic ground truth: a continuous point-mass task, a small tabular MDP,
graded scripted behavior policies, dataset generation, and exact tabular
policy evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, RandomPolicy, concatenate, fill_next_actions
from .errors import InvalidArgument


@dataclass(frozen=True)
class PointMassEnv:
    """Point in ``[-bound, bound]^dims`` pushed by actions; reward is minus distance to goal."""

    dims: int = 2
    goal: tuple = ()
    max_steps: int = 50
    action_scale: float = 0.1
    noise_std: float = 0.02
    bound: float = 1.0
    name: str = "pointmass"

    def __post_init__(self):
        if self.dims < 1 or self.max_steps < 1 or self.action_scale <= 0 or self.noise_std < 0:
            raise InvalidArgument("bad point-mass parameters")
        if not self.goal:
            object.__setattr__(self, "goal", (0.0,) * self.dims)
        if len(self.goal) != self.dims:
            raise InvalidArgument("goal dimension mismatch")

    @property
    def obs_dim(self) -> int:
        return self.dims

    @property
    def act_dim(self) -> int:
        return self.dims

    @property
    def expert_gain(self) -> float:
        # lands on the goal in one step whenever the action is not clipped
        return 1.0 / self.action_scale

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-self.bound, self.bound, size=self.dims)

    def reward(self, state: np.ndarray) -> float:
        return -float(np.linalg.norm(state - np.asarray(self.goal)))

    def step(self, state, action, rng) -> tuple[np.ndarray, float]:
        r = self.reward(state)
        nxt = state + self.action_scale * np.clip(action, -1.0, 1.0)
        if self.noise_std > 0:
            nxt = nxt + self.noise_std * rng.standard_normal(self.dims)
        return np.clip(nxt, -self.bound, self.bound), r

    def expert_action(self, state) -> np.ndarray:
        return np.clip(self.expert_gain * (np.asarray(self.goal) - state), -1.0, 1.0)

    def random_action(self, rng, random_policy: RandomPolicy | None = None) -> np.ndarray:
        rp = random_policy or RandomPolicy(self.act_dim)
        return rp.sample(rng)

    def decode(self, action):
        return action


@dataclass(eq=False)
class GridMDP:
    """Finite MDP with one-hot observations; actions are one-hot vectors decoded by argmax."""

    transition_table: np.ndarray  # [S, A, S']
    reward_table: np.ndarray  # [S, A]
    discount: float = 0.9
    max_steps: int = 50
    name: str = "grid"

    def __post_init__(self):
        self.transition_table = np.asarray(self.transition_table, dtype=np.float64)
        self.reward_table = np.asarray(self.reward_table, dtype=np.float64)
        s, a, s2 = self.transition_table.shape
        if s2 != s or self.reward_table.shape != (s, a):
            raise InvalidArgument("transition/reward table shapes disagree")
        if np.any(self.transition_table < 0) or np.any(np.abs(self.transition_table.sum(-1) - 1.0) > 1e-12):
            raise InvalidArgument("transition rows must be probability vectors")
        if not 0.0 <= self.discount < 1.0:
            raise InvalidArgument("discount must lie in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.transition_table.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition_table.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.n_states

    @property
    def act_dim(self) -> int:
        return self.n_actions

    def one_hot_state(self, s: int) -> np.ndarray:
        o = np.zeros(self.n_states)
        o[s] = 1.0
        return o

    def one_hot_action(self, a: int) -> np.ndarray:
        o = np.zeros(self.n_actions)
        o[a] = 1.0
        return o

    def reset(self, rng) -> np.ndarray:
        return self.one_hot_state(int(rng.integers(self.n_states)))

    def step(self, obs, action, rng) -> tuple[np.ndarray, float]:
        s = int(np.argmax(obs))
        a = self.decode(action)
        s2 = int(rng.choice(self.n_states, p=self.transition_table[s, a]))
        return self.one_hot_state(s2), float(self.reward_table[s, a])

    def decode(self, action) -> int:
        return int(np.argmax(action))

    def optimal_policy(self) -> np.ndarray:
        q = value_iteration_optimal(self)
        return np.argmax(q, axis=1)

    def expert_action(self, obs) -> np.ndarray:
        if not hasattr(self, "_greedy"):
            self._greedy = self.optimal_policy()
        return self.one_hot_action(int(self._greedy[int(np.argmax(obs))]))

    def random_action(self, rng, random_policy=None) -> np.ndarray:
        return self.one_hot_action(int(rng.integers(self.n_actions)))


def random_grid_mdp(n_states: int = 5, n_actions: int = 2, discount: float = 0.9, seed: int = 0,
                    max_steps: int = 50) -> GridMDP:
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    p /= p.sum(-1, keepdims=True)
    return GridMDP(p, rng.uniform(0.0, 1.0, size=(n_states, n_actions)), discount, max_steps)


def make_env(name: str, seed: int = 0):
    if name == "pointmass":
        return PointMassEnv()
    if name == "pointmass4":
        return PointMassEnv(dims=4, name="pointmass4")
    if name == "grid":
        env = random_grid_mdp(seed=seed, discount=0.9)
        env.name = "grid"
        return env
    raise InvalidArgument(f"unknown environment {name!r}")


@dataclass
class GradedPolicy:
    """With probability ``quality`` act as the (noisy) expert, otherwise uniformly at random."""

    quality: float
    env: object
    exploration_std: float = 0.1
    random_policy: RandomPolicy | None = None

    def __post_init__(self):
        if not 0.0 <= self.quality <= 1.0:
            raise InvalidArgument(f"quality must lie in [0, 1], got {self.quality}")

    def __call__(self, obs, rng) -> np.ndarray:
        if rng.random() < self.quality:
            a = self.env.expert_action(obs)
            if isinstance(self.env, PointMassEnv) and self.exploration_std > 0:
                a = np.clip(a + self.exploration_std * rng.standard_normal(a.shape), -1.0, 1.0)
            return a
        return self.env.random_action(rng, self.random_policy)


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    episode_return: float = field(init=False)

    def __post_init__(self):
        self.episode_return = float(np.sum(self.rewards))


def rollout(env, policy, n_steps: int, rng: np.random.Generator, start=None) -> Trajectory:
    """Run ``policy(obs, rng)`` for ``n_steps`` steps; the return is undiscounted."""
    if n_steps < 1:
        raise InvalidArgument("n_steps must be >= 1")
    s = env.reset(rng) if start is None else np.asarray(start, dtype=np.float64)
    states, actions, rewards, nexts = [], [], [], []
    for _ in range(n_steps):
        a = np.asarray(policy(s, rng), dtype=np.float64)
        s2, r = env.step(s, a, rng)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        nexts.append(s2)
        s = s2
    return Trajectory(np.array(states), np.array(actions), np.array(rewards), np.array(nexts))


def trajectories_to_dataset(trajs: list[Trajectory], env, discount: float, meta=None) -> Dataset:
    n = sum(len(t.rewards) for t in trajs)
    starts = np.cumsum([0] + [len(t.rewards) for t in trajs[:-1]])
    ds = Dataset(env.obs_dim, env.act_dim, discount,
                 np.concatenate([t.states for t in trajs]), np.concatenate([t.actions for t in trajs]),
                 np.concatenate([t.rewards for t in trajs]), np.concatenate([t.next_states for t in trajs]),
                 np.zeros((n, env.act_dim)), np.zeros(n, bool), np.zeros(n, bool), starts, meta=meta or {})
    return fill_next_actions(ds)


def generate_dataset(env, quality_levels, n_transitions_per_level: int, n_seeds: int,
                     rng: np.random.Generator, discount: float | None = None,
                     episode_length: int | None = None) -> list[Dataset]:
    """One dataset per quality level, mixing ``n_seeds`` independently seeded policy runs equally.

    Episodes end by time limit (not terminal); the final transition of each
    episode carries no next action.
    """
    levels = [float(q) for q in quality_levels]
    for q in levels:
        if not 0.0 <= q <= 1.0:
            raise InvalidArgument(f"quality level {q} outside [0, 1]")
    if n_seeds < 1 or n_transitions_per_level < 1:
        raise InvalidArgument("n_seeds and n_transitions_per_level must be positive")
    if discount is None:
        discount = env.discount if isinstance(env, GridMDP) else 0.99
    ep_len = episode_length or env.max_steps
    out = []
    for q in levels:
        seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=n_seeds)]
        shares = [n_transitions_per_level // n_seeds + (i < n_transitions_per_level % n_seeds)
                  for i in range(n_seeds)]
        parts = []
        for seed, share in zip(seeds, shares):
            if share == 0:
                continue
            prng = np.random.default_rng(seed)
            policy = GradedPolicy(q, env)
            trajs, left = [], share
            while left > 0:
                t = rollout(env, policy, min(ep_len, left), prng)
                trajs.append(t)
                left -= len(t.rewards)
            parts.append(trajectories_to_dataset(trajs, env, discount))
        meta = {"generator": "bwdq.envgen", "env": env.name, "quality": repr(q),
                "policy_seeds": ",".join(map(str, seeds))}
        out.append(concatenate(parts, meta=meta))
    return out


# -- tabular oracles ------------------------------------------------------------------------------


def exact_q_beta(mdp: GridMDP, behavior: np.ndarray) -> np.ndarray:
    """Solve Q = r + gamma P Pi_beta Q directly."""
    behavior = np.asarray(behavior, dtype=np.float64)
    S, A = mdp.n_states, mdp.n_actions
    if behavior.shape != (S, A) or np.any(behavior < 0) or np.any(np.abs(behavior.sum(1) - 1) > 1e-12):
        raise InvalidArgument("behavior must be a [S, A] row-stochastic table")
    if not 0.0 <= mdp.discount < 1.0:
        raise InvalidArgument("exact policy evaluation needs discount < 1")
    # (s,a) -> (s',a') transition matrix
    p_sa = mdp.transition_table.reshape(S * A, S)
    m = (p_sa[:, :, None] * behavior[None, :, :]).reshape(S * A, S * A)
    lhs = np.eye(S * A) - mdp.discount * m
    q = np.linalg.solve(lhs, mdp.reward_table.reshape(S * A))
    resid = np.max(np.abs(q - (mdp.reward_table.reshape(-1) + mdp.discount * m @ q)))
    if resid > 1e-10:
        q = q + np.linalg.solve(lhs, mdp.reward_table.reshape(-1) + mdp.discount * m @ q - q)
    return q.reshape(S, A)


def value_iteration_q(mdp: GridMDP, behavior: np.ndarray, iters: int = 10_000) -> np.ndarray:
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(iters):
        v = (behavior * q).sum(1)
        q = mdp.reward_table + mdp.discount * mdp.transition_table @ v
    return q


def value_iteration_optimal(mdp: GridMDP, iters: int = 5000) -> np.ndarray:
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(iters):
        q = mdp.reward_table + mdp.discount * mdp.transition_table @ q.max(1)
    return q


def graded_behavior_table(mdp: GridMDP, quality: float) -> np.ndarray:
    """Action probabilities of ``GradedPolicy(quality, mdp)``."""
    table = np.full((mdp.n_states, mdp.n_actions), (1.0 - quality) / mdp.n_actions)
    table[np.arange(mdp.n_states), mdp.optimal_policy()] += quality
    return table


# -- evaluation and oracle ------------------------------------------------------------------------


def evaluate_policy(env, act, n_episodes: int = 10, seed: int = 12345,
                    n_steps: int | None = None) -> float:
    """Mean undiscounted return of ``act(obs) -> action`` over episodes with fixed start seeds."""
    rng = np.random.default_rng(seed)
    n_steps = n_steps or env.max_steps
    rets = [rollout(env, lambda s, _r: act(s), n_steps, rng).episode_return for _ in range(n_episodes)]
    return float(np.mean(rets))


def reference_returns(env, n_episodes: int = 100, seed: int = 777) -> tuple[float, float]:
    """Monte-Carlo (random, expert) returns used by the 0-100 normalization."""
    rets = []
    for q in (0.0, 1.0):
        rng = np.random.default_rng(seed)
        pol = GradedPolicy(q, env)
        rets.append(float(np.mean([rollout(env, pol, env.max_steps, rng).episode_return
                                   for _ in range(n_episodes)])))
    return rets[0], rets[1]


def normalize_return(ret: float, random_return: float, expert_return: float) -> float:
    return 100.0 * (ret - random_return) / (expert_return - random_return)


@dataclass
class OracleConfig:
    bc_steps: int = 5000
    iql_steps: int = 10_000
    batch_size: int = 256
    eval_episodes: int = 10
    hidden_dim: int = 256
    seed: int = 0


def oracle_score(dataset: Dataset, env, rng: np.random.Generator,
                 config: OracleConfig | None = None) -> tuple[float, dict]:
    """Mean normalized return of a behavior-cloning agent and an IQL agent trained on ``dataset``."""
    from .iql import IqlConfig, train_bc, train_iql

    config = config or OracleConfig()
    rand_ret, exp_ret = reference_returns(env)
    seed = int(rng.integers(0, 2**31 - 1))
    bc = train_bc(dataset, steps=config.bc_steps, batch_size=config.batch_size,
                  hidden_dim=config.hidden_dim, seed=seed)
    bc_ret = evaluate_policy(env, bc.act, config.eval_episodes)
    iql_cfg = IqlConfig(total_steps=config.iql_steps, eval_every=config.iql_steps,
                        eval_episodes=config.eval_episodes, batch_size=config.batch_size,
                        hidden_dim=config.hidden_dim)
    agent, _ = train_iql(dataset, env, None, iql_cfg, seed=seed + 1, reference=(rand_ret, exp_ret))
    iql_ret = evaluate_policy(env, agent.act, config.eval_episodes)
    scores = {"bc": normalize_return(bc_ret, rand_ret, exp_ret),
              "iql": normalize_return(iql_ret, rand_ret, exp_ret)}
    return float(np.mean(list(scores.values()))), scores
