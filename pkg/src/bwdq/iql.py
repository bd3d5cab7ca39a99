"""Implicit Q-learning at desk scale, optionally regularized by the BWD between
the actor and the random policy.

The regularized actor maximizes ``J + lambda * BWD(actor, random)``: dual
potentials are trained online against the current actor's actions while the
pre-trained behavioral critic stays frozen.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .approx import (Gradients, Network, backward, forward, forward_hidden, init_network, init_optim,
                     load_network, optim_step, polyak_update, save_network)
from .bwd import BwdConfig, PotentialPair, auto_cost_scale, bwd_cost, dual_objective, init_potentials
from .critic import Critic, CriticConfig, train_critic
from .dataset import Batch, Dataset, RandomPolicy, Standardizer, fit_standardizer, sample_batch
from .envgen import evaluate_policy, normalize_return, reference_returns
from .errors import InvalidArgument, NumericError
from .util import config_hash


@dataclass
class IqlConfig:
    total_steps: int = 50_000
    eval_every: int = 5000
    eval_episodes: int = 10
    batch_size: int = 256
    hidden_dim: int = 256
    learning_rate: float = 3e-4
    expectile: float = 0.7
    awr_temperature: float = 3.0
    max_weight: float = 100.0
    discount: float | None = None  # None: the dataset's discount
    polyak: float = 0.005

    def __post_init__(self):
        if not 0.5 <= self.expectile < 1.0:
            raise InvalidArgument("expectile must lie in [0.5, 1)")
        if self.awr_temperature <= 0:
            raise InvalidArgument("awr_temperature must be positive")
        if self.total_steps < 0 or self.eval_every < 1:
            raise InvalidArgument("need total_steps >= 0 and eval_every >= 1")


@dataclass
class RegConfig(BwdConfig):
    lambda_bwd: float = 1.0
    potential_update_steps_per_actor_step: int = 1
    critic_steps: int = 10_000  # for the frozen behavioral critic when none is supplied

    def __post_init__(self):
        super().__post_init__()
        if not self.lambda_bwd >= 0:
            raise InvalidArgument("lambda_bwd must be non-negative")
        if self.potential_update_steps_per_actor_step < 1:
            raise InvalidArgument("potential_update_steps_per_actor_step must be >= 1")

    @property
    def active(self) -> bool:
        return self.lambda_bwd > 0


@dataclass
class Actor:
    """Deterministic tanh-squashed policy."""

    net: Network
    standardizer: Standardizer | None = None

    def __call__(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if self.standardizer is not None:
            states = self.standardizer(states)
        return np.tanh(forward(self.net, states))

    def act(self, obs) -> np.ndarray:
        return self(obs)[0]


@dataclass
class IqlAgent:
    q_net: Network
    q_target: Network
    v_net: Network
    actor: Network
    expectile: float = 0.7
    awr_temperature: float = 3.0
    discount: float = 0.99
    polyak: float = 0.005
    max_weight: float = 100.0
    standardizer: Standardizer | None = None
    opt: dict = field(default_factory=dict, repr=False)

    @property
    def policy(self) -> Actor:
        return Actor(self.actor, self.standardizer)

    def act(self, obs) -> np.ndarray:
        return self.policy.act(obs)

    def norm(self, states):
        return states if self.standardizer is None else self.standardizer(states)


@dataclass
class IqlLosses:
    value: float
    q: float
    actor: float
    reg: float | None = None


@dataclass
class EvalPoint:
    step: int
    mean_return: float
    normalized_return: float
    seed: int
    variant: str


def expectile_loss(diff: np.ndarray, expectile: float) -> float:
    """Mean of ``|tau - 1(u < 0)| * u**2``."""
    w = np.where(diff < 0, 1.0 - expectile, expectile)
    return float(np.mean(w * diff * diff))


def awr_weights(advantage: np.ndarray, temperature: float, max_weight: float = 100.0) -> np.ndarray:
    """``min(exp(temperature * A), max_weight)``, overflow-safe."""
    return np.exp(np.minimum(temperature * np.asarray(advantage, dtype=np.float64), np.log(max_weight)))


def init_agent(obs_dim: int, act_dim: int, config: IqlConfig, discount: float, seed: int,
               standardizer: Standardizer | None = None) -> IqlAgent:
    rng = np.random.default_rng(seed)
    seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=3)]
    q = init_network(obs_dim + act_dim, config.hidden_dim, 1, seeds[0])
    v = init_network(obs_dim, config.hidden_dim, 1, seeds[1])
    pi = init_network(obs_dim, config.hidden_dim, act_dim, seeds[2])
    agent = IqlAgent(q, q.copy(), v, pi, config.expectile, config.awr_temperature, discount,
                     config.polyak, config.max_weight, standardizer)
    agent.opt = {k: init_optim(net, config.learning_rate) for k, net in (("q", q), ("v", v), ("actor", pi))}
    return agent


def iql_step(agent: IqlAgent, batch: Batch, rng=None, actor_extra=None) -> IqlLosses:
    """One value, critic and actor update followed by the target update.

    ``actor_extra(raw_states, pi_actions)`` may return ``(value, d loss / d actions)``
    to add to the actor's descent direction; the IQL computation is unchanged.
    """
    b = len(batch.rewards)
    s = agent.norm(batch.states)
    s2 = agent.norm(batch.next_states)
    sa = np.concatenate([s, batch.actions], axis=1)

    # value: expectile regression onto the target critic
    q_t = forward(agent.q_target, sa)[:, 0]
    v, v_hid = forward_hidden(agent.v_net, s)
    u = q_t - v[:, 0]
    v_loss = expectile_loss(u, agent.expectile)
    tau_w = np.where(u < 0, 1.0 - agent.expectile, agent.expectile)
    # bootstrap from V(s') before the value update
    v_next = forward(agent.v_net, s2)[:, 0]

    # critic: TD toward r + gamma (1 - terminal) V(s')
    target = batch.rewards + agent.discount * (1.0 - batch.terminals) * v_next
    q, q_hid = forward_hidden(agent.q_net, sa)
    err = q[:, 0] - target
    q_loss = float(np.mean(err * err))

    # actor: advantage-weighted regression of tanh outputs onto dataset actions
    w = awr_weights(u, agent.awr_temperature, agent.max_weight)
    pre, pi_hid = forward_hidden(agent.actor, s)
    pi = np.tanh(pre)
    d = pi - batch.actions
    a_loss = float(np.mean(w * np.sum(d * d, axis=1)))
    if not np.isfinite(v_loss + q_loss + a_loss):
        raise NumericError("non-finite IQL loss", agent.opt["v"].step_count)
    d_pi = (2.0 / b) * w[:, None] * d
    reg_val = None
    if actor_extra is not None:
        reg_val, d_extra = actor_extra(batch.states, pi)
        d_pi = d_pi + d_extra

    g_v = backward(agent.v_net, s, (-2.0 / b) * (tau_w * u)[:, None], v_hid)
    g_q = backward(agent.q_net, sa, (2.0 / b) * err[:, None], q_hid)
    g_pi = backward(agent.actor, s, d_pi * (1.0 - pi * pi), pi_hid)
    optim_step(agent.v_net, g_v, agent.opt["v"])
    optim_step(agent.q_net, g_q, agent.opt["q"])
    optim_step(agent.actor, g_pi, agent.opt["actor"])
    polyak_update(agent.q_target, agent.q_net, agent.polyak)
    return IqlLosses(v_loss, q_loss, a_loss, reg_val)


@dataclass
class _RegPass:
    value: float
    d_actions: np.ndarray  # d BWD / d actor actions, (B, act_dim)
    grad_g: Gradients
    grad_f: Gradients
    n_clipped: int


def _reg_pass(potentials: PotentialPair, states, actions, random_actions, cost) -> _RegPass:
    """Dual value at actor actions, its action gradient and the potentials' ascent gradients."""
    b, k, _ = random_actions.shape
    res = dual_objective(potentials, None, states, actions, random_actions, cost=cost)
    g_in, _ = potentials.inputs(states, actions, random_actions)
    _, g_hid = forward_hidden(potentials.g_net, g_in)
    _, dx = backward(potentials.g_net, g_in, res.terms.dg[:, None], g_hid, input_grad=True)
    obs_dim = states.shape[1]
    # d value / d cost_ik = clipped-aware weight / (B K); d cost_ik / d a_i = 2 scale (a'_ik - a_i)
    wd = 1.0 / (b * k) - res.terms.df
    d_cost = 2.0 * potentials.cost_scale * np.einsum("bk,bkd->bd", wd, random_actions - actions[:, None, :])
    return _RegPass(res.value, dx[:, obs_dim:] + d_cost, res.grad_g, res.grad_f, res.n_clipped)


def bwd_reg_term(agent: IqlAgent, potentials: PotentialPair, critic: Critic, states,
                 random_policy: RandomPolicy, rng, k_negatives: int = 8) -> tuple[float, Gradients]:
    """Batch dual value with behavior actions replaced by the actor's, and its
    gradient (ascent direction) w.r.t. the actor parameters only."""
    states = np.asarray(states, dtype=np.float64)
    s = agent.norm(states)
    pre, hid = forward_hidden(agent.actor, s)
    pi = np.tanh(pre)
    ar = random_policy.sample(rng, (len(states), k_negatives))
    cost = bwd_cost(critic, states, pi, ar, potentials.cost_scale)
    rp = _reg_pass(potentials, states, pi, ar, cost)
    return rp.value, backward(agent.actor, s, rp.d_actions * (1.0 - pi * pi), hid)


def _variant(reg: RegConfig | None) -> str:
    return "iql+bwd" if reg is not None and reg.active else "iql"


def train_iql(dataset: Dataset, env, reg: RegConfig | None = None, config: IqlConfig | None = None,
              seed: int = 0, reference: tuple[float, float] | None = None, critic: Critic | None = None,
              random_policy: RandomPolicy | None = None) -> tuple[IqlAgent, list[EvalPoint]]:
    """Train IQL (plus the BWD actor regularizer when ``reg.lambda_bwd > 0``).

    The regularizer draws from its own random stream, so with ``lambda_bwd = 0``
    the run is bit-identical to plain IQL.
    """
    config = config or IqlConfig()
    if len(dataset) == 0:
        raise InvalidArgument("cannot train on an empty dataset")
    if env.obs_dim != dataset.obs_dim or env.act_dim != dataset.act_dim:
        raise InvalidArgument("dataset and environment dimensions differ")
    gamma = dataset.discount if config.discount is None else config.discount
    base_ss, batch_ss, reg_ss = np.random.SeedSequence(seed).spawn(3)
    std = fit_standardizer(dataset.states)
    agent = init_agent(dataset.obs_dim, dataset.act_dim, config, gamma,
                       int(np.random.default_rng(base_ss).integers(2**31 - 1)), std)
    rng = np.random.default_rng(batch_ss)
    if reference is None:
        reference = reference_returns(env)

    actor_extra = None
    if reg is not None and reg.active:
        actor_extra = _make_regularizer(agent, dataset, reg, reg_ss, critic, random_policy)

    curve = []
    variant = _variant(reg)
    for step in range(1, config.total_steps + 1):
        batch = sample_batch(dataset, config.batch_size, rng)
        try:
            iql_step(agent, batch, rng, actor_extra)
        except NumericError as e:
            raise NumericError(str(e), step) from e
        if step % config.eval_every == 0 or step == config.total_steps:
            ret = evaluate_policy(env, agent.act, config.eval_episodes)
            curve.append(EvalPoint(step, ret, normalize_return(ret, *reference), seed, variant))
    return agent, curve


def _make_regularizer(agent: IqlAgent, dataset: Dataset, reg: RegConfig, reg_ss, critic, random_policy):
    crit_ss, pot_ss, sample_ss = reg_ss.spawn(3)
    if critic is None:
        critic, _ = train_critic(dataset, CriticConfig(steps=reg.critic_steps, hidden_dim=reg.hidden_dim),
                                 np.random.default_rng(crit_ss))
    random_policy = random_policy or RandomPolicy(dataset.act_dim)
    scale = reg.cost_scale or auto_cost_scale(critic, dataset, reg.probe_size, reg.split_seed)
    pot = init_potentials(dataset.obs_dim, dataset.act_dim, reg,
                          int(np.random.default_rng(pot_ss).integers(2**31 - 1)), critic.standardizer, scale)
    opt_g = init_optim(pot.g_net, reg.learning_rate)
    opt_f = init_optim(pot.f_net, reg.learning_rate)
    rrng = np.random.default_rng(sample_ss)
    k = reg.k_negatives
    lam = reg.lambda_bwd
    clip = {"clipped": 0, "total": 0}

    def extra(states, pi):
        ar = random_policy.sample(rrng, (len(pi), k))
        cost = bwd_cost(critic, states, pi, ar, scale)
        rp = _reg_pass(pot, states, pi, ar, cost)
        clip["clipped"] += rp.n_clipped
        clip["total"] += rp.d_actions.shape[0] * k
        if clip["clipped"] > 0.01 * clip["total"]:
            raise NumericError("too many clipped dual exponents in the actor regularizer")
        optim_step(pot.g_net, rp.grad_g.scaled(-1.0), opt_g)
        optim_step(pot.f_net, rp.grad_f.scaled(-1.0), opt_f)
        for _ in range(reg.potential_update_steps_per_actor_step - 1):
            ar = random_policy.sample(rrng, (len(pi), k))
            res = dual_objective(pot, None, states, pi, ar, cost=bwd_cost(critic, states, pi, ar, scale))
            optim_step(pot.g_net, res.grad_g.scaled(-1.0), opt_g)
            optim_step(pot.f_net, res.grad_f.scaled(-1.0), opt_f)
        # maximize BWD: descend on -lambda * BWD
        return rp.value / scale, (-lam) * rp.d_actions

    extra.potentials = pot
    extra.critic = critic
    return extra


def train_bc(dataset: Dataset, steps: int = 5000, batch_size: int = 256, hidden_dim: int = 256,
             seed: int = 0, learning_rate: float = 3e-4) -> Actor:
    """Behavior cloning: mean-squared regression of a tanh actor onto dataset actions."""
    if len(dataset) == 0:
        raise InvalidArgument("cannot clone an empty dataset")
    rng = np.random.default_rng(seed)
    std = fit_standardizer(dataset.states)
    net = init_network(dataset.obs_dim, hidden_dim, dataset.act_dim, int(rng.integers(2**31 - 1)))
    opt = init_optim(net, learning_rate)
    s_all = std(dataset.states)
    for step in range(steps):
        idx = rng.integers(0, len(dataset), size=batch_size)
        pre, hid = forward_hidden(net, s_all[idx])
        pi = np.tanh(pre)
        d = pi - dataset.actions[idx]
        if not np.all(np.isfinite(d)):
            raise NumericError("non-finite behavior-cloning loss", step)
        optim_step(net, backward(net, s_all[idx], (2.0 / batch_size) * d * (1.0 - pi * pi), hid), opt)
    return Actor(net, std)


def write_curve(curve: list[EvalPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mean_return", "normalized_return", "seed", "variant"])
        for p in curve:
            w.writerow([p.step, repr(p.mean_return), repr(p.normalized_return), p.seed, p.variant])


def read_curve(path) -> list[EvalPoint]:
    with open(path, newline="") as fh:
        return [EvalPoint(int(r["step"]), float(r["mean_return"]), float(r["normalized_return"]),
                          int(r["seed"]), r["variant"]) for r in csv.DictReader(fh)]


def save_agent(agent: IqlAgent, stem) -> None:
    stem = Path(stem)
    for name in ("q_net", "q_target", "v_net", "actor"):
        save_network(getattr(agent, name), stem.with_suffix(f".{name}.net"))
    side = {"expectile": agent.expectile, "awr_temperature": agent.awr_temperature, "discount": agent.discount,
            "polyak": agent.polyak, "max_weight": agent.max_weight,
            "standardizer": agent.standardizer.to_json() if agent.standardizer else None}
    stem.with_suffix(".json").write_text(json.dumps(side, sort_keys=True, indent=1))


def load_agent(stem) -> IqlAgent:
    stem = Path(stem)
    side = json.loads(stem.with_suffix(".json").read_text())
    nets = [load_network(stem.with_suffix(f".{n}.net")) for n in ("q_net", "q_target", "v_net", "actor")]
    std = Standardizer.from_json(side["standardizer"]) if side["standardizer"] else None
    return IqlAgent(*nets, side["expectile"], side["awr_temperature"], side["discount"], side["polyak"],
                    side["max_weight"], std)


def iql_config_hash(config: IqlConfig, reg: RegConfig | None) -> str:
    return config_hash({"iql": asdict(config), "reg": asdict(reg) if reg is not None else None})
