"""Bellman-Wasserstein distance between the dataset's state-action pairs and
state/random-action pairs.

Cost of coupling behavior action ``a`` with random action ``a'`` at a shared
state ``s`` is ``Q_hat(s, a') - ||a' - a||^2``. The distance is the maximum of
the entropic dual

    mean g(s, a) + mean f(s, a') - eps * mean exp((g + f - c) / eps)

over two potential networks, trained by stochastic ascent and evaluated on
held-out states. Larger values mean the behavior is further from random.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .approx import (Gradients, Network, adam_update, backward, forward_hidden, init_network, init_optim,
                     load_network, optim_step, save_network)
from .critic import Critic, q_value
from .dataset import Dataset, RandomPolicy, Standardizer, holdout_split
from .errors import InvalidArgument, NumericError
from .util import config_hash

EXP_CLIP = 30.0
MAX_CLIPPED_FRACTION = 0.01


@dataclass
class BwdConfig:
    ot_steps: int = 10_000
    batch_size: int = 256
    k_negatives: int = 8
    holdout_fraction: float = 0.1
    eval_batches: int = 32
    epsilon: float = 1.0
    cost_scale: float | None = None  # None: 1 / max(1, median |Q_hat|) over a probe
    hidden_dim: int = 256
    learning_rate: float = 3e-4
    lr_schedule: str = "cosine"  # or "constant"
    zero_init: bool = True  # zero output layer: both potentials start at 0
    probe_size: int = 1000
    split_seed: int = 0

    def __post_init__(self):
        if self.lr_schedule not in ("cosine", "constant"):
            raise InvalidArgument(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.k_negatives < 1:
            raise InvalidArgument("k_negatives must be >= 1")
        if self.epsilon <= 0:
            raise InvalidArgument("epsilon must be positive")
        if self.cost_scale is not None and self.cost_scale <= 0:
            raise InvalidArgument("cost_scale must be positive")


@dataclass
class PotentialPair:
    g_net: Network
    f_net: Network
    epsilon: float = 1.0
    cost_scale: float = 1.0
    standardizer: Standardizer | None = None
    config_hash: str = ""

    def inputs(self, states, actions, random_actions) -> tuple[np.ndarray, np.ndarray]:
        """Potential inputs; row ``i*K + k`` of the second array shares state ``i`` with row ``i`` of the first."""
        s = states if self.standardizer is None else self.standardizer(states)
        b, k, _ = random_actions.shape
        g_in = np.concatenate([s, actions], axis=1)
        f_in = np.concatenate([np.repeat(s, k, axis=0), random_actions.reshape(b * k, -1)], axis=1)
        return g_in, f_in


@dataclass
class BwdEstimate:
    value: float
    std_error: float
    epsilon: float
    cost_scale: float = 1.0
    n_batches: int = 0
    config_hash: str = ""


@dataclass
class DualTerms:
    value: float
    dg: np.ndarray  # d value / d g_i, shape (B,)
    df: np.ndarray  # d value / d f_ik, shape (B, K)
    weights: np.ndarray  # exp((g + f - c) / eps), shape (B, K)
    n_clipped: int
    max_exponent: float


def dual_terms(g: np.ndarray, f: np.ndarray, cost: np.ndarray, epsilon: float) -> DualTerms:
    """Batch dual value and its derivatives w.r.t. the potential values.

    Exponents above ``EXP_CLIP`` are clipped (zero derivative) and counted.
    """
    b, k = cost.shape
    z = (g[:, None] + f - cost) / epsilon
    zmax = float(np.max(z)) if z.size else 0.0
    if not np.isfinite(zmax) or not np.all(np.isfinite(z)):
        raise NumericError(f"non-finite dual exponent (max {zmax})")
    clipped = z > EXP_CLIP
    w = np.exp(np.minimum(z, EXP_CLIP))
    value = float(g.mean() + f.mean() - epsilon * w.mean())
    wd = np.where(clipped, 0.0, w) / (b * k)
    df = 1.0 / (b * k) - wd
    dg = 1.0 / b - wd.sum(axis=1)
    return DualTerms(value, dg, df, w, int(clipped.sum()), zmax)


def bwd_cost(critic: Critic, states, behavior_actions, random_actions, cost_scale: float = 1.0,
             q_random: np.ndarray | None = None) -> np.ndarray:
    """``cost_scale * (Q_hat(s, a') - ||a' - a||^2)``.

    Accepts single pairs or batches; ``random_actions`` may carry a K axis,
    shape (B, K, act_dim), giving a (B, K) result. The critic is queried at
    the random action.
    """
    states = np.asarray(states, dtype=np.float64)
    a = np.asarray(behavior_actions, dtype=np.float64)
    ar = np.asarray(random_actions, dtype=np.float64)
    single = states.ndim == 1
    if single:
        states, a, ar = states[None], a[None], ar[None]
    squeeze_k = ar.ndim == 2
    if squeeze_k:
        ar = ar[:, None, :]
    b, k, d = ar.shape
    if a.shape != (b, d) or states.shape[0] != b:
        raise InvalidArgument(f"shape mismatch: states {states.shape}, actions {a.shape}, random {ar.shape}")
    if q_random is None:
        q_random = q_value(critic, np.repeat(states, k, axis=0), ar.reshape(b * k, d)).reshape(b, k)
    diff = ar - a[:, None, :]
    c = cost_scale * (q_random - np.einsum("bkd,bkd->bk", diff, diff))
    if squeeze_k:
        c = c[:, 0]
    return c[0] if single else c


@dataclass
class DualResult:
    value: float
    grad_g: Gradients
    grad_f: Gradients
    n_clipped: int
    max_exponent: float
    terms: DualTerms = field(repr=False)


def dual_objective(potentials: PotentialPair, critic: Critic | None, states, actions, random_actions,
                   cost: np.ndarray | None = None) -> DualResult:
    """Dual value on B behavior pairs with K random actions each, plus ascent gradients."""
    random_actions = np.asarray(random_actions, dtype=np.float64)
    if random_actions.ndim != 3 or random_actions.shape[1] < 1:
        raise InvalidArgument("random_actions must have shape (B, K, act_dim) with K >= 1")
    if cost is None:
        cost = bwd_cost(critic, states, actions, random_actions, potentials.cost_scale)
    g_in, f_in = potentials.inputs(states, actions, random_actions)
    g, g_hid = forward_hidden(potentials.g_net, g_in)
    f, f_hid = forward_hidden(potentials.f_net, f_in)
    b, k = cost.shape
    terms = dual_terms(g[:, 0], f[:, 0].reshape(b, k), cost, potentials.epsilon)
    grad_g = backward(potentials.g_net, g_in, terms.dg[:, None], g_hid)
    grad_f = backward(potentials.f_net, f_in, terms.df.reshape(b * k, 1), f_hid)
    return DualResult(terms.value, grad_g, grad_f, terms.n_clipped, terms.max_exponent, terms)


def init_potentials(obs_dim: int, act_dim: int, config: BwdConfig, seed: int,
                    standardizer: Standardizer | None = None, cost_scale: float = 1.0) -> PotentialPair:
    """With ``config.zero_init`` both potentials start at exactly zero, so the
    first dual evaluations cannot saturate the exponential."""
    rng = np.random.default_rng(seed)
    d = obs_dim + act_dim
    nets = [init_network(d, config.hidden_dim, 1, int(rng.integers(2**31 - 1))) for _ in range(2)]
    if config.zero_init:
        for net in nets:
            net.w2[:] = 0.0
    return PotentialPair(nets[0], nets[1], config.epsilon, cost_scale, standardizer, config_hash(asdict(config)))


def auto_cost_scale(critic: Critic, dataset: Dataset, probe_size: int, seed: int) -> float:
    """``1 / max(1, median |Q_hat|)`` over a fixed probe of dataset pairs."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(dataset), size=min(probe_size, max(len(dataset), 1)))
    q = q_value(critic, dataset.states[idx], dataset.actions[idx])
    return 1.0 / max(1.0, float(np.median(np.abs(q))))


CostFn = "callable(states, actions, random_actions) -> (B, K) cost"


def train_bwd(critic: Critic | None, dataset: Dataset, random_policy: RandomPolicy,
              config: BwdConfig | None = None, rng: np.random.Generator | None = None,
              cost_fn=None) -> tuple[PotentialPair, np.ndarray]:
    """Stochastic gradient ascent on the dual over the training split.

    ``cost_fn`` replaces the critic-based cost (used to build instances with a
    known optimum). The holdout split is fixed by ``config.split_seed``.
    """
    config = config or BwdConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(dataset) == 0:
        raise InvalidArgument("cannot estimate BWD on an empty dataset")
    train_idx, _ = holdout_split(len(dataset), config.holdout_fraction, config.split_seed)
    if len(train_idx) == 0:
        raise InvalidArgument("training split is empty")
    if cost_fn is None and critic is None:
        raise InvalidArgument("need a critic or an explicit cost function")
    if config.cost_scale is not None:
        scale = config.cost_scale
    elif cost_fn is None:
        scale = auto_cost_scale(critic, dataset, config.probe_size, config.split_seed)
    else:
        scale = 1.0
    std = critic.standardizer if critic is not None else None
    pot = init_potentials(dataset.obs_dim, dataset.act_dim, config, int(rng.integers(2**31 - 1)), std, scale)
    opt_g = init_optim(pot.g_net, config.learning_rate)
    opt_f = init_optim(pot.f_net, config.learning_rate)
    b, k = config.batch_size, config.k_negatives
    trace = np.empty(config.ot_steps)
    clipped = total = 0
    for step in range(config.ot_steps):
        if config.lr_schedule == "cosine":
            lr = 0.5 * config.learning_rate * (1.0 + np.cos(np.pi * step / config.ot_steps))
            opt_g.learning_rate = opt_f.learning_rate = lr
        idx = train_idx[rng.integers(0, len(train_idx), size=b)]
        s, a = dataset.states[idx], dataset.actions[idx]
        ar = random_policy.sample(rng, (b, k))
        cost = cost_fn(s, a, ar) if cost_fn is not None else bwd_cost(critic, s, a, ar, scale)
        try:
            res = dual_objective(pot, critic, s, a, ar, cost=cost)
        except NumericError as e:
            raise NumericError(str(e), step) from e
        clipped += res.n_clipped
        total += b * k
        if clipped > MAX_CLIPPED_FRACTION * total:
            raise NumericError(f"{clipped} of {total} dual exponents clipped (max exponent "
                               f"{res.max_exponent:.1f}); increase epsilon or lower cost_scale", step)
        trace[step] = res.value
        # ascent: descend on the negated gradients
        optim_step(pot.g_net, res.grad_g.scaled(-1.0), opt_g)
        optim_step(pot.f_net, res.grad_f.scaled(-1.0), opt_f)
    return pot, trace


def estimate_bwd(potentials: PotentialPair, critic: Critic | None, dataset: Dataset,
                 random_policy: RandomPolicy, config: BwdConfig | None = None,
                 rng: np.random.Generator | None = None, cost_fn=None) -> BwdEstimate:
    """Mean held-out dual value over ``eval_batches`` minibatches, in unscaled cost units."""
    config = config or BwdConfig()
    rng = rng if rng is not None else np.random.default_rng(1)
    _, hold = holdout_split(len(dataset), config.holdout_fraction, config.split_seed)
    if len(hold) == 0:
        raise InvalidArgument("holdout split is empty")
    b, k = config.batch_size, config.k_negatives
    vals = []
    for _ in range(config.eval_batches):
        idx = hold[rng.integers(0, len(hold), size=b)]
        s, a = dataset.states[idx], dataset.actions[idx]
        ar = random_policy.sample(rng, (b, k))
        cost = cost_fn(s, a, ar) if cost_fn is not None else bwd_cost(critic, s, a, ar, potentials.cost_scale)
        g_in, f_in = potentials.inputs(s, a, ar)
        g = forward_hidden(potentials.g_net, g_in)[0][:, 0]
        f = forward_hidden(potentials.f_net, f_in)[0][:, 0].reshape(b, k)
        vals.append(dual_terms(g, f, cost, potentials.epsilon).value / potentials.cost_scale)
    vals = np.asarray(vals)
    se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return BwdEstimate(float(vals.mean()), se, potentials.epsilon, potentials.cost_scale, len(vals),
                       config_hash(asdict(config)))


def save_potentials(pot: PotentialPair, stem) -> None:
    stem = Path(stem)
    save_network(pot.g_net, stem.with_suffix(".g.net"))
    save_network(pot.f_net, stem.with_suffix(".f.net"))
    side = {"epsilon": pot.epsilon, "cost_scale": pot.cost_scale, "config_hash": pot.config_hash,
            "standardizer": pot.standardizer.to_json() if pot.standardizer else None}
    stem.with_suffix(".json").write_text(json.dumps(side, sort_keys=True, indent=1))


def load_potentials(stem) -> PotentialPair:
    stem = Path(stem)
    side = json.loads(stem.with_suffix(".json").read_text())
    std = Standardizer.from_json(side["standardizer"]) if side["standardizer"] else None
    return PotentialPair(load_network(stem.with_suffix(".g.net")), load_network(stem.with_suffix(".f.net")),
                         side["epsilon"], side["cost_scale"], std, side["config_hash"])


# -- discrete problems ----------------------------------------------------------------------------


def _check_simplex(p, name):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise InvalidArgument(f"{name} must be a probability vector")
    return p


def sinkhorn_reference(cost, mu, nu, epsilon: float, iters: int = 5000,
                       tol: float = 1e-13) -> tuple[float, np.ndarray]:
    """Log-domain Sinkhorn; returns (<P, C> + eps * KL(P || mu x nu), P)."""
    cost = np.asarray(cost, dtype=np.float64)
    mu, nu = _check_simplex(mu, "mu"), _check_simplex(nu, "nu")
    if cost.shape != (len(mu), len(nu)):
        raise InvalidArgument("cost shape does not match marginals")
    if iters < 1 or epsilon <= 0:
        raise InvalidArgument("need iters >= 1 and epsilon > 0")
    with np.errstate(divide="ignore"):
        log_mu, log_nu = np.log(mu), np.log(nu)
    f = np.zeros(len(mu))
    g = np.zeros(len(nu))
    for _ in range(iters):
        f = -epsilon * logsumexp(log_nu[None, :] + (g[None, :] - cost) / epsilon, axis=1)
        g_new = -epsilon * logsumexp(log_mu[:, None] + (f[:, None] - cost) / epsilon, axis=0)
        done = np.max(np.abs(g_new - g)) < tol
        g = g_new
        if done:
            break
    log_plan = log_mu[:, None] + log_nu[None, :] + (f[:, None] + g[None, :] - cost) / epsilon
    plan = np.exp(log_plan)
    ratio = np.where(plan > 0, log_plan - log_mu[:, None] - log_nu[None, :], 0.0)
    kl = float(np.sum(plan * ratio))
    return float(np.sum(plan * cost) + epsilon * kl), plan


def discrete_dual(g: np.ndarray, f: np.ndarray, cost, mu, nu, epsilon: float):
    """Exact-expectation dual on atoms: returns (value, d/dg, d/df)."""
    w = np.exp((g[:, None] + f[None, :] - cost) / epsilon) * mu[:, None] * nu[None, :]
    value = float(mu @ g + nu @ f - epsilon * w.sum())
    return value, mu - w.sum(axis=1), nu - w.sum(axis=0)


def fit_table_dual(cost, mu, nu, epsilon: float, steps: int = 5000,
                   learning_rate: float = 0.05) -> tuple[float, np.ndarray, np.ndarray]:
    """Gradient ascent on per-atom potential tables (identity features).

    The learning rate decays linearly to zero. Returns (dual value, g, f);
    at the optimum the value equals the entropic OT cost minus ``epsilon``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    mu, nu = _check_simplex(mu, "mu"), _check_simplex(nu, "nu")
    g = np.zeros(len(mu))
    f = np.zeros(len(nu))
    opt = init_optim([g, f], learning_rate)
    for t in range(steps):
        opt.learning_rate = learning_rate * (1.0 - t / steps)
        _, dg, df = discrete_dual(g, f, cost, mu, nu, epsilon)
        adam_update([g, f], [-dg, -df], opt)
    return discrete_dual(g, f, cost, mu, nu, epsilon)[0], g, f
