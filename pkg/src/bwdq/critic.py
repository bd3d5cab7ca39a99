"""Behavioral critic fitted by SARSA regression, plus a state-value head.

The critic regresses ``r + gamma * Q_target(s', a')`` where ``a'`` is the
action the dataset actually took next. Rows without a next action (end of a
trajectory, or terminal) regress onto ``r`` alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .approx import (Network, backward, forward, forward_hidden, init_network, init_optim, load_network,
                     optim_step, polyak_update, save_network)
from .dataset import Dataset, Standardizer, fit_standardizer
from .errors import InvalidArgument, InvalidState, NumericError
from .util import config_hash

EVAL_CHUNK = 8192


@dataclass
class CriticConfig:
    steps: int = 10_000
    batch_size: int = 256
    hidden_dim: int = 256
    learning_rate: float = 3e-4
    polyak: float = 0.05
    lr_schedule: str = "cosine"  # or "constant"
    discount: float | None = None  # None: use the dataset's discount
    standardize: bool = True
    seed: int = 0


@dataclass
class Critic:
    q_net: Network
    q_target: Network
    act_dim: int
    polyak: float = 0.005
    discount: float = 0.99
    standardizer: Standardizer | None = None
    trained: bool = False
    config_hash: str = ""

    @property
    def obs_dim(self) -> int:
        return self.q_net.input_dim - self.act_dim

    def features(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        if states.ndim == 1:
            states, actions = states[None], actions[None]
        if states.shape[1] != self.obs_dim or actions.shape[1] != self.act_dim or len(states) != len(actions):
            raise InvalidArgument(f"state/action shapes {states.shape}/{actions.shape} do not match critic "
                                  f"dims ({self.obs_dim}, {self.act_dim})")
        if self.standardizer is not None:
            states = self.standardizer(states)
        return np.concatenate([states, actions], axis=1)


@dataclass
class ValueHead:
    v_net: Network
    standardizer: Standardizer | None = None

    def __call__(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if self.standardizer is not None:
            states = self.standardizer(states)
        return _chunked(self.v_net, states)


def _chunked(net: Network, x: np.ndarray) -> np.ndarray:
    if len(x) <= EVAL_CHUNK:
        return forward(net, x)[:, 0]
    return np.concatenate([forward(net, x[i:i + EVAL_CHUNK])[:, 0] for i in range(0, len(x), EVAL_CHUNK)])


def q_value(critic: Critic, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Q_hat(s, a) for a batch (or a single pair, returned as a length-1 array)."""
    return _chunked(critic.q_net, critic.features(states, actions))


def train_critic(dataset: Dataset, config: CriticConfig | None = None,
                 rng: np.random.Generator | None = None) -> tuple[Critic, np.ndarray]:
    """SARSA regression with a Polyak target network; returns the critic and per-step loss."""
    config = config or CriticConfig()
    if len(dataset) == 0:
        raise InvalidArgument("cannot train a critic on an empty dataset")
    gamma = dataset.discount if config.discount is None else config.discount
    if not 0.0 <= gamma < 1.0:
        raise InvalidArgument("critic discount must lie in [0, 1)")
    if config.lr_schedule not in ("cosine", "constant"):
        raise InvalidArgument(f"unknown lr_schedule {config.lr_schedule!r}")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    std = fit_standardizer(dataset.states) if config.standardize else None
    d_in = dataset.obs_dim + dataset.act_dim
    q = init_network(d_in, config.hidden_dim, 1, int(rng.integers(2**31 - 1)))
    critic = Critic(q, q.copy(), dataset.act_dim, config.polyak, gamma, std,
                    config_hash=config_hash(asdict(config)))
    x = critic.features(dataset.states, dataset.actions)
    x_next = critic.features(dataset.next_states, dataset.next_actions)
    bootstrap = gamma * (dataset.has_next & ~dataset.terminals)
    opt = init_optim(q, config.learning_rate)
    trace = np.empty(config.steps)
    n, bs = len(dataset), config.batch_size
    for step in range(config.steps):
        if config.lr_schedule == "cosine":
            # decaying the step size removes most of the final-iterate SGD noise
            opt.learning_rate = 0.5 * config.learning_rate * (1.0 + np.cos(np.pi * step / config.steps))
        idx = rng.integers(0, n, size=bs)
        xb = x[idx]
        target = dataset.rewards[idx] + bootstrap[idx] * forward(critic.q_target, x_next[idx])[:, 0]
        pred, hid = forward_hidden(q, xb)
        err = pred[:, 0] - target
        loss = float(np.mean(err * err))
        if not np.isfinite(loss):
            raise NumericError("non-finite TD loss", step)
        trace[step] = loss
        grads = backward(q, xb, (2.0 / bs) * err[:, None], hid)
        optim_step(q, grads, opt)
        polyak_update(critic.q_target, q, config.polyak)
    critic.trained = True
    return critic, trace


def fit_value_head(critic: Critic, dataset: Dataset, steps: int = 5000, batch_size: int = 256,
                   rng: np.random.Generator | None = None, learning_rate: float = 3e-4,
                   hidden_dim: int = 256) -> ValueHead:
    """Regress V(s) onto Q_hat(s, a) at the dataset's own actions (conditional mean under beta)."""
    if not critic.trained:
        raise InvalidState("value head needs a trained critic")
    if len(dataset) == 0:
        raise InvalidArgument("cannot fit a value head on an empty dataset")
    rng = rng if rng is not None else np.random.default_rng(0)
    targets = q_value(critic, dataset.states, dataset.actions)
    s = dataset.states if critic.standardizer is None else critic.standardizer(dataset.states)
    v = init_network(dataset.obs_dim, hidden_dim, 1, int(rng.integers(2**31 - 1)))
    opt = init_optim(v, learning_rate)
    n = len(dataset)
    for step in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        pred, hid = forward_hidden(v, s[idx])
        err = pred[:, 0] - targets[idx]
        if not np.all(np.isfinite(err)):
            raise NumericError("non-finite value-head loss", step)
        optim_step(v, backward(v, s[idx], (2.0 / batch_size) * err[:, None], hid), opt)
    return ValueHead(v, critic.standardizer)


def save_critic(critic: Critic, stem) -> None:
    """Write ``<stem>.q.net``, ``<stem>.q_target.net`` and ``<stem>.json``."""
    stem = Path(stem)
    save_network(critic.q_net, stem.with_suffix(".q.net"))
    save_network(critic.q_target, stem.with_suffix(".q_target.net"))
    side = {"discount": critic.discount, "polyak": critic.polyak, "act_dim": critic.act_dim,
            "standardizer": critic.standardizer.to_json() if critic.standardizer else None,
            "trained": critic.trained, "config_hash": critic.config_hash}
    stem.with_suffix(".json").write_text(json.dumps(side, sort_keys=True, indent=1))


def load_critic(stem) -> Critic:
    stem = Path(stem)
    side = json.loads(stem.with_suffix(".json").read_text())
    std = Standardizer.from_json(side["standardizer"]) if side["standardizer"] else None
    return Critic(load_network(stem.with_suffix(".q.net")), load_network(stem.with_suffix(".q_target.net")),
                  side["act_dim"], side["polyak"], side["discount"], std, side["trained"], side["config_hash"])
