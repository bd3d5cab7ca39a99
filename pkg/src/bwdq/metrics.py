"""Baseline dataset-quality estimators: mean reward, mean behavioral Q, mean
advantage and the performance difference against the random policy."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .critic import Critic, ValueHead, q_value
from .dataset import Dataset, RandomPolicy
from .errors import InvalidArgument, InvalidState


@dataclass
class MetricReport:
    mean_reward: float
    mean_q: float
    mean_advantage: float
    pd_random: float
    n_samples: int
    seeds: list[int] = field(default_factory=list)
    config_hash: str = ""
    pd_random_unscaled: float | None = None  # the same mean without the 1/(1-gamma) factor

    def __post_init__(self):
        vals = [self.mean_reward, self.mean_q, self.mean_advantage, self.pd_random]
        if not all(np.isfinite(v) for v in vals):
            raise InvalidArgument(f"non-finite metric in {vals}")
        if self.n_samples <= 0:
            raise InvalidArgument("n_samples must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


def _sample(dataset: Dataset, n_samples: int, rng) -> np.ndarray:
    """All rows when the dataset is small enough, else ``n_samples`` with replacement."""
    if len(dataset) == 0:
        raise InvalidArgument("metrics need a non-empty dataset")
    if n_samples < 1:
        raise InvalidArgument("n_samples must be >= 1")
    if len(dataset) <= n_samples:
        return np.arange(len(dataset))
    rng = rng if rng is not None else np.random.default_rng(0)
    return rng.integers(0, len(dataset), size=n_samples)


def _need_trained(critic: Critic):
    if not critic.trained:
        raise InvalidState("metric needs a trained critic")


def mean_reward(dataset: Dataset, n_samples: int = 20_000, rng=None) -> float:
    return float(dataset.rewards[_sample(dataset, n_samples, rng)].mean())


def mean_q(critic: Critic, dataset: Dataset, n_samples: int = 20_000, rng=None) -> float:
    _need_trained(critic)
    idx = _sample(dataset, n_samples, rng)
    return float(q_value(critic, dataset.states[idx], dataset.actions[idx]).mean())


def mean_advantage(critic: Critic, value_head: ValueHead, dataset: Dataset, n_samples: int = 20_000,
                   rng=None) -> float:
    _need_trained(critic)
    idx = _sample(dataset, n_samples, rng)
    s = dataset.states[idx]
    return float(np.mean(q_value(critic, s, dataset.actions[idx]) - value_head(s)))


def pd_random(critic: Critic, value_head: ValueHead, dataset: Dataset, random_policy: RandomPolicy,
              n_samples: int = 20_000, k_actions: int = 8, rng=None, scaled: bool = True) -> float:
    """Estimate of J(random) - J(behavior) with dataset states standing in for the
    random policy's visitation. Negative means the behavior beats random."""
    _need_trained(critic)
    gamma = critic.discount
    if not 0.0 <= gamma < 1.0:
        raise InvalidArgument("performance difference needs discount < 1")
    if k_actions < 1:
        raise InvalidArgument("k_actions must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    idx = _sample(dataset, n_samples, rng)
    s = dataset.states[idx]
    ar = random_policy.sample(rng, (len(idx), k_actions))
    q = q_value(critic, np.repeat(s, k_actions, axis=0), ar.reshape(len(idx) * k_actions, -1))
    adv = q.reshape(len(idx), k_actions).mean(axis=1) - value_head(s)
    m = float(adv.mean())
    return m / (1.0 - gamma) if scaled else m


def compute_metrics(critic: Critic, value_head: ValueHead, dataset: Dataset, random_policy: RandomPolicy,
                    n_samples: int = 20_000, k_actions: int = 8, seed: int = 0,
                    config_hash: str = "") -> MetricReport:
    """All four metrics, each from its own child stream of ``seed``."""
    streams = np.random.SeedSequence(seed).spawn(4)
    r = [np.random.default_rng(s) for s in streams]
    pd = pd_random(critic, value_head, dataset, random_policy, n_samples, k_actions, r[3], scaled=False)
    return MetricReport(
        mean_reward(dataset, n_samples, r[0]),
        mean_q(critic, dataset, n_samples, r[1]),
        mean_advantage(critic, value_head, dataset, n_samples, r[2]),
        pd / (1.0 - critic.discount),
        min(n_samples, len(dataset)),
        [seed], config_hash, pd,
    )
